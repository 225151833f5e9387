from __future__ import annotations

import json
from pathlib import Path

import pytest

from tag.llm_gateway import Gateway, GatewayConfig, ScriptedProvider
from tag.runner import load_script

import worlds


@pytest.fixture(scope="session")
def npov_world(tmp_path_factory: pytest.TempPathFactory) -> worlds.ScriptedWorld:
    return worlds.build_npov_world(tmp_path_factory.mktemp("npov_world"))


@pytest.fixture(scope="session")
def extraction_world(tmp_path_factory: pytest.TempPathFactory) -> worlds.ScriptedWorld:
    return worlds.build_extraction_world(tmp_path_factory.mktemp("extraction_world"))


@pytest.fixture
def make_gateway(tmp_path: Path):
    """Build a Gateway over an in-memory provider script.

    Accepts either a script dict (the JSON shape load_script reads) or a
    path to a script file. Returns (gateway, provider) so tests can
    inspect recorded calls.
    """

    counter = 0

    def _make(
        script: dict | str | Path,
        cache_dir: str | None = None,
        **config_overrides,
    ) -> tuple[Gateway, ScriptedProvider]:
        nonlocal counter
        if isinstance(script, (str, Path)):
            provider_script = load_script(str(script))
        else:
            counter += 1
            script_file = tmp_path / f"script-{counter}.json"
            script_file.write_text(json.dumps(script), encoding="utf-8")
            provider_script = load_script(str(script_file))
        provider = ScriptedProvider(provider_script)
        config = GatewayConfig(**config_overrides)
        gateway = Gateway(provider=provider, config=config, cache_dir=cache_dir)
        return gateway, provider

    return _make
