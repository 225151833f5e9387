"""Prompt template assets and the slot renderer.

Templates contain literal JSON braces, so str.format cannot be used.
render() substitutes only known {slot} / {slot:03d} occurrences and
leaves every other brace untouched.
"""

from __future__ import annotations

import hashlib
import re
from importlib import resources

from ..errors import TemplateError

TEMPLATE_NAMES = (
    "phase1_system",
    "phase1_user",
    "phase2_system",
    "phase2_user",
    "phase3_system",
    "phase3_user",
    "phase4_system",
    "phase4_user",
    "matcher_general_system",
    "matcher_general_user",
    "matcher_nba_system",
    "matcher_nba_user",
    "executor_npov_rule_system",
    "executor_npov_rule_user",
    "executor_npov_chunk_system",
    "executor_npov_chunk_user",
    "executor_code_system",
    "executor_code_user",
    "executor_nba_system",
    "executor_nba_user",
    "judge_npov_system",
    "judge_npov_user",
    "relevance_system",
    "relevance_user",
)

_SLOT = re.compile(r"\{([a-z_][a-z0-9_]*)(?::(0\d+d))?\}")
_cache: dict[str, str] = {}


def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}")
    if name not in _cache:
        _cache[name] = (
            resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
        )
    return _cache[name]


def render(template: str, **slots) -> str:
    """Fill {slot} markers; unknown markers raise, stray braces pass through."""

    def substitute(match: re.Match) -> str:
        name, spec = match.group(1), match.group(2)
        if name not in slots:
            raise TemplateError(f"missing slot {name!r}")
        value = slots[name]
        if spec:
            return format(int(value), spec)
        return str(value)

    return _SLOT.sub(substitute, template)


def render_template(name: str, **slots) -> str:
    return render(load_template(name), **slots)


def template_hashes() -> dict[str, str]:
    """Content hash per template, for run provenance."""
    return {
        name: hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()
        for name in TEMPLATE_NAMES
    }
