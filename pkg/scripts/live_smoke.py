#!/usr/bin/env python3
"""Live-endpoint smoke run: extraction, verification, matrix, cache proof.

Requires TAG_LIVE_BASE_URL and TAG_LIVE_MODEL. TAG_LIVE_EMBED_MODEL is
optional and enables the M2:5 retrieval arm. Everything runs against a
fresh run directory; the final step reruns the matrix with a new gateway
and proves the cache replays it without a single upstream call.
"""

from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tag.corpus import Document
from tag.extraction import run_extraction
from tag.rule_model import save_ruleset
from tag.runner import build_gateway, load_plan, run_matrix
from tag.verification import verify

DOC_TEXT = """Neutral-voice style guide.

Articles must attribute opinions to named sources instead of stating them as fact.

Articles must not use loaded intensifiers such as clearly or obviously.

Headlines must not state contested claims as settled conclusions.
"""

CASES = [
    ("live-001", "The mayor's plan is obviously a disaster for the city."),
    ("live-002", "Critics say the stadium deal wastes money, which is simply true."),
    ("live-003", "The new policy is clearly the best option on the table."),
    ("live-004", "Residents believe the park closure was a mistake."),
    ("live-005", "The committee's report proves the project failed."),
    ("live-006", "Experts agree the bridge design is unquestionably flawed."),
    ("live-007", "The festival was, frankly, a waste of public funds."),
    ("live-008", "Supporters argue the reform will help small businesses."),
    ("live-009", "The senator's speech was an embarrassing display of ignorance."),
    ("live-010", "Officials announced the road will close for repairs in May."),
]


def main() -> int:
    base_url = os.environ.get("TAG_LIVE_BASE_URL", "")
    model = os.environ.get("TAG_LIVE_MODEL", "")
    if not (base_url and model):
        print("set TAG_LIVE_BASE_URL and TAG_LIVE_MODEL to run the live smoke", file=sys.stderr)
        return 2
    embed_model = os.environ.get("TAG_LIVE_EMBED_MODEL", "")
    methods = ["M0", "M1", "M2:5", "M3"] if embed_model else ["M0", "M1", "M3"]

    run_dir = os.path.abspath(sys.argv[1] if len(sys.argv) > 1 else "live_run")
    inputs_dir = os.path.join(run_dir, "inputs")
    os.makedirs(inputs_dir, exist_ok=True)
    doc_path = os.path.join(inputs_dir, "policy.txt")
    with open(doc_path, "w", encoding="utf-8") as fh:
        fh.write(DOC_TEXT)
    cases_path = os.path.join(inputs_dir, "cases.jsonl")
    with open(cases_path, "w", encoding="utf-8") as fh:
        for case_id, text in CASES:
            fh.write(json.dumps({"case_id": case_id, "input_text": text}) + "\n")
    ruleset_path = os.path.join(inputs_dir, "ruleset.json")

    plan_path = os.path.join(run_dir, "run.toml")
    with open(plan_path, "w", encoding="utf-8") as fh:
        fh.write(
            "[gateway]\n"
            f'endpoint_url = "{base_url}"\n'
            f'model_id = "{model}"\n'
            f'matcher_model_id = "{model}"\n'
            f'judge_model_id = "{model}"\n'
            + (f'embedding_model_id = "{embed_model}"\n' if embed_model else "")
            + "\n[corpus]\n"
            f'doc_path = "{doc_path}"\n'
            'doc_id = "live-doc"\n'
            'domain_label = "npov"\n'
            f'cases_path = "{cases_path}"\n'
            f'ruleset_path = "{ruleset_path}"\n'
            "\n[methods]\n"
            "matrix = [" + ", ".join(f'"{m}"' for m in methods) + "]\n"
            "\n[evaluation]\n"
            'domain = "npov"\n'
            "\n[run]\n"
            f'run_dir = "{os.path.join(run_dir, "out")}"\n'
        )
    plan = load_plan(plan_path)

    gateway = build_gateway(plan)
    doc = Document(doc_id="live-doc", text=DOC_TEXT, domain_label="npov")
    rs = run_extraction(doc, plan.extraction, gateway)
    print(f"extracted {len(rs.rules)} rules from {len(rs.spans)} spans")
    verified = verify(rs, doc)
    report = verified.verification_report
    print(
        f"verification: faithfulness={report.faithfulness:.3f} "
        f"coverage={report.coverage:.3f} independence={report.independence:.3f}"
    )
    if not verified.rules:
        print("no rules survived verification", file=sys.stderr)
        return 1
    save_ruleset(verified, ruleset_path)

    record = run_matrix(plan)
    if "failed_methods" in record.summary:
        print(f"failed methods: {record.summary['failed_methods']}", file=sys.stderr)
        return 1
    for row in record.summary["rows"]:
        print(
            f"{row['method_id']:>6}: vfr={row['vfr_percent']} "
            f"aux_avg={row['aux_avg']} mean_units={row['mean_units']}"
        )

    replay_gateway = build_gateway(plan)
    run_matrix(plan, gateway=replay_gateway)
    print(
        f"cache replay: upstream_chat_calls={replay_gateway.upstream_chat_calls} "
        f"upstream_embed_calls={replay_gateway.upstream_embed_calls}"
    )
    if replay_gateway.upstream_chat_calls or replay_gateway.upstream_embed_calls:
        print("cache replay issued upstream calls", file=sys.stderr)
        return 1
    print(f"smoke run complete: {plan.run_dir}")
    return 0



if __name__ == "__main__":
    raise SystemExit(main())
