#!/usr/bin/env python3
"""End-to-end demo on a tiny self-contained scripted world.

Builds a two-rule policy, two task cases, and a scripted provider under
./demo_run/inputs, then runs the full M0/M1/M2:5/M3 matrix offline and
prints the summary table. Rerunning reuses the response cache, so the
second invocation issues zero provider calls.
"""

from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tag.corpus import Document
from tag.rule_model import AtomicUnit, Rule, RuleSet, SourceSpan, save_ruleset
from tag.runner import JsonlLogger, load_plan, run_matrix
from tag.verification import verify

RULE_SENTENCES = {
    "R-001": "Articles must attribute opinions to named sources instead of stating them as fact.",
    "R-002": "Articles must not use loaded intensifiers such as clearly or obviously.",
}

CASES = {
    "demo-001": "The mayor's plan is obviously a disaster for the city.",
    "demo-002": "Critics say the stadium deal wastes money, which is simply true.",
}

MATCHES = {"demo-001": "R-002", "demo-002": "R-001"}

REWRITES = {
    "demo-001": "Several council members said the mayor's plan would harm the city.",
    "demo-002": "Critics say the stadium deal wastes money.",
}


def build_world(inputs_dir: str) -> dict[str, str]:
    os.makedirs(inputs_dir, exist_ok=True)
    doc_text = (
        "Neutral-voice style guide.\n\n"
        + RULE_SENTENCES["R-001"]
        + "\n\n"
        + RULE_SENTENCES["R-002"]
        + "\n"
    )
    doc_path = os.path.join(inputs_dir, "policy.txt")
    with open(doc_path, "w", encoding="utf-8") as fh:
        fh.write(doc_text)

    cases_path = os.path.join(inputs_dir, "cases.jsonl")
    with open(cases_path, "w", encoding="utf-8") as fh:
        for case_id, text in CASES.items():
            fh.write(json.dumps({"case_id": case_id, "input_text": text}) + "\n")

    doc = Document(doc_id="demo-doc", text=doc_text, domain_label="npov")
    spans, atomics, rules = [], [], []
    for i, (rule_id, sentence) in enumerate(RULE_SENTENCES.items(), start=1):
        spans.append(
            SourceSpan(span_id=f"S-{i:03d}", text=sentence, normative_type="requirement")
        )
        atomics.append(
            AtomicUnit(
                atomic_id=f"A-{i:03d}",
                source_span_id=f"S-{i:03d}",
                text=sentence,
                original_text=sentence,
            )
        )
        rules.append(
            Rule(
                rule_id=rule_id,
                source_atomic_id=f"A-{i:03d}",
                rule_name=sentence.split(" must")[0] + " rule " + rule_id[-1],
                condition=(
                    "the draft states an opinion in the narrative voice"
                    if rule_id == "R-001"
                    else "the draft uses a loaded intensifier"
                ),
                action=(
                    "attribute the opinion to a named source"
                    if rule_id == "R-001"
                    else "delete the intensifier or replace it with neutral wording"
                ),
                source_text=sentence,
                category_tags=("attribution",) if rule_id == "R-001" else ("tone",),
            )
        )
    rs = RuleSet(doc_id=doc.doc_id, rules=tuple(rules), spans=tuple(spans), atomics=tuple(atomics))
    verified = verify(rs, doc)
    assert verified.verification_report.faithfulness == 1.0
    ruleset_path = os.path.join(inputs_dir, "ruleset.json")
    save_ruleset(verified, ruleset_path)

    entries = []
    for case_id, input_text in CASES.items():
        for rule_id in RULE_SENTENCES:
            verdict = "YES" if MATCHES[case_id] == rule_id else "NO"
            entries.append(
                {
                    "response": json.dumps({"verdict": verdict}),
                    "request_tag": "match:applicability_rule",
                    "patterns": [input_text, f"- rule_id: {rule_id}\n"],
                }
            )
        entries.append(
            {
                "response": (
                    f"Applied rules: {MATCHES[case_id]}\n"
                    "Reasoning: removed the biased framing\n"
                    f"Rewrite: {REWRITES[case_id]}"
                ),
                "request_tag": "exec:npov",
                "patterns": [input_text],
            }
        )
        entries.append(
            {
                "response": json.dumps(
                    {
                        "VFR": True,
                        "Rem": 4,
                        "Pres": 4,
                        "Tone": 4,
                        "Flu": 5,
                        "reason": "bias removed, meaning kept",
                    }
                ),
                "request_tag": "judge:npov",
                "patterns": [input_text],
            }
        )
    script_path = os.path.join(inputs_dir, "script.json")
    with open(script_path, "w", encoding="utf-8") as fh:
        json.dump({"entries": entries, "default_embedding_dim": 8}, fh, indent=2)

    return {
        "doc_path": doc_path,
        "cases_path": cases_path,
        "ruleset_path": ruleset_path,
        "script_path": script_path,
    }


def write_plan(run_dir: str, paths: dict[str, str]) -> str:
    plan_path = os.path.join(run_dir, "run.toml")
    with open(plan_path, "w", encoding="utf-8") as fh:
        fh.write(
            "[gateway]\n"
            f'script_path = "{paths["script_path"]}"\n'
            "\n[corpus]\n"
            f'doc_path = "{paths["doc_path"]}"\n'
            'doc_id = "demo-doc"\n'
            'domain_label = "npov"\n'
            f'cases_path = "{paths["cases_path"]}"\n'
            f'ruleset_path = "{paths["ruleset_path"]}"\n'
            "\n[methods]\n"
            'matrix = ["M0", "M1", "M2:5", "M3"]\n'
            "\n[evaluation]\n"
            'domain = "npov"\n'
            "\n[run]\n"
            f'run_dir = "{os.path.join(run_dir, "out")}"\n'
        )
    return plan_path


def main() -> int:
    run_dir = os.path.abspath(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
    os.makedirs(run_dir, exist_ok=True)
    paths = build_world(os.path.join(run_dir, "inputs"))
    plan = load_plan(write_plan(run_dir, paths))
    record = run_matrix(plan)

    columns = ["method_id", "n_cases", "vfr_percent", "aux_avg", "mean_units"]
    widths = {c: max(len(c), 11) for c in columns}
    print(f"run_dir: {plan.run_dir}")
    print(f"config_hash: {record.config_hash}")
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for row in record.summary["rows"]:
        print("  ".join(str(row.get(c, "")).ljust(widths[c]) for c in columns))
    log = JsonlLogger(os.path.join(plan.run_dir, "events.jsonl"))
    log({"event": "demo_done", "methods": list(plan.methods)})
    print(f"artifacts: {sorted(os.listdir(plan.run_dir))}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
