"""Command-line interface: extraction, verification, matching, and runs."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .corpus import chunk_document, load_cases, load_document
from .errors import ConfigError, IoError, ParseError, TagError
from .evaluation import aggregate, evaluate_records, score_to_obj
from .executor import record_from_obj, record_to_obj
from .extraction import ALL_PHASES, run_extraction
from .matcher import match_all, matched_set_to_obj
from .retrieval import build_index, chunk_units, rule_units, save_index
from .rule_model import load_ruleset, report_to_obj, save_ruleset
from .runner import (
    JsonlLogger,
    RunContext,
    build_gateway,
    collect_method_records,
    load_plan,
    parse_method,
    run_factorial,
    run_matrix,
    run_phase_ablation,
)
from .verification import verify


def _gateway_from_plan(plan):
    os.makedirs(plan.run_dir, exist_ok=True)
    log = JsonlLogger(os.path.join(plan.run_dir, "log.jsonl"))
    return build_gateway(plan, log), log


def _write_jsonl(path: str, objs) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for obj in objs:
                fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path!r}: {exc}") from exc


def _read_jsonl(path: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read {path!r}: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}", line=lineno) from exc
    return out


def _write_json(path: str, obj: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path!r}: {exc}") from exc


def _doc_id_for(args, path: str) -> str:
    explicit = getattr(args, "doc_id", None)
    if explicit:
        return explicit
    return os.path.splitext(os.path.basename(path))[0]


def _cmd_extract(args) -> int:
    plan = load_plan(args.config)
    gateway, log = _gateway_from_plan(plan)
    doc = load_document(args.doc, _doc_id_for(args, args.doc), args.domain)
    toggles = frozenset(ALL_PHASES - set(args.disable_phase or ()))
    cfg = replace(plan.extraction, phase_toggles=toggles)
    rs = run_extraction(doc, cfg, gateway, log)
    if not rs.rules:
        print("extraction produced no rules; nothing written", file=sys.stderr)
        return 1
    save_ruleset(rs, args.out)
    print(
        f"extracted {len(rs.rules)} rules from {len(rs.spans)} spans "
        f"({len(rs.atomics)} atomic units) -> {args.out}"
    )
    return 0


def _cmd_verify(args) -> int:
    rs = load_ruleset(args.ruleset)
    doc = load_document(args.doc, _doc_id_for(args, args.doc), args.domain or "")
    verified = verify(rs, doc)
    report = report_to_obj(verified.verification_report)
    _write_json(args.report, report)
    if not verified.rules:
        print("no rules survived verification; report written, ruleset not", file=sys.stderr)
        return 1
    save_ruleset(verified, args.out)
    print(
        "faithfulness={faithfulness:.3f} coverage={coverage:.3f} "
        "independence={independence:.3f}".format(**report)
    )
    return 0


def _cmd_index(args) -> int:
    plan = load_plan(args.config)
    gateway, _ = _gateway_from_plan(plan)
    if args.kind == "rule":
        ruleset_path = args.ruleset or plan.ruleset_path
        if not ruleset_path:
            raise ConfigError("rule index needs --ruleset or corpus.ruleset_path")
        units = rule_units(load_ruleset(ruleset_path))
    else:
        doc_path = args.doc or plan.doc_path
        doc = load_document(doc_path, _doc_id_for(args, doc_path), plan.domain_label)
        chunks = chunk_document(
            doc,
            args.chunk_size or plan.chunk_size,
            plan.chunk_overlap if args.overlap is None else args.overlap,
        )
        units = chunk_units(chunks)
    index = build_index(units, args.kind, gateway)
    save_index(index, args.out)
    print(f"indexed {len(index.entries)} {args.kind} units -> {args.out}")
    return 0


def _cmd_match(args) -> int:
    plan = load_plan(args.config)
    gateway, _ = _gateway_from_plan(plan)
    cases = load_cases(args.cases or plan.cases_path)
    matcher_domain = "nba" if plan.domain == "nba" else "general"
    if args.mode == "chunk":
        doc_path = args.doc or plan.doc_path
        doc = load_document(doc_path, _doc_id_for(args, doc_path), plan.domain_label)
        units = list(chunk_document(doc, plan.chunk_size, plan.chunk_overlap))
        mode = "applicability_chunk"
    else:
        ruleset_path = args.ruleset or plan.ruleset_path
        if not ruleset_path:
            raise ConfigError("matching needs --ruleset or corpus.ruleset_path")
        units = list(load_ruleset(ruleset_path).rules)
        mode = "applicability_rule" if args.mode == "applicability" else "relevance_rule"
    matched = [match_all(case, units, mode, gateway, matcher_domain) for case in cases]
    _write_jsonl(args.out, [matched_set_to_obj(ms) for ms in matched])
    total_yes = sum(len(ms.unit_ids) for ms in matched)
    print(
        f"matched {len(cases)} cases against {len(units)} units "
        f"({total_yes} YES verdicts) -> {args.out}"
    )
    return 0


def _cmd_run(args) -> int:
    parse_method(args.method)
    plan = load_plan(args.config)
    overrides = {"methods": (args.method,)}
    if args.cases:
        overrides["cases_path"] = os.path.abspath(args.cases)
    if args.domain:
        overrides["domain"] = args.domain
    plan = replace(plan, **overrides)
    ctx = RunContext(plan)
    records = collect_method_records(ctx, args.method)
    out = args.out or os.path.join(
        plan.run_dir, f"records-{args.method.replace(':', '-')}.jsonl"
    )
    _write_jsonl(out, [record_to_obj(r) for r in records])
    print(f"executed {len(records)} cases with {args.method} -> {out}")
    return 0


def _cmd_evaluate(args) -> int:
    records = [record_from_obj(obj) for obj in _read_jsonl(args.records)]
    cases = load_cases(args.cases)
    gateway = None
    if args.domain == "npov":
        if not args.config:
            raise ConfigError("NPOV evaluation needs --config for the judge gateway")
        plan = load_plan(args.config)
        gateway, _ = _gateway_from_plan(plan)
    scores = evaluate_records(
        records, cases, args.domain, gateway=gateway, code_report_path=args.code_report
    )
    _write_jsonl(args.out, [score_to_obj(s) for s in scores])
    summary = aggregate(scores, records)
    _write_json(args.summary, summary)
    print(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False))
    return 0


def _cmd_run_matrix(args) -> int:
    record = run_matrix(load_plan(args.config))
    print(json.dumps(record.summary, indent=2, sort_keys=True, ensure_ascii=False))
    return 1 if record.summary.get("failed_methods") else 0


def _cmd_ablate(args) -> int:
    record = run_phase_ablation(load_plan(args.config))
    print(json.dumps(record.summary, indent=2, sort_keys=True, ensure_ascii=False))
    return 1 if record.summary.get("failed_methods") else 0


def _cmd_factorial(args) -> int:
    record = run_factorial(load_plan(args.config))
    print(json.dumps(record.summary, indent=2, sort_keys=True, ensure_ascii=False))
    return 1 if record.summary.get("failed_methods") else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tag",
        description="Rule extraction, applicability matching, and benchmark runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract a rule set from a document")
    p.add_argument("--doc", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True, help="run TOML with [gateway] settings")
    p.add_argument("--doc-id")
    p.add_argument(
        "--disable-phase", type=int, action="append", choices=[1, 2, 3, 4], default=[]
    )
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("verify", help="programmatically verify a rule set")
    p.add_argument("--ruleset", required=True)
    p.add_argument("--doc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--doc-id")
    p.add_argument("--domain")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("index", help="build an embedding index over rules or chunks")
    p.add_argument("--kind", required=True, choices=["rule", "chunk"])
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--ruleset")
    p.add_argument("--doc")
    p.add_argument("--doc-id")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--overlap", type=int)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("match", help="pairwise-match cases against rules or chunks")
    p.add_argument("--cases")
    p.add_argument("--ruleset")
    p.add_argument("--mode", required=True, choices=["applicability", "relevance", "chunk"])
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--doc")
    p.add_argument("--doc-id")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("run", help="execute one method over the cases")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True, help="M0, M1, M2:k, or M3")
    p.add_argument("--cases")
    p.add_argument("--domain", choices=["npov", "code", "nba"])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="score execution records")
    p.add_argument("--records", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--domain", required=True, choices=["npov", "code", "nba"])
    p.add_argument("--out", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--config")
    p.add_argument("--code-report")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run-matrix", help="run the full method matrix")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run_matrix)

    p = sub.add_parser("ablate-phases", help="leave-one-phase-out extraction runs")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("factorial", help="2x2 retrieval unit/relation grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_factorial)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
