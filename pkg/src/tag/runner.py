"""Experiment orchestration: method matrix, phase ablations, factorial cells."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import Chunk, Document, TaskCase, chunk_document, load_cases, load_document
from .errors import ConfigError, IoError
from .evaluation import EvalScore, aggregate, evaluate_records, score_to_obj
from .executor import ExecutionRecord, execute, record_to_obj
from .extraction import ExtractionConfig, make_reextractor, run_extraction
from .llm_gateway import (
    Gateway,
    GatewayConfig,
    ProviderScript,
    ScriptEntry,
    ScriptedProvider,
    HttpProvider,
)
from .matcher import MatchedSet, match_all, matched_set_to_obj
from .prompts import template_hashes
from .retrieval import build_index, chunk_units, rule_units, top_k
from .rule_model import RuleSet, load_ruleset, save_ruleset
from .verification import verify

logger = logging.getLogger(__name__)

MATRIX_METHODS_DEFAULT = ("M0", "M1", "M2:5", "M2:10", "M2:15", "M2:20", "M3")

ABLATION_VARIANTS = (
    "M3-full",
    "M3-nophase1",
    "M3-nophase2",
    "M3-nophase3",
    "M3-nophase4",
    "M3-nophase5",
    "M3-relevance",
)

FACTORIAL_CELLS = (
    "rules+applicability",
    "rules+similarity",
    "chunks+similarity",
    "chunks+applicability",
)


@dataclass(frozen=True)
class ExperimentPlan:
    domain: str
    methods: tuple[str, ...]
    doc_path: str
    doc_id: str
    domain_label: str
    cases_path: str
    run_dir: str
    ruleset_path: str | None = None
    seed: int = 0
    chunk_size: int = 500
    chunk_overlap: int = 100
    factorial_chunk_k: int = 20
    code_report_path: str | None = None
    script_path: str | None = None
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    summary: dict
    records_paths: dict
    scores_paths: dict
    pick_count_stats: dict


def parse_method(spec: str) -> tuple[str, int | None]:
    """Split a method spec into (kind, k); only M2 carries a k."""
    if spec in ("M0", "M1", "M3"):
        return spec, None
    if spec.startswith("M2:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad method spec {spec!r}") from None
        if k < 1:
            raise ConfigError(f"method {spec!r}: k must be >= 1")
        return "M2", k
    raise ConfigError(f"unknown method spec {spec!r}")


def load_plan(path: str) -> ExperimentPlan:
    """Read a TOML run configuration into an ExperimentPlan."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path!r}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid TOML: {exc}") from exc

    def section(name: str) -> dict:
        value = raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    gateway_cfg = section("gateway")
    corpus_cfg = section("corpus")
    methods_cfg = section("methods")
    eval_cfg = section("evaluation")
    run_cfg = section("run")
    extraction_cfg = section("extraction")

    domain = eval_cfg.get("domain")
    if domain not in ("npov", "code", "nba"):
        raise ConfigError("evaluation.domain must be one of npov, code, nba")
    cases_path = corpus_cfg.get("cases_path")
    if not cases_path:
        raise ConfigError("corpus.cases_path is required")
    doc_path = corpus_cfg.get("doc_path")
    if not doc_path:
        raise ConfigError("corpus.doc_path is required")
    run_dir = run_cfg.get("run_dir")
    if not run_dir:
        raise ConfigError("run.run_dir is required")
    methods = tuple(methods_cfg.get("matrix", MATRIX_METHODS_DEFAULT))
    for spec in methods:
        parse_method(spec)

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str | None) -> str | None:
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(base, p)

    gateway = GatewayConfig(
        model_id=gateway_cfg.get("model_id", GatewayConfig.model_id),
        matcher_model_id=gateway_cfg.get(
            "matcher_model_id", GatewayConfig.matcher_model_id
        ),
        judge_model_id=gateway_cfg.get("judge_model_id", GatewayConfig.judge_model_id),
        embedding_model_id=gateway_cfg.get(
            "embedding_model_id", GatewayConfig.embedding_model_id
        ),
        endpoint_url=gateway_cfg.get("endpoint_url", ""),
        max_parallel_requests=int(gateway_cfg.get("max_parallel_requests", 4)),
    )
    extraction = ExtractionConfig(
        section_char_limit=int(extraction_cfg.get("section_char_limit", 8000)),
        atomic_batch_size=int(extraction_cfg.get("atomic_batch_size", 20)),
        rule_batch_size=int(extraction_cfg.get("rule_batch_size", 20)),
        pair_batch_size=int(extraction_cfg.get("pair_batch_size", 10)),
    )
    return ExperimentPlan(
        domain=domain,
        methods=methods,
        doc_path=resolve(doc_path),
        doc_id=corpus_cfg.get("doc_id", "doc"),
        domain_label=corpus_cfg.get("domain_label", domain),
        cases_path=resolve(cases_path),
        run_dir=resolve(run_dir),
        ruleset_path=resolve(corpus_cfg.get("ruleset_path")),
        seed=int(run_cfg.get("seed", 0)),
        chunk_size=int(corpus_cfg.get("chunk_size", 500)),
        chunk_overlap=int(corpus_cfg.get("chunk_overlap", 100)),
        factorial_chunk_k=int(methods_cfg.get("factorial_chunk_k", 20)),
        code_report_path=resolve(eval_cfg.get("code_report_path")),
        script_path=resolve(gateway_cfg.get("script_path")),
        gateway=gateway,
        extraction=extraction,
    )


def load_script(path: str) -> ProviderScript:
    """Read a scripted-provider JSON file (entries + embedding table)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read script {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"script {path!r} is not valid JSON: {exc}") from exc
    entries = tuple(
        ScriptEntry(
            response=e["response"],
            request_tag=e.get("request_tag"),
            patterns=tuple(e.get("patterns", ())),
        )
        for e in obj.get("entries", ())
    )
    embeddings = {
        text: tuple(float(v) for v in vec)
        for text, vec in obj.get("embeddings", {}).items()
    }
    return ProviderScript(
        entries=entries,
        embedding_table=embeddings,
        default_embedding_dim=obj.get("default_embedding_dim"),
    )


class JsonlLogger:
    """Append-only JSONL event log shared across threads."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def __call__(self, record: dict) -> None:
        line = json.dumps({"ts": round(time.time(), 3), **record}, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def build_gateway(plan: ExperimentPlan, log: Callable[[dict], None] | None = None) -> Gateway:
    """Construct the gateway from the plan: scripted replay or live HTTP."""
    if plan.script_path:
        provider = ScriptedProvider(load_script(plan.script_path))
    elif plan.gateway.endpoint_url:
        provider = HttpProvider(plan.gateway.endpoint_url)
    else:
        raise ConfigError(
            "gateway needs either script_path (offline) or endpoint_url (live)"
        )
    cache_dir = os.path.join(plan.run_dir, "cache")
    return Gateway(provider, config=plan.gateway, cache_dir=cache_dir, log=log)


def _file_hash(path: str | None) -> str:
    if not path:
        return ""
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError as exc:
        raise IoError(f"cannot hash input file {path!r}: {exc}") from exc


def config_hash(plan: ExperimentPlan) -> str:
    """Provenance hash over input content and parameters, never over paths."""
    payload = {
        "domain": plan.domain,
        "domain_label": plan.domain_label,
        "methods": list(plan.methods),
        "seed": plan.seed,
        "chunk_size": plan.chunk_size,
        "chunk_overlap": plan.chunk_overlap,
        "factorial_chunk_k": plan.factorial_chunk_k,
        "doc_id": plan.doc_id,
        "gateway": {
            "model_id": plan.gateway.model_id,
            "matcher_model_id": plan.gateway.matcher_model_id,
            "judge_model_id": plan.gateway.judge_model_id,
            "embedding_model_id": plan.gateway.embedding_model_id,
            "endpoint_url": plan.gateway.endpoint_url,
        },
        "extraction": {
            "section_char_limit": plan.extraction.section_char_limit,
            "atomic_batch_size": plan.extraction.atomic_batch_size,
            "rule_batch_size": plan.extraction.rule_batch_size,
            "pair_batch_size": plan.extraction.pair_batch_size,
            "phase_toggles": sorted(plan.extraction.phase_toggles),
        },
        "inputs": {
            "doc": _file_hash(plan.doc_path),
            "cases": _file_hash(plan.cases_path),
            "ruleset": _file_hash(plan.ruleset_path),
            "script": _file_hash(plan.script_path),
            "code_report": _file_hash(plan.code_report_path),
        },
        "templates": template_hashes(),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def plan_to_obj(plan: ExperimentPlan) -> dict:
    return {
        "domain": plan.domain,
        "methods": list(plan.methods),
        "doc_path": plan.doc_path,
        "doc_id": plan.doc_id,
        "domain_label": plan.domain_label,
        "cases_path": plan.cases_path,
        "ruleset_path": plan.ruleset_path,
        "run_dir": plan.run_dir,
        "seed": plan.seed,
        "chunk_size": plan.chunk_size,
        "chunk_overlap": plan.chunk_overlap,
        "factorial_chunk_k": plan.factorial_chunk_k,
        "code_report_path": plan.code_report_path,
        "script_path": plan.script_path,
    }


def _sanitize(method_id: str) -> str:
    return method_id.replace(":", "-").replace("+", "-")


def _write_jsonl(path: str, objs: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _map_cases(fn, cases: Sequence[TaskCase], workers: int) -> list:
    if workers <= 1 or len(cases) <= 1:
        return [fn(case) for case in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cases))


class RunContext:
    """Shared inputs and output paths for one run directory."""

    def __init__(self, plan: ExperimentPlan, gateway: Gateway | None = None):
        self.plan = plan
        os.makedirs(plan.run_dir, exist_ok=True)
        self.log = JsonlLogger(os.path.join(plan.run_dir, "log.jsonl"))
        self.gateway = gateway or build_gateway(plan, log=self.log)
        self.doc = load_document(plan.doc_path, plan.doc_id, plan.domain_label)
        self.cases = load_cases(plan.cases_path)
        self.config_hash = config_hash(plan)
        self.records_paths: dict[str, str] = {}
        self.scores_paths: dict[str, str] = {}
        self.pick_counts: dict[str, float] = {}
        self.matches: list[dict] = []
        self.all_records: list[ExecutionRecord] = []
        self.all_scores: list[EvalScore] = []
        self.failed: list[str] = []
        self.row_extras: dict[str, dict] = {}
        _write_json(
            os.path.join(plan.run_dir, "plan.json"),
            {
                "plan": plan_to_obj(plan),
                "config_hash": self.config_hash,
                "templates": template_hashes(),
            },
        )

    def load_verified_ruleset(self) -> RuleSet:
        if not self.plan.ruleset_path:
            raise ConfigError("this run needs corpus.ruleset_path")
        rs = load_ruleset(self.plan.ruleset_path)
        if rs.verification_report is None:
            raise ConfigError(
                f"ruleset {self.plan.ruleset_path!r} has no verification report; "
                "run the verify step first"
            )
        return rs

    def persist_method(
        self, method_id: str, records: list[ExecutionRecord], scores: list[EvalScore]
    ) -> None:
        safe = _sanitize(method_id)
        records_path = os.path.join(self.plan.run_dir, f"records-{safe}.jsonl")
        scores_path = os.path.join(self.plan.run_dir, f"scores-{safe}.jsonl")
        _write_jsonl(records_path, [record_to_obj(r) for r in records])
        _write_jsonl(scores_path, [score_to_obj(s) for s in scores])
        self.records_paths[method_id] = records_path
        self.scores_paths[method_id] = scores_path
        if records:
            self.pick_counts[method_id] = round(
                sum(len(r.units_shown) for r in records) / len(records), 1
            )
        self.all_records.extend(records)
        self.all_scores.extend(scores)

    def record_matches(self, method_id: str, matched: list[MatchedSet]) -> None:
        for ms in matched:
            self.matches.append({"method_id": method_id, **matched_set_to_obj(ms)})

    def evaluate(self, records: list[ExecutionRecord]) -> list[EvalScore]:
        return evaluate_records(
            records,
            self.cases,
            self.plan.domain,
            gateway=self.gateway,
            code_report_path=self.plan.code_report_path,
        )

    def run_isolated(self, method_id: str, fn: Callable[[], None]) -> None:
        self.log({"event": "method_start", "method": method_id})
        try:
            fn()
            self.log({"event": "method_done", "method": method_id})
        except Exception as exc:  # per-method isolation
            logger.exception("method %s failed", method_id)
            self.failed.append(method_id)
            self.log({"event": "method_failed", "method": method_id, "error": str(exc)})

    def finish(self) -> RunRecord:
        if self.matches:
            _write_jsonl(os.path.join(self.plan.run_dir, "matches.jsonl"), self.matches)
        summary: dict = {
            "config_hash": self.config_hash,
            "domain": self.plan.domain,
            "rows": [],
        }
        if self.all_scores:
            table = aggregate(self.all_scores, self.all_records)
            rows = table["rows"]
            for row in rows:
                extras = self.row_extras.get(row["method_id"])
                if extras:
                    row.update(extras)
            summary["rows"] = rows
        if self.failed:
            summary["failed_methods"] = sorted(self.failed)
        _write_json(os.path.join(self.plan.run_dir, "summary.json"), summary)
        return RunRecord(
            config_hash=self.config_hash,
            summary=summary,
            records_paths=dict(self.records_paths),
            scores_paths=dict(self.scores_paths),
            pick_count_stats=dict(self.pick_counts),
        )


def _run_m3_style(
    ctx: RunContext,
    method_id: str,
    rs: RuleSet,
    matcher_mode: str,
) -> list[ExecutionRecord]:
    """Matcher-then-executor flow shared by M3, ablations, and rule cells."""
    plan = ctx.plan
    rules = list(rs.rules)
    rule_by_id = {rule.rule_id: rule for rule in rules}
    records: list[ExecutionRecord] = []
    matched_sets: list[MatchedSet] = []
    matcher_domain = "nba" if plan.domain == "nba" else "general"
    for case in ctx.cases:
        ms = match_all(case, rules, matcher_mode, ctx.gateway, matcher_domain)
        matched_sets.append(ms)
        context = [rule_by_id[unit_id] for unit_id in ms.unit_ids]
        records.append(
            execute(case, context, plan.domain, "rule", ctx.gateway, method_id)
        )
    ctx.record_matches(method_id, matched_sets)
    return records


def collect_method_records(ctx: RunContext, spec: str) -> list[ExecutionRecord]:
    """Execute one method spec over the cases, returning unscored records."""
    plan = ctx.plan
    kind, k = parse_method(spec)
    workers = plan.gateway.max_parallel_requests
    if kind == "M0":
        return _map_cases(
            lambda case: execute(case, [], plan.domain, "none", ctx.gateway, "M0"),
            ctx.cases,
            workers,
        )
    if kind == "M1":
        rs = ctx.load_verified_ruleset()
        context = list(rs.rules)
        return _map_cases(
            lambda case: execute(case, context, plan.domain, "rule", ctx.gateway, "M1"),
            ctx.cases,
            workers,
        )
    if kind == "M2":
        chunks = chunk_document(ctx.doc, plan.chunk_size, plan.chunk_overlap)
        chunk_by_id = {unit_id: chunk for (unit_id, _), chunk in zip(chunk_units(chunks), chunks)}
        index = build_index(chunk_units(chunks), "chunk", ctx.gateway)

        def run_case(case: TaskCase) -> ExecutionRecord:
            query_vec = ctx.gateway.embed([case.input_text])[0]
            picks = top_k(index, query_vec, k)
            context = [chunk_by_id[unit_id] for unit_id, _ in picks]
            return execute(case, context, plan.domain, "chunk", ctx.gateway, spec)

        return _map_cases(run_case, ctx.cases, workers)
    rs = ctx.load_verified_ruleset()
    return _run_m3_style(ctx, "M3", rs, "applicability_rule")


def _run_method(ctx: RunContext, spec: str) -> None:
    records = collect_method_records(ctx, spec)
    scores = ctx.evaluate(records)
    ctx.persist_method(spec, records, scores)


def run_matrix(plan: ExperimentPlan, gateway: Gateway | None = None) -> RunRecord:
    """Run every configured method over the cases and summarize."""
    ctx = RunContext(plan, gateway)
    for spec in plan.methods:
        ctx.run_isolated(spec, lambda spec=spec: _run_method(ctx, spec))
    return ctx.finish()


def _ablation_ruleset(
    ctx: RunContext, variant: str
) -> RuleSet:
    """Extract (and normally verify) the ruleset for one ablation variant."""
    plan = ctx.plan
    toggles = set(ctx.plan.extraction.phase_toggles)
    skip_verification = variant == "M3-nophase5"
    for n in (1, 2, 3, 4):
        if variant == f"M3-nophase{n}":
            toggles.discard(n)
    cfg = replace(plan.extraction, phase_toggles=frozenset(toggles))
    rs = run_extraction(ctx.doc, cfg, ctx.gateway, log=ctx.log)
    if not skip_verification:
        reextract = make_reextractor(rs, cfg, ctx.gateway, plan.domain_label, log=ctx.log)
        rs = verify(rs, ctx.doc, reextract=reextract)
    if rs.rules:
        save_ruleset(rs, os.path.join(plan.run_dir, f"ruleset-{_sanitize(variant)}.json"))
    return rs


def run_phase_ablation(plan: ExperimentPlan, gateway: Gateway | None = None) -> RunRecord:
    """Leave-one-phase-out M3 runs plus the relevance-ranker control."""
    ctx = RunContext(plan, gateway)
    full_ruleset: dict[str, RuleSet] = {}

    def run_variant(variant: str) -> None:
        if variant == "M3-relevance":
            rs = full_ruleset.get("M3-full")
            if rs is None:
                rs = _ablation_ruleset(ctx, "M3-full")
            matcher_mode = "relevance_rule"
        else:
            rs = _ablation_ruleset(ctx, variant)
            if variant == "M3-full":
                full_ruleset["M3-full"] = rs
            matcher_mode = "applicability_rule"
        records = _run_m3_style(ctx, variant, rs, matcher_mode)
        scores = ctx.evaluate(records)
        ctx.persist_method(variant, records, scores)
        ctx.row_extras[variant] = {"m_rules": len(rs.rules)}

    for variant in ABLATION_VARIANTS:
        ctx.run_isolated(variant, lambda variant=variant: run_variant(variant))
    return ctx.finish()


def run_factorial(plan: ExperimentPlan, gateway: Gateway | None = None) -> RunRecord:
    """The 2x2 grid over retrieval unit (chunks/rules) and relation
    (similarity/applicability); the rules+similarity k is derived from the
    applicability cell's mean pick count."""
    ctx = RunContext(plan, gateway)
    workers = plan.gateway.max_parallel_requests
    rs = ctx.load_verified_ruleset()
    rule_by_id = {rule.rule_id: rule for rule in rs.rules}
    chunks = chunk_document(ctx.doc, plan.chunk_size, plan.chunk_overlap)
    chunk_by_id = {unit_id: chunk for (unit_id, _), chunk in zip(chunk_units(chunks), chunks)}
    derived_k: dict[str, int] = {}

    def run_rules_applicability() -> None:
        method_id = "rules+applicability"
        records = _run_m3_style(ctx, method_id, rs, "applicability_rule")
        mean_picks = sum(len(r.units_shown) for r in records) / len(records)
        derived_k["rules+similarity"] = max(1, round(mean_picks))
        scores = ctx.evaluate(records)
        ctx.persist_method(method_id, records, scores)

    def run_rules_similarity() -> None:
        method_id = "rules+similarity"
        if method_id not in derived_k:
            raise ConfigError(
                "rules+similarity needs the rules+applicability cell to set k"
            )
        k = derived_k[method_id]
        index = build_index(rule_units(rs), "rule", ctx.gateway)

        def run_case(case: TaskCase) -> ExecutionRecord:
            query_vec = ctx.gateway.embed([case.input_text])[0]
            picks = top_k(index, query_vec, k)
            context = [rule_by_id[unit_id] for unit_id, _ in picks]
            return execute(case, context, plan.domain, "rule", ctx.gateway, method_id)

        records = _map_cases(run_case, ctx.cases, workers)
        scores = ctx.evaluate(records)
        ctx.persist_method(method_id, records, scores)
        ctx.row_extras[method_id] = {"k": k}

    def run_chunks_similarity() -> None:
        method_id = "chunks+similarity"
        k = plan.factorial_chunk_k
        index = build_index(chunk_units(chunks), "chunk", ctx.gateway)

        def run_case(case: TaskCase) -> ExecutionRecord:
            query_vec = ctx.gateway.embed([case.input_text])[0]
            picks = top_k(index, query_vec, k)
            context = [chunk_by_id[unit_id] for unit_id, _ in picks]
            return execute(case, context, plan.domain, "chunk", ctx.gateway, method_id)

        records = _map_cases(run_case, ctx.cases, workers)
        scores = ctx.evaluate(records)
        ctx.persist_method(method_id, records, scores)
        ctx.row_extras[method_id] = {"k": k}

    def run_chunks_applicability() -> None:
        method_id = "chunks+applicability"
        matcher_domain = "nba" if plan.domain == "nba" else "general"
        records: list[ExecutionRecord] = []
        matched_sets: list[MatchedSet] = []
        for case in ctx.cases:
            ms = match_all(
                case, list(chunks), "applicability_chunk", ctx.gateway, matcher_domain
            )
            matched_sets.append(ms)
            context = [chunk_by_id[unit_id] for unit_id in ms.unit_ids]
            records.append(
                execute(case, context, plan.domain, "chunk", ctx.gateway, method_id)
            )
        ctx.record_matches(method_id, matched_sets)
        scores = ctx.evaluate(records)
        ctx.persist_method(method_id, records, scores)

    cells = {
        "rules+applicability": run_rules_applicability,
        "rules+similarity": run_rules_similarity,
        "chunks+similarity": run_chunks_similarity,
        "chunks+applicability": run_chunks_applicability,
    }
    for cell in FACTORIAL_CELLS:
        ctx.run_isolated(cell, cells[cell])
    return ctx.finish()
