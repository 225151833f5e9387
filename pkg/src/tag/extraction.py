"""Four-phase rule extraction: spans, atomic units, rules, deduplication."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Sequence

from .corpus import Document
from .errors import EmptyInputError, InvalidParams, SchemaError
from .llm_gateway import ChatRequest, Gateway
from .prompts import render_template
from .rule_model import (
    NORMATIVE_TYPES,
    PREFERRED_ACTIONS,
    RELATIONSHIP_KINDS,
    AtomicUnit,
    Rule,
    RuleRelationship,
    RuleSet,
    SourceSpan,
    dedup_tags,
    merge_duplicate_rules,
)

logger = logging.getLogger(__name__)

ALL_PHASES = frozenset({1, 2, 3, 4})

LogFn = Callable[[dict], None]


@dataclass(frozen=True)
class ExtractionConfig:
    section_char_limit: int = 8000
    atomic_batch_size: int = 20
    rule_batch_size: int = 20
    pair_batch_size: int = 10
    phase_toggles: frozenset = ALL_PHASES

    def __post_init__(self):
        for name in ("section_char_limit", "atomic_batch_size", "rule_batch_size", "pair_batch_size"):
            if getattr(self, name) <= 0:
                raise InvalidParams(f"{name} must be positive")
        toggles = frozenset(self.phase_toggles)
        if not toggles <= ALL_PHASES:
            raise InvalidParams(f"phase_toggles must be a subset of {sorted(ALL_PHASES)}")
        object.__setattr__(self, "phase_toggles", toggles)


def sections_of(text: str, limit: int) -> list[str]:
    """Split text into sections of at most `limit` chars at paragraph breaks.

    The cut lands on the last blank line below the limit; a hard cut at
    the limit is the fallback when a section has no paragraph break.
    """
    out: list[str] = []
    start = 0
    n = len(text)
    while n - start > limit:
        cut = text.rfind("\n\n", start + 1, start + limit)
        if cut <= start:
            cut = start + limit
        out.append(text[start:cut])
        start = cut
    out.append(text[start:])
    return out


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if not text.startswith("```"):
        return text
    lines = text.split("\n")[1:]
    if lines and lines[-1].strip().startswith("```"):
        lines = lines[:-1]
    return "\n".join(lines).strip()


def _parse_json_array(raw: str) -> list:
    try:
        data = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError("response is not a JSON array")
    return data


def _json_array_call(
    gateway: Gateway, system: str, user: str, request_tag: str
) -> tuple[list, bool]:
    """One prompted call expecting a JSON array, with one bounded repair."""
    model = gateway.config.model_id
    raw = gateway.complete(
        ChatRequest(model_id=model, system_message=system, user_message=user, request_tag=request_tag)
    )
    try:
        return _parse_json_array(raw), False
    except SchemaError as err:
        repair_user = (
            user
            + "\n\nYour previous response could not be used: "
            + str(err)
            + "\nPrevious response (truncated):\n"
            + raw[:1000]
            + "\n\nReturn only the corrected JSON array."
        )
        raw_repaired = gateway.complete(
            ChatRequest(
                model_id=model,
                system_message=system,
                user_message=repair_user,
                request_tag=request_tag,
            )
        )
        try:
            return _parse_json_array(raw_repaired), True
        except SchemaError as err_repaired:
            raise SchemaError(
                f"{request_tag}: output still malformed after one repair: {err_repaired}"
            ) from err_repaired


def _map_ordered(fn, items: Sequence, parallelism: int) -> list:
    """Apply fn to items, possibly concurrently, preserving input order."""
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def _batches(seq: Sequence, size: int) -> list:
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def _emit(log: LogFn | None, record: dict) -> None:
    for warning in record.get("warnings", ()):
        logger.warning("%s: %s", record.get("phase"), warning)
    if log is not None:
        log(record)


def phase1_detect_spans(
    doc: Document, cfg: ExtractionConfig, gateway: Gateway, log: LogFn | None = None
) -> list[SourceSpan]:
    """Detect normative spans section by section; ids assigned afterwards."""
    domain = doc.domain_label or "general"
    system = render_template("phase1_system", domain=domain)
    sections = sections_of(doc.text, cfg.section_char_limit)

    def call(section: str) -> list[tuple[str, str, str]]:
        user = render_template("phase1_user", doc=section, start_id=1)
        items, repaired = _json_array_call(gateway, system, user, "phase1")
        kept: list[tuple[str, str, str]] = []
        warnings: list[str] = []
        for item in items:
            if not isinstance(item, dict):
                warnings.append("span item is not an object; dropped")
                continue
            text = item.get("text")
            if not isinstance(text, str) or not text:
                warnings.append("span with missing text dropped")
                continue
            ntype = item.get("normative_type")
            if ntype not in NORMATIVE_TYPES:
                warnings.append(f"span with unknown normative_type {ntype!r} dropped")
                continue
            if text not in section:
                warnings.append("span text is not an exact substring of its section; dropped")
                continue
            summary = item.get("context_summary")
            kept.append((text, ntype, summary if isinstance(summary, str) else ""))
        _emit(
            log,
            {
                "phase": "phase1",
                "request_tag": "phase1",
                "repaired": repaired,
                "items": len(items),
                "kept": len(kept),
                "warnings": warnings,
            },
        )
        return kept

    results = _map_ordered(call, sections, gateway.config.max_parallel_requests)
    spans: list[SourceSpan] = []
    for kept in results:
        for text, ntype, summary in kept:
            spans.append(
                SourceSpan(
                    span_id=f"S-{len(spans) + 1:03d}",
                    text=text,
                    normative_type=ntype,
                    context_summary=summary,
                )
            )
    return spans


def phase2_decompose(
    spans: list[SourceSpan],
    cfg: ExtractionConfig,
    gateway: Gateway,
    domain: str,
    log: LogFn | None = None,
    start_index: int = 1,
) -> list[AtomicUnit]:
    """Decompose spans into atomic units, one condition-action relation each."""
    if not spans:
        raise EmptyInputError("phase 2 requires at least one span")
    span_by_id = {span.span_id: span for span in spans}
    system = render_template("phase2_system", domain=domain)

    def call(batch: list[SourceSpan]) -> list[tuple[str, str, str, bool, str | None]]:
        payload = json.dumps(
            [
                {
                    "span_id": s.span_id,
                    "text": s.text,
                    "normative_type": s.normative_type,
                    "context_summary": s.context_summary,
                }
                for s in batch
            ],
            indent=2,
            ensure_ascii=False,
        )
        user = render_template("phase2_user", spans=payload)
        items, repaired = _json_array_call(gateway, system, user, "phase2")
        kept: list[tuple[str, str, str, bool, str | None]] = []
        warnings: list[str] = []
        for item in items:
            if not isinstance(item, dict):
                warnings.append("atomic item is not an object; dropped")
                continue
            span_id = item.get("source_span_id")
            span = span_by_id.get(span_id)
            if span is None:
                warnings.append(f"atomic cites unknown span {span_id!r}; dropped")
                continue
            text = item.get("text")
            if not isinstance(text, str) or not text:
                warnings.append("atomic with empty text dropped")
                continue
            was_split = bool(item.get("was_split", False))
            rationale = item.get("split_rationale")
            if not isinstance(rationale, str) or not rationale:
                rationale = None
            if was_split and rationale is None:
                warnings.append("split atomic without rationale dropped")
                continue
            if not was_split:
                rationale = None
            if item.get("original_text") != span.text:
                warnings.append(f"atomic original_text reset to span {span_id} text")
            kept.append((span_id, text, span.text, was_split, rationale))
        _emit(
            log,
            {
                "phase": "phase2",
                "request_tag": "phase2",
                "repaired": repaired,
                "items": len(items),
                "kept": len(kept),
                "warnings": warnings,
            },
        )
        return kept

    batches = _batches(list(spans), cfg.atomic_batch_size)
    results = _map_ordered(call, batches, gateway.config.max_parallel_requests)
    atomics: list[AtomicUnit] = []
    index = start_index
    for kept in results:
        for span_id, text, original, was_split, rationale in kept:
            atomics.append(
                AtomicUnit(
                    atomic_id=f"A-{index:03d}",
                    source_span_id=span_id,
                    text=text,
                    original_text=original,
                    was_split=was_split,
                    split_rationale=rationale,
                )
            )
            index += 1
    return atomics


def phase3_operationalize(
    atomics: list[AtomicUnit],
    cfg: ExtractionConfig,
    gateway: Gateway,
    domain: str,
    log: LogFn | None = None,
    start_index: int = 1,
) -> list[Rule]:
    """Turn atomic units into rules with judgeable conditions and actions."""
    if not atomics:
        raise EmptyInputError("phase 3 requires at least one atomic unit")
    atomic_by_id = {a.atomic_id: a for a in atomics}
    system = render_template("phase3_system", domain=domain)

    def call(batch: list[AtomicUnit]) -> list[tuple[str, str, str, str, str, tuple[str, ...]]]:
        payload = json.dumps(
            [
                {
                    "atomic_id": a.atomic_id,
                    "source_span_id": a.source_span_id,
                    "text": a.text,
                    "original_text": a.original_text,
                    "was_split": a.was_split,
                    "split_rationale": a.split_rationale,
                }
                for a in batch
            ],
            indent=2,
            ensure_ascii=False,
        )
        user = render_template("phase3_user", atomics=payload)
        items, repaired = _json_array_call(gateway, system, user, "phase3")
        kept: list[tuple[str, str, str, str, str, tuple[str, ...]]] = []
        warnings: list[str] = []
        for item in items:
            if not isinstance(item, dict):
                warnings.append("rule item is not an object; dropped")
                continue
            atomic_id = item.get("source_atomic_id")
            atomic = atomic_by_id.get(atomic_id)
            if atomic is None:
                warnings.append(f"rule cites unknown atomic {atomic_id!r}; dropped")
                continue
            fields = {}
            ok = True
            for name in ("rule_name", "condition", "action"):
                value = item.get(name)
                if not isinstance(value, str) or not value.strip():
                    warnings.append(f"rule with empty {name} dropped")
                    ok = False
                    break
                fields[name] = value.strip()
            if not ok:
                continue
            raw_tags = item.get("category_tags")
            if not isinstance(raw_tags, list):
                warnings.append("rule without category_tags dropped")
                continue
            tags = dedup_tags([t for t in raw_tags if isinstance(t, str)])
            if not tags:
                warnings.append("rule with no usable category_tags dropped")
                continue
            if item.get("source_text") != atomic.original_text:
                warnings.append(f"rule source_text reset to atomic {atomic_id} source")
            kept.append(
                (
                    atomic_id,
                    fields["rule_name"],
                    fields["condition"],
                    fields["action"],
                    atomic.original_text,
                    tags,
                )
            )
        _emit(
            log,
            {
                "phase": "phase3",
                "request_tag": "phase3",
                "repaired": repaired,
                "items": len(items),
                "kept": len(kept),
                "warnings": warnings,
            },
        )
        return kept

    batches = _batches(list(atomics), cfg.rule_batch_size)
    results = _map_ordered(call, batches, gateway.config.max_parallel_requests)
    rules: list[Rule] = []
    index = start_index
    for kept in results:
        for atomic_id, name, condition, action, source_text, tags in kept:
            rules.append(
                Rule(
                    rule_id=f"R-{index:03d}",
                    source_atomic_id=atomic_id,
                    rule_name=name,
                    condition=condition,
                    action=action,
                    source_text=source_text,
                    category_tags=tags,
                )
            )
            index += 1
    return rules


def tag_sharing_pairs(rules: Sequence[Rule]) -> list[tuple[Rule, Rule]]:
    """Unordered rule pairs sharing at least one tag, smaller rule_id first."""

    def normalized(rule: Rule) -> set[str]:
        return {tag.strip().lower() for tag in rule.category_tags}

    ordered = sorted(rules, key=lambda rule: rule.rule_id)
    tags = {rule.rule_id: normalized(rule) for rule in ordered}
    return [
        (a, b)
        for a, b in combinations(ordered, 2)
        if tags[a.rule_id] & tags[b.rule_id]
    ]


def phase4_deduplicate(
    rules: list[Rule],
    cfg: ExtractionConfig,
    gateway: Gateway,
    domain: str,
    log: LogFn | None = None,
) -> tuple[list[Rule], list[RuleRelationship]]:
    """Judge tag-sharing pairs for redundancy and merge duplicates."""
    pairs = tag_sharing_pairs(rules)
    if not pairs:
        _emit(
            log,
            {"phase": "phase4", "request_tag": "phase4", "pairs": 0, "calls": 0, "warnings": []},
        )
        return list(rules), []
    candidate = {(a.rule_id, b.rule_id) for a, b in pairs}
    system = render_template("phase4_system", domain=domain)

    def rule_obj(rule: Rule) -> dict:
        return {
            "rule_id": rule.rule_id,
            "rule_name": rule.rule_name,
            "condition": rule.condition,
            "action": rule.action,
            "category_tags": list(rule.category_tags),
        }

    def call(batch: list[tuple[Rule, Rule]]) -> list[RuleRelationship]:
        payload = json.dumps(
            [{"rule_i": rule_obj(a), "rule_j": rule_obj(b)} for a, b in batch],
            indent=2,
            ensure_ascii=False,
        )
        user = render_template("phase4_user", rules=payload)
        items, repaired = _json_array_call(gateway, system, user, "phase4")
        kept: list[RuleRelationship] = []
        warnings: list[str] = []
        for item in items:
            if not isinstance(item, dict):
                warnings.append("relationship item is not an object; dropped")
                continue
            rule_i, rule_j = item.get("rule_i"), item.get("rule_j")
            if not isinstance(rule_i, str) or not isinstance(rule_j, str):
                warnings.append("relationship with missing rule ids dropped")
                continue
            low, high = sorted((rule_i, rule_j))
            if (low, high) not in candidate:
                warnings.append(f"relationship on unjudged pair ({rule_i}, {rule_j}) dropped")
                continue
            relationship = item.get("relationship")
            if relationship == "independent":
                warnings.append(f"independent pair ({low}, {high}) reported; ignored")
                continue
            if relationship not in RELATIONSHIP_KINDS:
                warnings.append(f"unknown relationship {relationship!r} dropped")
                continue
            action = item.get("preferred_action")
            if action not in PREFERRED_ACTIONS:
                warnings.append(f"unknown preferred_action {action!r} dropped")
                continue
            explanation = item.get("explanation")
            kept.append(
                RuleRelationship(
                    rule_i=low,
                    rule_j=high,
                    relationship=relationship,
                    preferred_action=action,
                    explanation=explanation if isinstance(explanation, str) else "",
                )
            )
        _emit(
            log,
            {
                "phase": "phase4",
                "request_tag": "phase4",
                "repaired": repaired,
                "pairs": len(batch),
                "items": len(items),
                "kept": len(kept),
                "warnings": warnings,
            },
        )
        return kept

    batches = _batches(pairs, cfg.pair_batch_size)
    results = _map_ordered(call, batches, gateway.config.max_parallel_requests)
    relationships: list[RuleRelationship] = []
    seen: set[tuple[str, str]] = set()
    for kept in results:
        for rel in kept:
            pair = (rel.rule_i, rel.rule_j)
            if pair in seen:
                continue
            seen.add(pair)
            relationships.append(rel)
    merged = merge_duplicate_rules(list(rules), relationships)
    return merged, relationships


def _bypass_rule(unit: AtomicUnit, index: int) -> Rule:
    """Phase-3 bypass: the unit text stands in for condition and action."""
    words = unit.text.split()
    name = " ".join(words[:8]) if words else unit.text
    return Rule(
        rule_id=f"R-{index:03d}",
        source_atomic_id=unit.atomic_id,
        rule_name=name,
        condition=unit.text,
        action=unit.text,
        source_text=unit.original_text,
        category_tags=("untyped",),
    )


def run_extraction(
    doc: Document, cfg: ExtractionConfig, gateway: Gateway, log: LogFn | None = None
) -> RuleSet:
    """Run enabled phases in order; disabled phases use pass-through stand-ins."""
    domain = doc.domain_label or "general"
    if 1 in cfg.phase_toggles:
        spans = phase1_detect_spans(doc, cfg, gateway, log)
    else:
        spans = [
            SourceSpan(
                span_id=f"S-{i + 1:03d}",
                text=section,
                normative_type="requirement",
                context_summary="",
            )
            for i, section in enumerate(sections_of(doc.text, cfg.section_char_limit))
        ]
    if not spans:
        return RuleSet(doc_id=doc.doc_id, rules=(), spans=(), atomics=())

    if 2 in cfg.phase_toggles:
        atomics = phase2_decompose(spans, cfg, gateway, domain, log)
    else:
        atomics = [
            AtomicUnit(
                atomic_id=f"A-{i + 1:03d}",
                source_span_id=span.span_id,
                text=span.text,
                original_text=span.text,
            )
            for i, span in enumerate(spans)
        ]
    if not atomics:
        return RuleSet(doc_id=doc.doc_id, rules=(), spans=tuple(spans), atomics=())

    if 3 in cfg.phase_toggles:
        rules = phase3_operationalize(atomics, cfg, gateway, domain, log)
    else:
        rules = [_bypass_rule(unit, i + 1) for i, unit in enumerate(atomics)]
    if not rules:
        return RuleSet(
            doc_id=doc.doc_id, rules=(), spans=tuple(spans), atomics=tuple(atomics)
        )

    relationships: list[RuleRelationship] = []
    if 4 in cfg.phase_toggles:
        rules, relationships = phase4_deduplicate(rules, cfg, gateway, domain, log)

    return RuleSet(
        doc_id=doc.doc_id,
        rules=tuple(rules),
        spans=tuple(spans),
        atomics=tuple(atomics),
        relationships=tuple(relationships),
    )


def _max_index(ids: Iterable[str]) -> int:
    best = 0
    for item_id in ids:
        try:
            best = max(best, int(item_id.split("-", 1)[1]))
        except (IndexError, ValueError):
            continue
    return best


def reextract_rules(
    spans: list[SourceSpan],
    cfg: ExtractionConfig,
    gateway: Gateway,
    domain: str,
    start_atomic: int,
    start_rule: int,
    log: LogFn | None = None,
) -> tuple[list[Rule], list[AtomicUnit]]:
    """Re-run operationalization over uncovered spans, continuing id numbering."""
    if not spans:
        return [], []
    atomics = [
        AtomicUnit(
            atomic_id=f"A-{start_atomic + i:03d}",
            source_span_id=span.span_id,
            text=span.text,
            original_text=span.text,
        )
        for i, span in enumerate(spans)
    ]
    if 3 in cfg.phase_toggles:
        rules = phase3_operationalize(
            atomics, cfg, gateway, domain, log, start_index=start_rule
        )
    else:
        rules = [_bypass_rule(unit, start_rule + i) for i, unit in enumerate(atomics)]
    return rules, atomics


def make_reextractor(
    rs: RuleSet,
    cfg: ExtractionConfig,
    gateway: Gateway,
    domain: str,
    log: LogFn | None = None,
):
    """Bind a single-shot re-extraction callback for verification."""
    start_atomic = _max_index(a.atomic_id for a in rs.atomics) + 1
    start_rule = _max_index(r.rule_id for r in rs.rules) + 1

    def callback(spans: list[SourceSpan]) -> tuple[list[Rule], list[AtomicUnit]]:
        return reextract_rules(
            spans, cfg, gateway, domain, start_atomic, start_rule, log
        )

    return callback
