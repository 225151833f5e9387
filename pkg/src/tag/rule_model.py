"""Rule data model: provenance chain, persistence, and duplicate merging."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from .errors import IoError, ParseError, ValidationError

NORMATIVE_TYPES = frozenset(
    {"requirement", "prohibition", "recommendation", "permission", "exception", "conditional"}
)
RELATIONSHIP_KINDS = frozenset({"duplicate", "subsumption", "overlap", "conflict"})
PREFERRED_ACTIONS = frozenset({"merge", "keep_both", "manual_review"})

_SPAN_ID = re.compile(r"^S-\d+$")
_ATOMIC_ID = re.compile(r"^A-\d+$")
_RULE_ID = re.compile(r"^R-\d+$")


@dataclass(frozen=True)
class SourceSpan:
    span_id: str
    text: str
    normative_type: str
    context_summary: str = ""

    def __post_init__(self):
        if not _SPAN_ID.match(self.span_id):
            raise ValidationError(f"bad span_id {self.span_id!r}")
        if not self.text:
            raise ValidationError(f"span {self.span_id}: empty text")
        if self.normative_type not in NORMATIVE_TYPES:
            raise ValidationError(
                f"span {self.span_id}: unknown normative_type {self.normative_type!r}"
            )


@dataclass(frozen=True)
class AtomicUnit:
    atomic_id: str
    source_span_id: str
    text: str
    original_text: str
    was_split: bool = False
    split_rationale: str | None = None

    def __post_init__(self):
        if not _ATOMIC_ID.match(self.atomic_id):
            raise ValidationError(f"bad atomic_id {self.atomic_id!r}")
        if not self.text or not self.original_text:
            raise ValidationError(f"atomic {self.atomic_id}: empty text")
        if self.was_split and not self.split_rationale:
            raise ValidationError(f"atomic {self.atomic_id}: split without rationale")
        if not self.was_split and self.split_rationale is not None:
            raise ValidationError(f"atomic {self.atomic_id}: rationale without split")


@dataclass(frozen=True)
class Rule:
    rule_id: str
    source_atomic_id: str
    rule_name: str
    condition: str
    action: str
    source_text: str
    category_tags: tuple[str, ...]
    verified: bool = False
    merged_from: tuple[str, ...] = ()

    def __post_init__(self):
        if not _RULE_ID.match(self.rule_id):
            raise ValidationError(f"bad rule_id {self.rule_id!r}")
        for name in ("rule_name", "condition", "action", "source_text"):
            if not getattr(self, name):
                raise ValidationError(f"rule {self.rule_id}: empty {name}")
        if not 1 <= len(self.category_tags) <= 3:
            raise ValidationError(
                f"rule {self.rule_id}: needs 1-3 category_tags, got {len(self.category_tags)}"
            )
        if any(not tag for tag in self.category_tags):
            raise ValidationError(f"rule {self.rule_id}: empty category tag")


@dataclass(frozen=True)
class RuleRelationship:
    rule_i: str
    rule_j: str
    relationship: str
    preferred_action: str
    explanation: str = ""

    def __post_init__(self):
        if self.rule_i == self.rule_j:
            raise ValidationError(f"self-relationship on {self.rule_i}")
        if self.relationship not in RELATIONSHIP_KINDS:
            raise ValidationError(f"unknown relationship {self.relationship!r}")
        if self.preferred_action not in PREFERRED_ACTIONS:
            raise ValidationError(f"unknown preferred_action {self.preferred_action!r}")


@dataclass(frozen=True)
class VerificationReport:
    faithfulness: float
    coverage: float
    independence: float
    removed_rule_ids: tuple[str, ...] = ()
    uncovered_span_ids: tuple[str, ...] = ()
    flagged_name_collisions: tuple[tuple[str, str], ...] = ()
    conflict_count: int = 0
    coverage_after_exclusion: float = 1.0
    excluded_rule_ids: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("faithfulness", "coverage", "independence", "coverage_after_exclusion"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} out of [0,1]: {value}")


@dataclass(frozen=True)
class RuleSet:
    doc_id: str
    rules: tuple[Rule, ...]
    spans: tuple[SourceSpan, ...]
    atomics: tuple[AtomicUnit, ...]
    relationships: tuple[RuleRelationship, ...] = ()
    verification_report: VerificationReport | None = None

    def __post_init__(self):
        span_ids = {s.span_id for s in self.spans}
        if len(span_ids) != len(self.spans):
            raise ValidationError("duplicate span_id in ruleset")
        atomic_ids = {a.atomic_id for a in self.atomics}
        if len(atomic_ids) != len(self.atomics):
            raise ValidationError("duplicate atomic_id in ruleset")
        rule_ids = {r.rule_id for r in self.rules}
        if len(rule_ids) != len(self.rules):
            raise ValidationError("duplicate rule_id in ruleset")
        for atomic in self.atomics:
            if atomic.source_span_id not in span_ids:
                raise ValidationError(
                    f"atomic {atomic.atomic_id} cites unknown span {atomic.source_span_id}"
                )
        for rule in self.rules:
            if rule.source_atomic_id not in atomic_ids:
                raise ValidationError(
                    f"rule {rule.rule_id} cites unknown atomic {rule.source_atomic_id}"
                )
        seen_pairs: set[tuple[str, str]] = set()
        for rel in self.relationships:
            pair = tuple(sorted((rel.rule_i, rel.rule_j)))
            if pair in seen_pairs:
                raise ValidationError(f"relationship pair {pair} appears twice")
            seen_pairs.add(pair)

    def rule_by_id(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.rule_id == rule_id:
                return rule
        raise KeyError(rule_id)


def _span_to_obj(span: SourceSpan) -> dict:
    return {
        "span_id": span.span_id,
        "text": span.text,
        "normative_type": span.normative_type,
        "context_summary": span.context_summary,
    }


def _atomic_to_obj(atomic: AtomicUnit) -> dict:
    return {
        "atomic_id": atomic.atomic_id,
        "source_span_id": atomic.source_span_id,
        "text": atomic.text,
        "original_text": atomic.original_text,
        "was_split": atomic.was_split,
        "split_rationale": atomic.split_rationale,
    }


def _rule_to_obj(rule: Rule) -> dict:
    return {
        "rule_id": rule.rule_id,
        "source_atomic_id": rule.source_atomic_id,
        "rule_name": rule.rule_name,
        "condition": rule.condition,
        "action": rule.action,
        "source_text": rule.source_text,
        "category_tags": list(rule.category_tags),
        "verified": rule.verified,
        "merged_from": list(rule.merged_from),
    }


def _relationship_to_obj(rel: RuleRelationship) -> dict:
    return {
        "rule_i": rel.rule_i,
        "rule_j": rel.rule_j,
        "relationship": rel.relationship,
        "preferred_action": rel.preferred_action,
        "explanation": rel.explanation,
    }


def report_to_obj(report: VerificationReport) -> dict:
    return {
        "faithfulness": report.faithfulness,
        "coverage": report.coverage,
        "independence": report.independence,
        "removed_rule_ids": list(report.removed_rule_ids),
        "uncovered_span_ids": list(report.uncovered_span_ids),
        "flagged_name_collisions": [list(pair) for pair in report.flagged_name_collisions],
        "conflict_count": report.conflict_count,
        "coverage_after_exclusion": report.coverage_after_exclusion,
        "excluded_rule_ids": list(report.excluded_rule_ids),
    }


def report_from_obj(obj: dict) -> VerificationReport:
    return VerificationReport(
        faithfulness=float(obj["faithfulness"]),
        coverage=float(obj["coverage"]),
        independence=float(obj["independence"]),
        removed_rule_ids=tuple(obj.get("removed_rule_ids", ())),
        uncovered_span_ids=tuple(obj.get("uncovered_span_ids", ())),
        flagged_name_collisions=tuple(
            (pair[0], pair[1]) for pair in obj.get("flagged_name_collisions", ())
        ),
        conflict_count=int(obj.get("conflict_count", 0)),
        coverage_after_exclusion=float(obj.get("coverage_after_exclusion", 1.0)),
        excluded_rule_ids=tuple(obj.get("excluded_rule_ids", ())),
    )


def ruleset_to_obj(rs: RuleSet) -> dict:
    return {
        "doc_id": rs.doc_id,
        "spans": [_span_to_obj(s) for s in rs.spans],
        "atomics": [_atomic_to_obj(a) for a in rs.atomics],
        "rules": [_rule_to_obj(r) for r in rs.rules],
        "relationships": [_relationship_to_obj(rel) for rel in rs.relationships],
        "verification_report": (
            report_to_obj(rs.verification_report) if rs.verification_report else None
        ),
    }


def ruleset_from_obj(obj: dict) -> RuleSet:
    try:
        spans = tuple(
            SourceSpan(
                span_id=s["span_id"],
                text=s["text"],
                normative_type=s["normative_type"],
                context_summary=s.get("context_summary", ""),
            )
            for s in obj["spans"]
        )
        atomics = tuple(
            AtomicUnit(
                atomic_id=a["atomic_id"],
                source_span_id=a["source_span_id"],
                text=a["text"],
                original_text=a["original_text"],
                was_split=bool(a.get("was_split", False)),
                split_rationale=a.get("split_rationale"),
            )
            for a in obj["atomics"]
        )
        rules = tuple(
            Rule(
                rule_id=r["rule_id"],
                source_atomic_id=r["source_atomic_id"],
                rule_name=r["rule_name"],
                condition=r["condition"],
                action=r["action"],
                source_text=r["source_text"],
                category_tags=tuple(r["category_tags"]),
                verified=bool(r.get("verified", False)),
                merged_from=tuple(r.get("merged_from", ())),
            )
            for r in obj["rules"]
        )
        relationships = tuple(
            RuleRelationship(
                rule_i=rel["rule_i"],
                rule_j=rel["rule_j"],
                relationship=rel["relationship"],
                preferred_action=rel["preferred_action"],
                explanation=rel.get("explanation", ""),
            )
            for rel in obj.get("relationships", ())
        )
        report_obj = obj.get("verification_report")
        report = report_from_obj(report_obj) if report_obj else None
        return RuleSet(
            doc_id=obj["doc_id"],
            rules=rules,
            spans=spans,
            atomics=atomics,
            relationships=relationships,
            verification_report=report,
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed ruleset object: {exc}") from exc


def save_ruleset(rs: RuleSet, path: str) -> None:
    """Persist a ruleset as a single JSON document with stable key order."""
    if not rs.rules:
        raise ValidationError("refusing to save a ruleset with no rules")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(ruleset_to_obj(rs), fh, indent=2, ensure_ascii=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write ruleset {path!r}: {exc}") from exc


def load_ruleset(path: str) -> RuleSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read ruleset {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"ruleset {path!r} is not valid JSON: {exc}") from exc
    return ruleset_from_obj(obj)


def dedup_tags(tags: list[str]) -> tuple[str, ...]:
    """Case-insensitive dedup preserving first occurrence, capped at 3."""
    out: list[str] = []
    seen: set[str] = set()
    for tag in tags:
        key = tag.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(tag)
        if len(out) == 3:
            break
    return tuple(out)


def merge_duplicate_rules(
    rules: list[Rule], relationships: list[RuleRelationship]
) -> list[Rule]:
    """Merge duplicate-labelled rules; the smallest rule_id survives.

    Duplicate chains are closed with union-find. The survivor keeps its
    own condition/action/source_text; its tags become the capped union
    of the component's tags and the absorbed ids land in merged_from.
    """
    duplicate_pairs = [
        (rel.rule_i, rel.rule_j)
        for rel in relationships
        if rel.relationship == "duplicate"
    ]
    if not duplicate_pairs:
        return list(rules)

    parent: dict[str, str] = {}

    def find(x: str) -> str:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: str, b: str) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for a, b in duplicate_pairs:
        union(a, b)

    components: dict[str, list[str]] = {}
    for member in parent:
        components.setdefault(find(member), []).append(member)

    by_id = {rule.rule_id: rule for rule in rules}
    removed: set[str] = set()
    survivors: dict[str, Rule] = {}
    for members in components.values():
        present = sorted(m for m in members if m in by_id)
        if not present:
            continue
        survivor_id = present[0]
        survivor = by_id[survivor_id]
        absorbed = present[1:]
        tags = list(survivor.category_tags)
        merged_from = list(survivor.merged_from)
        for rule_id in absorbed:
            tags.extend(by_id[rule_id].category_tags)
            merged_from.append(rule_id)
            merged_from.extend(by_id[rule_id].merged_from)
            removed.add(rule_id)
        survivors[survivor_id] = replace(
            survivor,
            category_tags=dedup_tags(tags),
            merged_from=tuple(sorted(set(merged_from))),
        )

    out: list[Rule] = []
    for rule in rules:
        if rule.rule_id in removed:
            continue
        out.append(survivors.get(rule.rule_id, rule))
    return out


def merge_duplicates(rs: RuleSet) -> RuleSet:
    """Apply duplicate merging to a ruleset; identity when nothing is labelled."""
    merged = merge_duplicate_rules(list(rs.rules), list(rs.relationships))
    return replace(rs, rules=tuple(merged))
