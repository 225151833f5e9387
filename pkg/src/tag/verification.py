"""Programmatic ruleset verification: faithfulness, coverage, independence."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .corpus import Document
from .errors import LocationError
from .rule_model import AtomicUnit, Rule, RuleSet, SourceSpan, VerificationReport

logger = logging.getLogger(__name__)

FAITHFULNESS_TAU = 0.85
WINDOW_STRIDE = 50
WINDOW_SLACK = 50
COVERAGE_MIN_OVERLAP = 0.5


def _longest_match(
    a: str, alo: int, ahi: int, b: str, blo: int, bhi: int, b2j: dict[str, list[int]]
) -> tuple[int, int, int]:
    """Longest common substring of a[alo:ahi] and b[blo:bhi].

    Ties resolve to the smallest start in a, then the smallest start in
    b. Runs in O(segment product) worst case via the run-length table.
    """
    besti, bestj, bestsize = alo, blo, 0
    j2len: dict[int, int] = {}
    for i in range(alo, ahi):
        newj2len: dict[int, int] = {}
        for j in b2j.get(a[i], ()):
            if j < blo:
                continue
            if j >= bhi:
                break
            k = newj2len[j] = j2len.get(j - 1, 0) + 1
            if k > bestsize:
                besti, bestj, bestsize = i - k + 1, j - k + 1, k
        j2len = newj2len
    return besti, bestj, bestsize


def _total_matched(a: str, b: str) -> int:
    """Total characters matched by recursive longest-common-substring."""
    b2j: dict[str, list[int]] = {}
    for j, ch in enumerate(b):
        b2j.setdefault(ch, []).append(j)
    total = 0
    stack: list[tuple[int, int, int, int]] = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        if alo >= ahi or blo >= bhi:
            continue
        i, j, k = _longest_match(a, alo, ahi, b, blo, bhi, b2j)
        if k:
            total += k
            stack.append((alo, i, blo, j))
            stack.append((i + k, ahi, j + k, bhi))
    return total


def gestalt_ratio(a: str, b: str) -> float:
    """Ratcliff/Obershelp similarity: 2 * matched / (len(a) + len(b))."""
    if not a and not b:
        return 1.0
    return 2.0 * _total_matched(a, b) / (len(a) + len(b))


def _ratio_upper_bound(
    needle_counts: Counter, window_counts: Counter, needle_len: int, window_len: int
) -> float:
    """Multiset bound on gestalt_ratio; exact matching can never exceed it."""
    if needle_len + window_len == 0:
        return 1.0
    matches = sum(
        min(count, window_counts[ch]) for ch, count in needle_counts.items()
    )
    return 2.0 * matches / (needle_len + window_len)


def iter_windows(doc_len: int, needle_len: int, stride: int = WINDOW_STRIDE) -> Iterable[tuple[int, int]]:
    """Sliding [start, end) windows of length needle_len + slack.

    Starts at 0, stride, 2*stride, ...; the final windows are truncated
    at the document end so the union covers [0, doc_len).
    """
    window_len = needle_len + WINDOW_SLACK
    for start in range(0, doc_len, stride):
        yield start, min(start + window_len, doc_len)


class _WindowScan:
    """Iterates stride windows keeping character counts incrementally."""

    def __init__(self, text: str, needle: str, stride: int = WINDOW_STRIDE):
        self.text = text
        self.needle = needle
        self.stride = stride
        self.needle_counts = Counter(needle)

    def __iter__(self):
        text, stride = self.text, self.stride
        counts: Counter = Counter()
        prev_start, prev_end = 0, 0
        for start, end in iter_windows(len(text), len(self.needle), stride):
            counts.subtract(text[prev_start:start])
            for ch in text[prev_end:end]:
                counts[ch] += 1
            prev_start, prev_end = start, end
            bound = _ratio_upper_bound(
                self.needle_counts, counts, len(self.needle), end - start
            )
            yield start, end, bound


def best_window(text: str, needle: str, stride: int = WINDOW_STRIDE) -> tuple[int, int, float]:
    """Highest-scoring window for needle; score ties keep the smallest start.

    Windows are visited in ascending start order and skipped whenever
    the multiset bound cannot beat the best ratio found so far, so the
    argmax is exact.
    """
    best = (-1, -1, -1.0)
    for start, end, bound in _WindowScan(text, needle, stride):
        if bound <= best[2]:
            continue
        ratio = gestalt_ratio(needle, text[start:end])
        if ratio > best[2]:
            best = (start, end, ratio)
    return best


def _exceeds_tau(text: str, needle: str, tau: float, stride: int = WINDOW_STRIDE) -> bool:
    """True iff some window's gestalt ratio strictly exceeds tau."""
    for start, end, bound in _WindowScan(text, needle, stride):
        if bound <= tau:
            continue
        if gestalt_ratio(needle, text[start:end]) > tau:
            return True
    return False


@dataclass(frozen=True)
class FaithfulnessResult:
    fraction: float
    removed_rule_ids: tuple[str, ...]
    match_kinds: dict[str, str]  # rule_id -> "exact" | "fuzzy"


@dataclass(frozen=True)
class CoverageResult:
    fraction: float
    uncovered_span_ids: tuple[str, ...]
    unlocatable_span_ids: tuple[str, ...]
    span_intervals: dict[str, tuple[int, int]]


@dataclass(frozen=True)
class IndependenceResult:
    fraction: float
    flagged_pairs: tuple[tuple[str, str], ...]


def check_faithfulness(
    rs: RuleSet, doc: Document, tau: float = FAITHFULNESS_TAU
) -> tuple[RuleSet, FaithfulnessResult]:
    """Remove rules whose source_text cannot be matched to the document.

    Exact substrings are accepted without a window search; otherwise the
    best sliding-window gestalt ratio must strictly exceed tau.
    """
    kinds: dict[str, str] = {}
    removed: list[str] = []
    kept: list[Rule] = []
    for rule in rs.rules:
        if rule.source_text in doc.text:
            kinds[rule.rule_id] = "exact"
            kept.append(rule)
        elif _exceeds_tau(doc.text, rule.source_text, tau):
            kinds[rule.rule_id] = "fuzzy"
            kept.append(rule)
        else:
            removed.append(rule.rule_id)
            logger.warning("rule %s removed: source not grounded in document", rule.rule_id)
    total = len(rs.rules)
    fraction = len(kept) / total if total else 1.0
    result = FaithfulnessResult(
        fraction=fraction, removed_rule_ids=tuple(removed), match_kinds=kinds
    )
    return replace(rs, rules=tuple(kept)), result


def locate(text: str, needle: str, tau: float = FAITHFULNESS_TAU) -> tuple[int, int]:
    """Character interval of needle in text: exact search, then fuzzy window."""
    index = text.find(needle)
    if index != -1:
        return index, index + len(needle)
    start, end, ratio = best_window(text, needle, WINDOW_STRIDE)
    if ratio > tau:
        return start, end
    raise LocationError(
        f"fragment not locatable (best window ratio {ratio:.3f} <= {tau})"
    )


def _overlap(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(0, min(a[1], b[1]) - max(a[0], b[0]))


def check_coverage(
    rs: RuleSet,
    doc: Document,
    min_overlap: float = COVERAGE_MIN_OVERLAP,
    tau: float = FAITHFULNESS_TAU,
) -> CoverageResult:
    """A span is covered iff a surviving rule's located source interval
    overlaps the span's interval by at least min_overlap of its length."""
    rule_intervals: list[tuple[int, int]] = []
    for rule in rs.rules:
        try:
            rule_intervals.append(locate(doc.text, rule.source_text, tau))
        except LocationError:
            logger.warning("rule %s source not locatable; skipped for coverage", rule.rule_id)
    span_intervals: dict[str, tuple[int, int]] = {}
    uncovered: list[str] = []
    unlocatable: list[str] = []
    covered = 0
    for span in rs.spans:
        try:
            interval = locate(doc.text, span.text, tau)
        except LocationError:
            unlocatable.append(span.span_id)
            uncovered.append(span.span_id)
            continue
        span_intervals[span.span_id] = interval
        need = min_overlap * (interval[1] - interval[0])
        if any(_overlap(interval, ri) >= need for ri in rule_intervals):
            covered += 1
        else:
            uncovered.append(span.span_id)
    fraction = covered / len(rs.spans) if rs.spans else 1.0
    return CoverageResult(
        fraction=fraction,
        uncovered_span_ids=tuple(uncovered),
        unlocatable_span_ids=tuple(unlocatable),
        span_intervals=span_intervals,
    )


def check_independence(rs: RuleSet) -> IndependenceResult:
    """Unique-name ratio; collisions are flagged, never removed."""
    names = [rule.rule_name.strip() for rule in rs.rules]
    if not names:
        return IndependenceResult(fraction=1.0, flagged_pairs=())
    by_name: dict[str, list[str]] = {}
    for rule in rs.rules:
        by_name.setdefault(rule.rule_name.strip(), []).append(rule.rule_id)
    flagged: list[tuple[str, str]] = []
    for ids in by_name.values():
        ids = sorted(ids)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                flagged.append((ids[i], ids[j]))
    fraction = len(by_name) / len(names)
    return IndependenceResult(fraction=fraction, flagged_pairs=tuple(sorted(flagged)))


ReextractFn = Callable[
    [list[SourceSpan]], tuple[list[Rule], list[AtomicUnit]]
]


def verify(
    rs: RuleSet,
    doc: Document,
    reextract: ReextractFn | None = None,
    tau: float = FAITHFULNESS_TAU,
    min_overlap: float = COVERAGE_MIN_OVERLAP,
) -> RuleSet:
    """Run the full programmatic verification pass.

    Faithfulness removals happen first; coverage is then computed over
    survivors. Uncovered spans get one re-extraction round when a
    callback is supplied, and spans still uncovered afterwards are
    dropped from the ruleset (cascading to their dependent atomics and
    rules so provenance stays total). Independence is computed last and
    the surviving rules are flagged verified.
    """
    rs_faithful, faith = check_faithfulness(rs, doc, tau)
    total_checked = len(rs.rules)
    removed_ids = list(faith.removed_rule_ids)
    coverage = check_coverage(rs_faithful, doc, min_overlap, tau)
    coverage_pre = coverage.fraction

    current = rs_faithful
    if coverage.uncovered_span_ids and reextract is not None:
        span_by_id = {span.span_id: span for span in current.spans}
        targets = [span_by_id[sid] for sid in coverage.uncovered_span_ids if sid in span_by_id]
        new_rules, new_atomics = reextract(targets)
        if new_rules:
            candidate = replace(
                current,
                rules=current.rules + tuple(new_rules),
                atomics=current.atomics + tuple(new_atomics),
            )
            current, refaith = check_faithfulness(candidate, doc, tau)
            total_checked += len(new_rules)
            removed_ids.extend(refaith.removed_rule_ids)
        coverage = check_coverage(current, doc, min_overlap, tau)
        # Pre-exclusion coverage reflects the post-reextraction state.
        coverage_pre = coverage.fraction

    faithfulness_fraction = (
        (total_checked - len(removed_ids)) / total_checked if total_checked else 1.0
    )

    excluded_spans = set(coverage.uncovered_span_ids)
    excluded_rules: list[str] = []
    if excluded_spans:
        for span_id in sorted(excluded_spans):
            logger.warning("span %s still uncovered; excluded from final rule set", span_id)
        kept_spans = tuple(s for s in current.spans if s.span_id not in excluded_spans)
        dropped_atomics = {
            a.atomic_id for a in current.atomics if a.source_span_id in excluded_spans
        }
        kept_atomics = tuple(
            a for a in current.atomics if a.atomic_id not in dropped_atomics
        )
        excluded_rules = [
            r.rule_id for r in current.rules if r.source_atomic_id in dropped_atomics
        ]
        kept_rules = tuple(
            r for r in current.rules if r.source_atomic_id not in dropped_atomics
        )
        current = RuleSet(
            doc_id=current.doc_id,
            rules=kept_rules,
            spans=kept_spans,
            atomics=kept_atomics,
            relationships=current.relationships,
            verification_report=None,
        )

    post = check_coverage(current, doc, min_overlap, tau)
    independence = check_independence(current)
    surviving_ids = {r.rule_id for r in current.rules}
    conflict_count = sum(
        1
        for rel in current.relationships
        if rel.relationship == "conflict"
        and rel.rule_i in surviving_ids
        and rel.rule_j in surviving_ids
    )
    report = VerificationReport(
        faithfulness=faithfulness_fraction,
        coverage=coverage_pre,
        independence=independence.fraction,
        removed_rule_ids=tuple(removed_ids),
        uncovered_span_ids=coverage.uncovered_span_ids,
        flagged_name_collisions=independence.flagged_pairs,
        conflict_count=conflict_count,
        coverage_after_exclusion=post.fraction,
        excluded_rule_ids=tuple(excluded_rules),
    )
    verified_rules = tuple(replace(r, verified=True) for r in current.rules)
    return replace(current, rules=verified_rules, verification_report=report)
