from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_best_window, difflib_gestalt, naive_gestalt
from tag.corpus import Document
from tag.errors import LocationError
from tag.rule_model import AtomicUnit, Rule, RuleRelationship, RuleSet, SourceSpan
from tag.verification import (
    COVERAGE_MIN_OVERLAP,
    FAITHFULNESS_TAU,
    WINDOW_SLACK,
    WINDOW_STRIDE,
    _exceeds_tau,
    _ratio_upper_bound,
    best_window,
    check_coverage,
    check_faithfulness,
    check_independence,
    gestalt_ratio,
    iter_windows,
    locate,
    verify,
)


def test_pinned_constants():
    assert FAITHFULNESS_TAU == 0.85
    assert WINDOW_STRIDE == 50
    assert WINDOW_SLACK == 50
    assert COVERAGE_MIN_OVERLAP == 0.5


class TestGestaltRatio:
    def test_identical(self):
        assert gestalt_ratio("abc", "abc") == 1.0

    def test_both_empty(self):
        assert gestalt_ratio("", "") == 1.0

    def test_one_empty(self):
        assert gestalt_ratio("abc", "") == 0.0
        assert gestalt_ratio("", "abc") == 0.0

    def test_disjoint(self):
        assert gestalt_ratio("aaa", "bbb") == 0.0

    def test_known_value(self):
        # Longest block "bcd" (3), recursion adds nothing: 2*3/8.
        assert gestalt_ratio("abcd", "bcde") == 0.75

    def test_recursion_counts_side_blocks(self):
        # "ab" + "ef" match around the unmatched middle: 2*4/9.
        assert gestalt_ratio("abxef", "abyyef") == pytest.approx(8 / 11)
        assert gestalt_ratio("abxef", "abyyef") == difflib_gestalt("abxef", "abyyef")

    @settings(max_examples=300)
    @given(st.text(alphabet="ab", max_size=12), st.text(alphabet="ab", max_size=12))
    def test_matches_difflib_small_alphabet(self, a, b):
        assert gestalt_ratio(a, b) == difflib_gestalt(a, b)

    @settings(max_examples=200)
    @given(st.text(max_size=40), st.text(max_size=40))
    def test_matches_difflib_general_text(self, a, b):
        assert gestalt_ratio(a, b) == difflib_gestalt(a, b)

    @settings(max_examples=150)
    @given(st.text(alphabet="abc", max_size=8), st.text(alphabet="abc", max_size=8))
    def test_matches_naive_recursive_oracle(self, a, b):
        assert gestalt_ratio(a, b) == naive_gestalt(a, b)


class TestRatioUpperBound:
    def test_equal_multisets_bound_is_one(self):
        assert _ratio_upper_bound(Counter("abc"), Counter("cba"), 3, 3) == 1.0

    def test_empty_inputs(self):
        assert _ratio_upper_bound(Counter(), Counter(), 0, 0) == 1.0

    @settings(max_examples=300)
    @given(st.text(alphabet="abcd", max_size=20), st.text(alphabet="abcd", max_size=30))
    def test_bound_dominates_ratio(self, needle, window):
        bound = _ratio_upper_bound(
            Counter(needle), Counter(window), len(needle), len(window)
        )
        assert bound >= gestalt_ratio(needle, window) - 1e-12


class TestIterWindows:
    def test_stride_and_truncation(self):
        windows = list(iter_windows(doc_len=120, needle_len=30))
        assert windows == [(0, 80), (50, 120), (100, 120)]

    def test_short_document_single_window(self):
        assert list(iter_windows(doc_len=40, needle_len=100)) == [(0, 40)]

    def test_custom_stride(self):
        windows = list(iter_windows(doc_len=25, needle_len=5, stride=10))
        assert windows == [(0, 25), (10, 25), (20, 25)]

    @settings(max_examples=100)
    @given(
        doc_len=st.integers(min_value=1, max_value=1000),
        needle_len=st.integers(min_value=1, max_value=300),
    )
    def test_union_covers_document(self, doc_len, needle_len):
        windows = list(iter_windows(doc_len, needle_len))
        assert windows[0][0] == 0
        assert windows[-1][1] == doc_len
        for start, end in windows:
            assert end - start <= needle_len + WINDOW_SLACK
            assert start % WINDOW_STRIDE == 0


class TestBestWindow:
    def test_exact_needle_found(self):
        # The needle at offset 50 sits whole inside windows (0, 64) and
        # (50, 114); both match it fully, so the tie keeps start 0.
        text = "x" * 50 + "needle-payload" + "y" * 50
        start, end, ratio = best_window(text, "needle-payload")
        assert (start, end) == (0, 64)
        assert ratio == pytest.approx(2 * 14 / (14 + 64))
        assert (start, end, ratio) == brute_best_window(
            text, "needle-payload", WINDOW_STRIDE, WINDOW_SLACK
        )

    def test_needle_longer_than_text(self):
        assert best_window("abc", "abcdef") == (0, 3, gestalt_ratio("abcdef", "abc"))

    def test_tie_keeps_smallest_start(self):
        # Windows (0, 52) and (50, 102) score identically; the dangling
        # (100, 102) window scores zero. Smallest start must win.
        text = "ab" + "x" * 48 + "ab" + "x" * 48 + "xx"
        result = best_window(text, "ab")
        assert result[:2] == (0, 52)
        assert result == brute_best_window(text, "ab", WINDOW_STRIDE, WINDOW_SLACK)

    @settings(max_examples=150, deadline=None)
    @given(
        text=st.text(alphabet="abcdxyz ", min_size=1, max_size=400),
        needle=st.text(alphabet="abcd ", min_size=1, max_size=80),
    )
    def test_matches_exhaustive_oracle(self, text, needle):
        assert best_window(text, needle) == brute_best_window(
            text, needle, WINDOW_STRIDE, WINDOW_SLACK
        )

    @settings(max_examples=100, deadline=None)
    @given(
        text=st.text(alphabet="abcdxyz", min_size=1, max_size=300),
        needle=st.text(alphabet="abcd", min_size=1, max_size=60),
        tau=st.sampled_from([0.3, 0.5, 0.85, 0.95]),
    )
    def test_exceeds_tau_consistent_with_best_window(self, text, needle, tau):
        assert _exceeds_tau(text, needle, tau) == (best_window(text, needle)[2] > tau)


def _counting_doc(blocks: int = 500) -> Document:
    # "000000010002..." strictly increasing 4-digit blocks: any long slice
    # occurs exactly once, so exact location is unambiguous.
    return Document(doc_id="d", text="".join(f"{i:04d}" for i in range(blocks)))


def _ruleset_for(doc_id, spans, atomics, rules, relationships=()):
    return RuleSet(
        doc_id=doc_id,
        rules=tuple(rules),
        spans=tuple(spans),
        atomics=tuple(atomics),
        relationships=tuple(relationships),
    )


def _span(i, text):
    return SourceSpan(span_id=f"S-{i:03d}", text=text, normative_type="requirement")


def _atomic(i, span_i, text):
    return AtomicUnit(
        atomic_id=f"A-{i:03d}",
        source_span_id=f"S-{span_i:03d}",
        text=text,
        original_text=text,
    )


def _rule(i, atomic_i, source_text, name=None):
    return Rule(
        rule_id=f"R-{i:03d}",
        source_atomic_id=f"A-{atomic_i:03d}",
        rule_name=name or f"rule {i}",
        condition=f"condition {i}",
        action=f"action {i}",
        source_text=source_text,
        category_tags=("general",),
    )


class TestCheckFaithfulness:
    def _world(self):
        doc = _counting_doc()
        passage = doc.text[100:400]
        mutated = passage[:50] + "XX" + passage[52:140] + "Q" + passage[141:]
        spans = [_span(1, passage)]
        atomics = [_atomic(1, 1, passage)]
        rules = [
            _rule(1, 1, passage),  # exact substring
            _rule(2, 1, mutated),  # close but not exact
            _rule(3, 1, "Z" * 300),  # nowhere near the document
        ]
        return doc, _ruleset_for(doc.doc_id, spans, atomics, rules)

    def test_exact_fuzzy_and_removed(self):
        doc, rs = self._world()
        kept, result = check_faithfulness(rs, doc)
        assert result.match_kinds == {"R-001": "exact", "R-002": "fuzzy"}
        assert result.removed_rule_ids == ("R-003",)
        assert result.fraction == pytest.approx(2 / 3)
        assert [r.rule_id for r in kept.rules] == ["R-001", "R-002"]
        # Spans and atomics are untouched by the faithfulness pass.
        assert kept.spans == rs.spans
        assert kept.atomics == rs.atomics

    def test_empty_ruleset_scores_one(self):
        doc = _counting_doc(10)
        rs = _ruleset_for(doc.doc_id, [], [], [])
        _, result = check_faithfulness(rs, doc)
        assert result.fraction == 1.0
        assert result.removed_rule_ids == ()

    def test_strictness_of_tau(self):
        doc, rs = self._world()
        # With an impossible threshold, only the exact match survives.
        kept, result = check_faithfulness(rs, doc, tau=1.0)
        assert result.match_kinds == {"R-001": "exact"}
        assert set(result.removed_rule_ids) == {"R-002", "R-003"}


class TestLocate:
    def test_exact_first_occurrence(self):
        text = "abc needle xyz needle"
        assert locate(text, "needle") == (4, 10)

    def test_fuzzy_returns_window_interval(self):
        doc = _counting_doc()
        passage = doc.text[100:400]
        mutated = passage[:150] + "##" + passage[152:]
        start, end = locate(doc.text, mutated)
        expected = brute_best_window(doc.text, mutated, WINDOW_STRIDE, WINDOW_SLACK)
        assert (start, end) == (expected[0], expected[1])
        assert expected[2] > FAITHFULNESS_TAU

    def test_unlocatable_raises(self):
        doc = _counting_doc()
        with pytest.raises(LocationError):
            locate(doc.text, "Z" * 200)


class TestCheckCoverage:
    def test_overlap_boundary_is_inclusive(self):
        doc = _counting_doc()
        span_text = doc.text[0:1000]
        spans = [_span(1, span_text)]
        atomics = [_atomic(1, 1, span_text)]
        # Rule interval [500, 1500) overlaps span [0, 1000) by exactly half.
        rs = _ruleset_for(doc.doc_id, spans, atomics, [_rule(1, 1, doc.text[500:1500])])
        assert doc.text.find(span_text) == 0
        assert doc.text.find(doc.text[500:1500]) == 500
        result = check_coverage(rs, doc)
        assert result.fraction == 1.0
        assert result.uncovered_span_ids == ()
        assert result.span_intervals["S-001"] == (0, 1000)

    def test_one_short_of_half_is_uncovered(self):
        doc = _counting_doc()
        span_text = doc.text[0:1000]
        spans = [_span(1, span_text)]
        atomics = [_atomic(1, 1, span_text)]
        rs = _ruleset_for(doc.doc_id, spans, atomics, [_rule(1, 1, doc.text[501:1501])])
        result = check_coverage(rs, doc)
        assert result.fraction == 0.0
        assert result.uncovered_span_ids == ("S-001",)
        assert result.unlocatable_span_ids == ()

    def test_unlocatable_span_counts_as_uncovered(self):
        doc = _counting_doc()
        good = doc.text[0:200]
        spans = [_span(1, good), _span(2, "Z" * 200)]
        atomics = [_atomic(1, 1, good), _atomic(2, 2, "Z" * 200)]
        rs = _ruleset_for(doc.doc_id, spans, atomics, [_rule(1, 1, good)])
        result = check_coverage(rs, doc)
        assert result.fraction == pytest.approx(0.5)
        assert result.uncovered_span_ids == ("S-002",)
        assert result.unlocatable_span_ids == ("S-002",)
        assert "S-002" not in result.span_intervals

    def test_no_spans_scores_one(self):
        doc = _counting_doc(10)
        rs = _ruleset_for(doc.doc_id, [], [], [])
        assert check_coverage(rs, doc).fraction == 1.0

    def test_unlocatable_rule_ignored_for_coverage(self):
        doc = _counting_doc()
        good = doc.text[0:200]
        spans = [_span(1, good)]
        atomics = [_atomic(1, 1, good)]
        rules = [_rule(1, 1, good), _rule(2, 1, "Z" * 300)]
        result = check_coverage(_ruleset_for(doc.doc_id, spans, atomics, rules), doc)
        assert result.fraction == 1.0


class TestCheckIndependence:
    def _rs(self, names):
        doc = _counting_doc(100)
        span = _span(1, doc.text[:100])
        atomic = _atomic(1, 1, doc.text[:100])
        rules = [
            _rule(i, 1, doc.text[:100], name=name) for i, name in enumerate(names, 1)
        ]
        return _ruleset_for(doc.doc_id, [span], [atomic], rules)

    def test_all_unique(self):
        result = check_independence(self._rs(["alpha", "beta", "gamma"]))
        assert result.fraction == 1.0
        assert result.flagged_pairs == ()

    def test_trimmed_collision_flagged(self):
        result = check_independence(self._rs(["alpha", "  alpha  ", "beta"]))
        assert result.fraction == pytest.approx(2 / 3)
        assert result.flagged_pairs == (("R-001", "R-002"),)

    def test_names_are_case_sensitive(self):
        result = check_independence(self._rs(["Alpha", "alpha"]))
        assert result.fraction == 1.0

    def test_three_way_collision(self):
        result = check_independence(self._rs(["x", "x", "x"]))
        assert result.flagged_pairs == (
            ("R-001", "R-002"),
            ("R-001", "R-003"),
            ("R-002", "R-003"),
        )
        assert result.fraction == pytest.approx(1 / 3)

    def test_empty_ruleset(self):
        result = check_independence(self._rs([]))
        assert result.fraction == 1.0


class TestVerify:
    def _two_span_world(self):
        doc = _counting_doc()
        part1 = doc.text[0:400]
        part2 = doc.text[1000:1400]
        spans = [_span(1, part1), _span(2, part2)]
        atomics = [_atomic(1, 1, part1), _atomic(2, 2, part2)]
        return doc, spans, atomics, part1, part2

    def test_clean_pass(self):
        doc, spans, atomics, part1, part2 = self._two_span_world()
        rules = [_rule(1, 1, part1), _rule(2, 2, part2)]
        rels = (
            RuleRelationship("R-001", "R-002", "conflict", "manual_review"),
        )
        verified = verify(
            _ruleset_for(doc.doc_id, spans, atomics, rules, rels), doc
        )
        report = verified.verification_report
        assert report.faithfulness == 1.0
        assert report.coverage == 1.0
        assert report.coverage_after_exclusion == 1.0
        assert report.independence == 1.0
        assert report.conflict_count == 1
        assert report.removed_rule_ids == ()
        assert report.excluded_rule_ids == ()
        assert all(r.verified for r in verified.rules)

    def test_exclusion_cascade(self):
        doc, spans, atomics, part1, _ = self._two_span_world()
        # Both rules ground in part1, so S-002 has no covering interval;
        # R-002's provenance chain runs through S-002 and is excluded.
        rules = [_rule(1, 1, part1), _rule(2, 2, part1)]
        verified = verify(_ruleset_for(doc.doc_id, spans, atomics, rules), doc)
        report = verified.verification_report
        assert report.faithfulness == 1.0
        assert report.coverage == pytest.approx(0.5)
        assert report.coverage_after_exclusion == 1.0
        assert report.uncovered_span_ids == ("S-002",)
        assert report.excluded_rule_ids == ["R-002"] or report.excluded_rule_ids == ("R-002",)
        assert [s.span_id for s in verified.spans] == ["S-001"]
        assert [a.atomic_id for a in verified.atomics] == ["A-001"]
        assert [r.rule_id for r in verified.rules] == ["R-001"]

    def test_unfaithful_rule_removed_then_span_excluded(self):
        doc, spans, atomics, part1, _ = self._two_span_world()
        rules = [_rule(1, 1, part1), _rule(2, 2, "Z" * 300)]
        verified = verify(_ruleset_for(doc.doc_id, spans, atomics, rules), doc)
        report = verified.verification_report
        assert report.faithfulness == pytest.approx(0.5)
        assert report.removed_rule_ids == ("R-002",)
        assert report.coverage == pytest.approx(0.5)
        assert report.coverage_after_exclusion == 1.0
        assert [r.rule_id for r in verified.rules] == ["R-001"]

    def test_reextraction_repairs_coverage(self):
        doc, spans, atomics, part1, part2 = self._two_span_world()
        rules = [_rule(1, 1, part1)]
        calls = []

        def reextract(targets):
            calls.append([s.span_id for s in targets])
            new_atomic = AtomicUnit(
                atomic_id="A-101",
                source_span_id="S-002",
                text=part2,
                original_text=part2,
            )
            return [_rule(101, 101, part2)], [new_atomic]

        verified = verify(
            _ruleset_for(doc.doc_id, spans, atomics, rules), doc, reextract=reextract
        )
        report = verified.verification_report
        assert calls == [["S-002"]]
        assert report.faithfulness == 1.0
        assert report.coverage == 1.0
        assert report.coverage_after_exclusion == 1.0
        assert sorted(r.rule_id for r in verified.rules) == ["R-001", "R-101"]
        assert all(r.verified for r in verified.rules)

    def test_reextracted_garbage_counts_against_faithfulness(self):
        doc, spans, atomics, part1, _ = self._two_span_world()
        rules = [_rule(1, 1, part1), _rule(2, 2, part1)]

        def reextract(targets):
            new_atomic = AtomicUnit(
                atomic_id="A-101",
                source_span_id="S-002",
                text="zzz",
                original_text="zzz",
            )
            return [_rule(101, 101, "Z" * 300)], [new_atomic]

        verified = verify(
            _ruleset_for(doc.doc_id, spans, atomics, rules), doc, reextract=reextract
        )
        report = verified.verification_report
        # Three rules checked over both passes, one removed.
        assert report.faithfulness == pytest.approx(2 / 3)
        assert report.removed_rule_ids == ("R-101",)
        assert report.coverage == pytest.approx(0.5)
        assert report.coverage_after_exclusion == 1.0
        assert tuple(report.excluded_rule_ids) == ("R-002",)
        assert [r.rule_id for r in verified.rules] == ["R-001"]

    def test_no_reextraction_when_coverage_complete(self):
        doc, spans, atomics, part1, part2 = self._two_span_world()
        rules = [_rule(1, 1, part1), _rule(2, 2, part2)]
        calls = []

        def reextract(targets):
            calls.append(targets)
            return [], []

        verify(_ruleset_for(doc.doc_id, spans, atomics, rules), doc, reextract=reextract)
        assert calls == []

    def test_name_collisions_flagged_not_removed(self):
        doc, spans, atomics, part1, part2 = self._two_span_world()
        rules = [
            _rule(1, 1, part1, name="same name"),
            _rule(2, 2, part2, name="same name"),
        ]
        verified = verify(_ruleset_for(doc.doc_id, spans, atomics, rules), doc)
        report = verified.verification_report
        assert report.independence == pytest.approx(0.5)
        assert report.flagged_name_collisions == (("R-001", "R-002"),)
        assert len(verified.rules) == 2

    def test_conflicts_with_excluded_rules_not_counted(self):
        doc, spans, atomics, part1, _ = self._two_span_world()
        rules = [_rule(1, 1, part1), _rule(2, 2, part1)]
        rels = (RuleRelationship("R-001", "R-002", "conflict", "manual_review"),)
        verified = verify(_ruleset_for(doc.doc_id, spans, atomics, rules, rels), doc)
        # R-002 is excluded with its span, so the conflict pair is inactive.
        assert verified.verification_report.conflict_count == 0
