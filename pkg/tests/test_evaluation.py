from __future__ import annotations

import json

import pytest

from tag.corpus import TaskCase
from tag.errors import (
    EmptyInputError,
    IoError,
    MissingGoldError,
    MissingScoreError,
    MixedDomainError,
    ParseError,
    ValidationError,
)
from tag.evaluation import (
    TRIVIAL_REWRITE_THRESHOLD,
    EvalScore,
    aggregate,
    evaluate_records,
    ingest_code_scores,
    judge_npov,
    score_from_obj,
    score_nba_strict,
    score_to_obj,
    trivial_rewrite_filter,
)
from tag.executor import CodeOutput, ExecutionRecord, NbaOutput, NpovOutput


def npov_record(case_id="T-001", method_id="M3", rewrite="a changed sentence", parse_ok=True):
    parsed = NpovOutput(applied_rules=(), reasoning="", rewrite=rewrite) if parse_ok else None
    return ExecutionRecord(
        case_id=case_id,
        method_id=method_id,
        units_shown=(),
        prompt_hash="00" * 32,
        raw_output=rewrite if parse_ok else "no rewrite line",
        parsed=parsed,
        parse_ok=parse_ok,
    )


def nba_record(case_id, method_id="M3", parsed=None, parse_ok=True):
    return ExecutionRecord(
        case_id=case_id,
        method_id=method_id,
        units_shown=(),
        prompt_hash="00" * 32,
        raw_output="",
        parsed=parsed,
        parse_ok=parse_ok,
    )


def npov_score(case_id="T-001", method_id="M3", vfr=True, rem=4, pres=4, tone=4, flu=4, **kw):
    return EvalScore(
        case_id=case_id,
        method_id=method_id,
        vfr=vfr,
        rem=rem,
        pres=pres,
        tone=tone,
        flu=flu,
        **kw,
    )


class TestEvalScoreValidation:
    def test_exactly_one_domain_group(self):
        with pytest.raises(ValidationError):
            EvalScore(case_id="T-001", method_id="M0")
        with pytest.raises(ValidationError):
            EvalScore(case_id="T-001", method_id="M0", vfr=True, strict_correct=True)
        with pytest.raises(ValidationError):
            EvalScore(case_id="T-001", method_id="M0", pass1=True, rem=3)

    def test_aux_bounds(self):
        with pytest.raises(ValidationError):
            npov_score(rem=0)
        with pytest.raises(ValidationError):
            npov_score(flu=6)

    def test_lint_bounds(self):
        with pytest.raises(ValidationError):
            EvalScore(case_id="T-001", method_id="M0", pass1=True, lint_score=10.5)
        EvalScore(case_id="T-001", method_id="M0", pass1=True, lint_score=-10.0)

    def test_level_values(self):
        EvalScore(case_id="T-001", method_id="M0", strict_correct=True, level="L2")
        with pytest.raises(ValidationError):
            EvalScore(case_id="T-001", method_id="M0", strict_correct=True, level="L3")

    def test_domain_property(self):
        assert npov_score().domain == "npov"
        assert EvalScore(case_id="c", method_id="m", strict_correct=False).domain == "nba"
        assert EvalScore(case_id="c", method_id="m", pass1=True, lint_score=0.0).domain == "code"


class TestTrivialRewriteFilter:
    def test_identical_is_trivial(self):
        assert trivial_rewrite_filter("same sentence", "same sentence")

    def test_distinct_is_not_trivial(self):
        assert not trivial_rewrite_filter("one thing entirely", "another matter altogether")

    def test_threshold_is_strict(self):
        # Similarity exactly at the threshold does not trip the filter.
        original = "x" * 49 + "a"
        rewrite = "x" * 49 + "b"
        assert not trivial_rewrite_filter(original, rewrite)
        assert trivial_rewrite_filter(original, rewrite, threshold=0.9799)

    def test_default_threshold_constant(self):
        assert TRIVIAL_REWRITE_THRESHOLD == 0.98

    def test_one_char_edit_in_long_text_is_trivial(self):
        original = "The committee announced the decision on Tuesday afternoon " * 3
        rewrite = original.replace(" on ", " at ", 1)
        assert trivial_rewrite_filter(original, rewrite)


def judge_response(vfr=True, rem=4, pres=4, tone=4, flu=4, reason="solid"):
    return json.dumps(
        {"VFR": vfr, "Rem": rem, "Pres": pres, "Tone": tone, "Flu": flu, "reason": reason}
    )


CASE = TaskCase(
    case_id="T-001",
    input_text="The outrageous plan was announced.",
    metadata={"violation": "loaded language"},
)


class TestJudgeNpov:
    def test_scores_mapped_from_verdict(self, make_gateway):
        gw, provider = make_gateway(
            {
                "entries": [
                    {
                        "response": judge_response(vfr=True, rem=5, pres=4, tone=3, flu=2),
                        "request_tag": "judge:npov",
                        "patterns": [],
                    }
                ]
            }
        )
        score = judge_npov(CASE, npov_record(), gw)
        assert score.vfr is True
        assert (score.rem, score.pres, score.tone, score.flu) == (5, 4, 3, 2)
        assert score.judge_reason == "solid"
        assert not score.filtered_trivial
        call = provider.chat_calls[0]
        assert call.request_tag == "judge:npov"
        assert CASE.input_text in call.user_message
        assert "a changed sentence" in call.user_message
        assert "loaded language" in call.user_message

    def test_missing_violation_uses_placeholder(self, make_gateway):
        case = TaskCase(case_id="T-001", input_text="original text here")
        gw, provider = make_gateway(
            {"entries": [{"response": judge_response(), "request_tag": "judge:npov", "patterns": []}]}
        )
        judge_npov(case, npov_record(), gw)
        assert "(not specified)" in provider.chat_calls[0].user_message

    def test_unparseable_execution_floors_without_judge_call(self, make_gateway):
        gw, provider = make_gateway({"entries": []})
        score = judge_npov(CASE, npov_record(parse_ok=False), gw)
        assert score.vfr is False
        assert (score.rem, score.pres, score.tone, score.flu) == (1, 1, 1, 1)
        assert not score.filtered_trivial
        assert provider.chat_calls == []

    def test_trivial_rewrite_floors_without_judge_call(self, make_gateway):
        gw, provider = make_gateway({"entries": []})
        score = judge_npov(CASE, npov_record(rewrite=CASE.input_text), gw)
        assert score.vfr is False
        assert score.filtered_trivial
        assert score.judge_reason == "trivial rewrite filter"
        assert provider.chat_calls == []

    def test_repair_after_malformed_verdict(self, make_gateway):
        gw, provider = make_gateway(
            {
                "entries": [
                    {
                        "response": judge_response(),
                        "request_tag": "judge:npov",
                        "patterns": ["could not be parsed"],
                    },
                    {"response": "great rewrite, 5 stars", "request_tag": "judge:npov", "patterns": []},
                ]
            }
        )
        score = judge_npov(CASE, npov_record(), gw)
        assert score.vfr is True
        assert len(provider.chat_calls) == 2

    def test_parse_error_after_failed_repair(self, make_gateway):
        gw, _ = make_gateway(
            {"entries": [{"response": "nope", "request_tag": "judge:npov", "patterns": []}]}
        )
        with pytest.raises(ParseError):
            judge_npov(CASE, npov_record(), gw)

    @pytest.mark.parametrize(
        "payload",
        [
            '{"VFR": "true", "Rem": 4, "Pres": 4, "Tone": 4, "Flu": 4}',
            '{"VFR": true, "Rem": 4, "Pres": 4, "Tone": 4}',
            '{"VFR": true, "Rem": 4, "Pres": 4, "Tone": 4, "Flu": 4, "bonus": 1}',
            '{"VFR": true, "Rem": true, "Pres": 4, "Tone": 4, "Flu": 4}',
            '{"VFR": true, "Rem": 0, "Pres": 4, "Tone": 4, "Flu": 4}',
            '{"VFR": true, "Rem": 4.5, "Pres": 4, "Tone": 4, "Flu": 4}',
            '{"VFR": true, "Rem": 4, "Pres": 4, "Tone": 4, "Flu": 4, "reason": 9}',
            "[]",
        ],
    )
    def test_strict_verdict_schema(self, make_gateway, payload):
        gw, _ = make_gateway(
            {"entries": [{"response": payload, "request_tag": "judge:npov", "patterns": []}]}
        )
        with pytest.raises(ParseError):
            judge_npov(CASE, npov_record(), gw)

    def test_reason_is_optional(self, make_gateway):
        payload = '{"VFR": false, "Rem": 2, "Pres": 3, "Tone": 2, "Flu": 4}'
        gw, _ = make_gateway(
            {"entries": [{"response": payload, "request_tag": "judge:npov", "patterns": []}]}
        )
        score = judge_npov(CASE, npov_record(), gw)
        assert score.vfr is False
        assert score.judge_reason == ""


def nba_gold(answer, operation=None, team=None):
    gold = {"answer": answer}
    if operation is not None:
        gold["operation_id"] = operation
    if team is not None:
        gold["problematic_team"] = team
    return gold


def nba_parsed(answer, operation=None, team=None):
    return NbaOutput(
        answer=answer, illegal_operation=operation, problematic_team=team, rationale=""
    )


class TestScoreNbaStrict:
    def test_legal_trade_verdict_only(self):
        record = nba_record("T-001", parsed=nba_parsed(False, "spurious detail", "Hawks"))
        score = score_nba_strict(record, nba_gold(False))
        assert score.strict_correct is True

    def test_legal_trade_wrong_verdict(self):
        record = nba_record("T-001", parsed=nba_parsed(True))
        assert score_nba_strict(record, nba_gold(False)).strict_correct is False

    def test_illegal_trade_requires_all_three(self):
        gold = nba_gold(True, operation="OP-2", team="Hawks")
        correct = nba_record("T-001", parsed=nba_parsed(True, "OP-2", "Hawks"))
        assert score_nba_strict(correct, gold).strict_correct is True
        wrong_verdict = nba_record("T-001", parsed=nba_parsed(False, "OP-2", "Hawks"))
        assert score_nba_strict(wrong_verdict, gold).strict_correct is False
        wrong_op = nba_record("T-001", parsed=nba_parsed(True, "OP-9", "Hawks"))
        assert score_nba_strict(wrong_op, gold).strict_correct is False
        wrong_team = nba_record("T-001", parsed=nba_parsed(True, "OP-2", "Spurs"))
        assert score_nba_strict(wrong_team, gold).strict_correct is False

    def test_comparison_ignores_case_and_spacing(self):
        gold = nba_gold(True, operation="Salary Match", team="Trail Blazers")
        record = nba_record(
            "T-001", parsed=nba_parsed(True, "  salary   match ", "trail blazers")
        )
        assert score_nba_strict(record, gold).strict_correct is True

    def test_gold_illegal_operation_key_accepted(self):
        gold = {"answer": True, "illegal_operation": "OP-2", "problematic_team": "Hawks"}
        record = nba_record("T-001", parsed=nba_parsed(True, "OP-2", "Hawks"))
        assert score_nba_strict(record, gold).strict_correct is True

    def test_missing_team_matches_null(self):
        gold = nba_gold(True, operation="OP-2")
        record = nba_record("T-001", parsed=nba_parsed(True, "OP-2", None))
        assert score_nba_strict(record, gold).strict_correct is True

    def test_unparseable_output_scores_false(self):
        record = nba_record("T-001", parsed=None, parse_ok=False)
        assert score_nba_strict(record, nba_gold(False)).strict_correct is False

    def test_missing_gold_raises(self):
        record = nba_record("T-001", parsed=nba_parsed(True))
        with pytest.raises(MissingGoldError):
            score_nba_strict(record, None)
        with pytest.raises(MissingGoldError):
            score_nba_strict(record, {"answer": "yes"})

    def test_level_carried(self):
        record = nba_record("T-001", parsed=nba_parsed(False))
        assert score_nba_strict(record, nba_gold(False), level="L1").level == "L1"


class TestEvaluateRecords:
    def test_unknown_case_raises(self, make_gateway):
        gw, _ = make_gateway({"entries": []})
        with pytest.raises(MissingScoreError) as exc_info:
            evaluate_records([npov_record("T-404")], [CASE], "npov", gateway=gw)
        assert exc_info.value.case_ids == ["T-404"]

    def test_npov_requires_gateway(self):
        with pytest.raises(ValidationError):
            evaluate_records([npov_record()], [CASE], "npov")

    def test_nba_joins_gold_and_level(self):
        cases = [
            TaskCase(
                case_id="T-001",
                input_text="trade",
                metadata={"level": "L0"},
                gold=nba_gold(False),
            ),
            TaskCase(
                case_id="T-002",
                input_text="trade",
                metadata={"level": "L2"},
                gold=nba_gold(True, operation="OP-1", team="Hawks"),
            ),
        ]
        records = [
            nba_record("T-001", parsed=nba_parsed(False)),
            nba_record("T-002", parsed=nba_parsed(True, "OP-1", "Hawks")),
        ]
        scores = evaluate_records(records, cases, "nba")
        assert [s.strict_correct for s in scores] == [True, True]
        assert [s.level for s in scores] == ["L0", "L2"]

    def test_code_requires_report_path(self):
        with pytest.raises(ValidationError):
            evaluate_records([npov_record()], [CASE], "code")

    def test_unknown_domain(self):
        with pytest.raises(ValidationError):
            evaluate_records([], [], "poetry")


class TestIngestCodeScores:
    def _record(self, case_id):
        return ExecutionRecord(
            case_id=case_id,
            method_id="M1",
            units_shown=(),
            prompt_hash="00" * 32,
            raw_output="x = 1",
            parsed=CodeOutput("x = 1"),
            parse_ok=True,
        )

    def test_joins_by_case_id(self, tmp_path):
        report = tmp_path / "report.json"
        report.write_text(
            json.dumps(
                {
                    "T-001": {"pass1": True, "lint_score": 8.5},
                    "T-002": {"pass1": False, "lint_score": -2.0},
                }
            )
        )
        scores = ingest_code_scores([self._record("T-001"), self._record("T-002")], str(report))
        assert scores[0].pass1 is True and scores[0].lint_score == 8.5
        assert scores[1].pass1 is False and scores[1].lint_score == -2.0

    def test_missing_case_raises(self, tmp_path):
        report = tmp_path / "report.json"
        report.write_text(json.dumps({"T-001": {"pass1": True, "lint_score": 0.0}}))
        with pytest.raises(MissingScoreError) as exc_info:
            ingest_code_scores([self._record("T-001"), self._record("T-404")], str(report))
        assert exc_info.value.case_ids == ["T-404"]

    def test_malformed_entry_raises(self, tmp_path):
        report = tmp_path / "report.json"
        report.write_text(json.dumps({"T-001": {"pass1": True}}))
        with pytest.raises(ParseError):
            ingest_code_scores([self._record("T-001")], str(report))

    def test_non_object_report_raises(self, tmp_path):
        report = tmp_path / "report.json"
        report.write_text("[1, 2]")
        with pytest.raises(ParseError):
            ingest_code_scores([self._record("T-001")], str(report))

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(IoError):
            ingest_code_scores([self._record("T-001")], str(tmp_path / "absent.json"))

    def test_invalid_json_raises(self, tmp_path):
        report = tmp_path / "report.json"
        report.write_text("{broken")
        with pytest.raises(ParseError):
            ingest_code_scores([self._record("T-001")], str(report))


class TestAggregate:
    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            aggregate([])

    def test_mixed_domains_rejected(self):
        scores = [
            npov_score(),
            EvalScore(case_id="T-002", method_id="M3", strict_correct=True),
        ]
        with pytest.raises(MixedDomainError):
            aggregate(scores)

    def test_npov_row(self):
        scores = [
            npov_score("T-001", vfr=True, rem=5, pres=4, tone=3, flu=2),
            npov_score("T-002", vfr=False, rem=1, pres=1, tone=1, flu=1, filtered_trivial=True),
            npov_score("T-003", vfr=True, rem=3, pres=3, tone=3, flu=3),
        ]
        result = aggregate(scores)
        assert result["domain"] == "npov"
        (row,) = result["rows"]
        assert row["method_id"] == "M3"
        assert row["n_cases"] == 3
        assert row["vfr_percent"] == 66.7
        assert row["rem"] == 3.0
        assert row["pres"] == round(8 / 3, 2)
        assert row["aux_avg"] == round(
            (row["rem"] + row["pres"] + row["tone"] + row["flu"]) / 4, 2
        )
        assert row["filtered_trivial"] == 1

    def test_percent_rounding_one_decimal(self):
        scores = [
            npov_score(f"T-{i:03d}", vfr=(i < 73), rem=3, pres=3, tone=3, flu=3)
            for i in range(107)
        ]
        (row,) = aggregate(scores)["rows"]
        assert row["vfr_percent"] == 68.2

    def test_method_sort_order(self):
        method_ids = ["rules+similarity", "M3", "M2:20", "M0", "M2:5", "M1", "chunks+applicability"]
        scores = [
            npov_score(f"T-{i:03d}", method_id=m, vfr=True, rem=3, pres=3, tone=3, flu=3)
            for i, m in enumerate(method_ids)
        ]
        rows = aggregate(scores)["rows"]
        assert [r["method_id"] for r in rows] == [
            "M0",
            "M1",
            "M2:5",
            "M2:20",
            "M3",
            "chunks+applicability",
            "rules+similarity",
        ]

    def test_mean_units_from_records(self):
        scores = [
            npov_score("T-001", method_id="M3", vfr=True),
            npov_score("T-002", method_id="M3", vfr=True),
        ]
        records = [
            npov_record("T-001", method_id="M3"),
            ExecutionRecord(
                case_id="T-002",
                method_id="M3",
                units_shown=("R-001", "R-002", "R-003"),
                prompt_hash="00" * 32,
                raw_output="Rewrite: x",
                parsed=NpovOutput((), "", "x"),
                parse_ok=True,
            ),
        ]
        (row,) = aggregate(scores, records)["rows"]
        assert row["mean_units"] == 1.5

    def test_no_records_no_mean_units(self):
        (row,) = aggregate([npov_score()])["rows"]
        assert "mean_units" not in row

    def test_nba_rows_with_levels(self):
        scores = [
            EvalScore(case_id="T-001", method_id="M3", strict_correct=True, level="L0"),
            EvalScore(case_id="T-002", method_id="M3", strict_correct=False, level="L0"),
            EvalScore(case_id="T-003", method_id="M3", strict_correct=True, level="L2"),
        ]
        (row,) = aggregate(scores)["rows"]
        assert row["strict_percent"] == 66.7
        assert row["strict_percent_L0"] == 50.0
        assert row["strict_percent_L2"] == 100.0
        assert "strict_percent_L1" not in row

    def test_code_rows(self):
        scores = [
            EvalScore(case_id="T-001", method_id="M1", pass1=True, lint_score=9.0),
            EvalScore(case_id="T-002", method_id="M1", pass1=False, lint_score=6.0),
        ]
        (row,) = aggregate(scores)["rows"]
        assert row["pass1_percent"] == 50.0
        assert row["lint_mean"] == 7.5


class TestScoreSerialization:
    def test_roundtrip(self):
        scores = [
            npov_score(judge_reason="because", filtered_trivial=True, vfr=False),
            EvalScore(case_id="c", method_id="m", strict_correct=True, level="L1"),
            EvalScore(case_id="c", method_id="m", pass1=False, lint_score=-1.25),
        ]
        for score in scores:
            assert score_from_obj(score_to_obj(score)) == score
            json.dumps(score_to_obj(score))

    def test_malformed_rejected(self):
        with pytest.raises(ParseError):
            score_from_obj({"case_id": "c"})
