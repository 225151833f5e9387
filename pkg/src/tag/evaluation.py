"""Scoring: NPOV judge with trivial-rewrite filter, strict NBA accuracy,
code-score ingestion, and per-method aggregation."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .corpus import TaskCase
from .errors import (
    EmptyInputError,
    IoError,
    MissingGoldError,
    MissingScoreError,
    MixedDomainError,
    ParseError,
    ValidationError,
)
from .executor import ExecutionRecord, NbaOutput, NpovOutput
from .llm_gateway import ChatRequest, Gateway
from .prompts import render_template
from .verification import gestalt_ratio

TRIVIAL_REWRITE_THRESHOLD = 0.98

NBA_LEVELS = ("L0", "L1", "L2")

_AUX_KEYS = ("Rem", "Pres", "Tone", "Flu")


@dataclass(frozen=True)
class EvalScore:
    case_id: str
    method_id: str
    vfr: bool | None = None
    rem: int | None = None
    pres: int | None = None
    tone: int | None = None
    flu: int | None = None
    strict_correct: bool | None = None
    level: str | None = None
    pass1: bool | None = None
    lint_score: float | None = None
    judge_reason: str | None = None
    filtered_trivial: bool = False

    def __post_init__(self):
        groups = [
            self.vfr is not None or any(
                v is not None for v in (self.rem, self.pres, self.tone, self.flu)
            ),
            self.strict_correct is not None,
            self.pass1 is not None or self.lint_score is not None,
        ]
        if sum(groups) != 1:
            raise ValidationError("exactly one domain's score fields must be set")
        if self.lint_score is not None and not -10.0 <= self.lint_score <= 10.0:
            raise ValidationError(f"lint_score out of [-10, 10]: {self.lint_score}")
        for name in ("rem", "pres", "tone", "flu"):
            value = getattr(self, name)
            if value is not None and not 1 <= value <= 5:
                raise ValidationError(f"{name} out of [1, 5]: {value}")
        if self.level is not None and self.level not in NBA_LEVELS:
            raise ValidationError(f"unknown level {self.level!r}")

    @property
    def domain(self) -> str:
        if self.strict_correct is not None:
            return "nba"
        if self.pass1 is not None or self.lint_score is not None:
            return "code"
        return "npov"


def trivial_rewrite_filter(
    original: str, rewrite: str, threshold: float = TRIVIAL_REWRITE_THRESHOLD
) -> bool:
    """True when the rewrite is a near-copy and must score VFR false unjudged."""
    return gestalt_ratio(original, rewrite) > threshold


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if not text.startswith("```"):
        return text
    lines = text.split("\n")[1:]
    if lines and lines[-1].strip().startswith("```"):
        lines = lines[:-1]
    return "\n".join(lines).strip()


def _parse_judge_verdict(raw: str) -> dict:
    try:
        obj = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise ParseError(f"judge output is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseError("judge output is not a JSON object")
    required = {"VFR", *_AUX_KEYS}
    allowed = required | {"reason"}
    keys = set(obj)
    if not required <= keys or not keys <= allowed:
        raise ParseError(
            f"judge object must have keys {sorted(required)} (+ optional reason), got {sorted(keys)}"
        )
    if not isinstance(obj["VFR"], bool):
        raise ParseError(f"VFR must be true or false, got {obj['VFR']!r}")
    for key in _AUX_KEYS:
        value = obj[key]
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"{key} must be an integer, got {value!r}")
        if not 1 <= value <= 5:
            raise ParseError(f"{key} out of range 1-5: {value}")
    reason = obj.get("reason", "")
    if not isinstance(reason, str):
        raise ParseError("reason must be a string")
    obj["reason"] = reason
    return obj


def _floor_score(record: ExecutionRecord, reason: str, filtered: bool) -> EvalScore:
    return EvalScore(
        case_id=record.case_id,
        method_id=record.method_id,
        vfr=False,
        rem=1,
        pres=1,
        tone=1,
        flu=1,
        judge_reason=reason,
        filtered_trivial=filtered,
    )


def judge_npov(case: TaskCase, record: ExecutionRecord, gateway: Gateway) -> EvalScore:
    """Score one NPOV rewrite; the trivial filter preempts any judge call."""
    if not record.parse_ok or not isinstance(record.parsed, NpovOutput):
        return _floor_score(record, "unparseable executor output", filtered=False)
    rewrite = record.parsed.rewrite
    if trivial_rewrite_filter(case.input_text, rewrite):
        return _floor_score(record, "trivial rewrite filter", filtered=True)
    violation = case.metadata.get("violation") or "(not specified)"
    system = render_template("judge_npov_system")
    user = render_template(
        "judge_npov_user",
        original=case.input_text,
        violation=violation,
        rewrite=rewrite,
    )
    model = gateway.config.judge_model_id
    raw = gateway.complete(
        ChatRequest(
            model_id=model, system_message=system, user_message=user, request_tag="judge:npov"
        )
    )
    try:
        verdict = _parse_judge_verdict(raw)
    except ParseError as err:
        repair_user = (
            user
            + "\n\nYour previous response could not be parsed: "
            + str(err)
            + "\nPrevious response:\n"
            + raw[:500]
            + "\n\nOutput only the JSON object in the required format."
        )
        raw = gateway.complete(
            ChatRequest(
                model_id=model,
                system_message=system,
                user_message=repair_user,
                request_tag="judge:npov",
            )
        )
        verdict = _parse_judge_verdict(raw)
    return EvalScore(
        case_id=record.case_id,
        method_id=record.method_id,
        vfr=verdict["VFR"],
        rem=verdict["Rem"],
        pres=verdict["Pres"],
        tone=verdict["Tone"],
        flu=verdict["Flu"],
        judge_reason=verdict["reason"],
        filtered_trivial=False,
    )


def _normalize(text: str | None) -> str:
    if text is None:
        return ""
    return re.sub(r"\s+", " ", text.strip().casefold())


def score_nba_strict(
    record: ExecutionRecord, gold: dict | None, level: str | None = None
) -> EvalScore:
    """All-or-nothing scoring: verdict, offending operation, and team."""
    if not isinstance(gold, dict) or not isinstance(gold.get("answer"), bool):
        raise MissingGoldError(f"case {record.case_id}: gold answer missing")
    gold_answer: bool = gold["answer"]
    if not record.parse_ok or not isinstance(record.parsed, NbaOutput):
        return EvalScore(
            case_id=record.case_id,
            method_id=record.method_id,
            strict_correct=False,
            level=level,
        )
    parsed = record.parsed
    if not gold_answer:
        correct = parsed.answer is False
    elif parsed.answer is not True:
        correct = False
    else:
        target_op = gold.get("operation_id") or gold.get("illegal_operation")
        op_ok = _normalize(parsed.illegal_operation) == _normalize(target_op)
        team_ok = _normalize(parsed.problematic_team) == _normalize(
            gold.get("problematic_team")
        )
        correct = op_ok and team_ok
    return EvalScore(
        case_id=record.case_id,
        method_id=record.method_id,
        strict_correct=correct,
        level=level,
    )


def evaluate_records(
    records: list[ExecutionRecord],
    cases: list[TaskCase],
    domain: str,
    gateway: Gateway | None = None,
    code_report_path: str | None = None,
) -> list[EvalScore]:
    """Score a batch of records for one domain, joined to cases by case_id."""
    case_by_id = {case.case_id: case for case in cases}
    missing = [r.case_id for r in records if r.case_id not in case_by_id]
    if missing:
        raise MissingScoreError(
            f"records reference unknown cases: {missing[:5]}", case_ids=missing
        )
    if domain == "npov":
        if gateway is None:
            raise ValidationError("NPOV evaluation requires a gateway for the judge")
        return [judge_npov(case_by_id[r.case_id], r, gateway) for r in records]
    if domain == "nba":
        scores = []
        for record in records:
            case = case_by_id[record.case_id]
            scores.append(
                score_nba_strict(record, case.gold, case.metadata.get("level"))
            )
        return scores
    if domain == "code":
        if code_report_path is None:
            raise ValidationError("code evaluation requires an external report path")
        return ingest_code_scores(records, code_report_path)
    raise ValidationError(f"unknown domain {domain!r}")


def ingest_code_scores(
    records: list[ExecutionRecord], report_path: str
) -> list[EvalScore]:
    """Join externally computed pass/lint results onto execution records."""
    try:
        with open(report_path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read code report {report_path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"code report is not valid JSON: {exc}") from exc
    if not isinstance(report, dict):
        raise ParseError("code report must be a JSON object keyed by case_id")
    missing = [r.case_id for r in records if r.case_id not in report]
    if missing:
        raise MissingScoreError(
            f"code report missing {len(missing)} case(s): {missing[:5]}",
            case_ids=missing,
        )
    scores: list[EvalScore] = []
    for record in records:
        entry = report[record.case_id]
        if not isinstance(entry, dict) or "pass1" not in entry or "lint_score" not in entry:
            raise ParseError(
                f"code report entry for {record.case_id} needs pass1 and lint_score"
            )
        scores.append(
            EvalScore(
                case_id=record.case_id,
                method_id=record.method_id,
                pass1=bool(entry["pass1"]),
                lint_score=float(entry["lint_score"]),
            )
        )
    return scores


def _method_sort_key(method_id: str) -> tuple:
    match = re.fullmatch(r"M(\d+)(?::(\d+))?", method_id)
    if match:
        return (0, int(match.group(1)), int(match.group(2) or 0), method_id)
    return (1, 0, 0, method_id)


def _percent(count: int, total: int) -> float:
    return round(100.0 * count / total, 1)


def _mean(values: list[float], digits: int) -> float:
    return round(sum(values) / len(values), digits)


def aggregate(
    scores: list[EvalScore], records: list[ExecutionRecord] | None = None
) -> dict:
    """Per-method summary rows in the reported-table shape."""
    if not scores:
        raise EmptyInputError("no scores to aggregate")
    domains = {score.domain for score in scores}
    if len(domains) > 1:
        raise MixedDomainError(f"mixed score domains: {sorted(domains)}")
    domain = domains.pop()
    units: dict[str, list[int]] = {}
    if records:
        for record in records:
            units.setdefault(record.method_id, []).append(len(record.units_shown))
    by_method: dict[str, list[EvalScore]] = {}
    for score in sorted(scores, key=lambda s: (s.method_id, s.case_id)):
        by_method.setdefault(score.method_id, []).append(score)
    rows = []
    for method_id in sorted(by_method, key=_method_sort_key):
        group = by_method[method_id]
        row: dict = {"method_id": method_id, "n_cases": len(group)}
        if method_id in units:
            row["mean_units"] = _mean([float(u) for u in units[method_id]], 1)
        if domain == "npov":
            row["vfr_percent"] = _percent(
                sum(1 for s in group if s.vfr), len(group)
            )
            aux_means = {
                name: _mean([float(getattr(s, name)) for s in group], 2)
                for name in ("rem", "pres", "tone", "flu")
            }
            row.update(aux_means)
            row["aux_avg"] = _mean(list(aux_means.values()), 2)
            row["filtered_trivial"] = sum(1 for s in group if s.filtered_trivial)
        elif domain == "nba":
            row["strict_percent"] = _percent(
                sum(1 for s in group if s.strict_correct), len(group)
            )
            for level in NBA_LEVELS:
                subset = [s for s in group if s.level == level]
                if subset:
                    row[f"strict_percent_{level}"] = _percent(
                        sum(1 for s in subset if s.strict_correct), len(subset)
                    )
        else:
            row["pass1_percent"] = _percent(
                sum(1 for s in group if s.pass1), len(group)
            )
            row["lint_mean"] = _mean([float(s.lint_score) for s in group], 2)
        rows.append(row)
    return {"domain": domain, "rows": rows}


def score_to_obj(score: EvalScore) -> dict:
    return {
        "case_id": score.case_id,
        "method_id": score.method_id,
        "vfr": score.vfr,
        "rem": score.rem,
        "pres": score.pres,
        "tone": score.tone,
        "flu": score.flu,
        "strict_correct": score.strict_correct,
        "level": score.level,
        "pass1": score.pass1,
        "lint_score": score.lint_score,
        "judge_reason": score.judge_reason,
        "filtered_trivial": score.filtered_trivial,
    }


def score_from_obj(obj: dict) -> EvalScore:
    try:
        return EvalScore(
            case_id=obj["case_id"],
            method_id=obj["method_id"],
            vfr=obj.get("vfr"),
            rem=obj.get("rem"),
            pres=obj.get("pres"),
            tone=obj.get("tone"),
            flu=obj.get("flu"),
            strict_correct=obj.get("strict_correct"),
            level=obj.get("level"),
            pass1=obj.get("pass1"),
            lint_score=obj.get("lint_score"),
            judge_reason=obj.get("judge_reason"),
            filtered_trivial=bool(obj.get("filtered_trivial", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed eval score: {exc}") from exc
