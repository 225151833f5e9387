"""Pairwise applicability and relevance matching, one judgment per pair."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Union

from .corpus import Chunk, TaskCase
from .errors import (
    EmptyInputError,
    MatchError,
    ParseError,
    TransportError,
    ValidationError,
)
from .llm_gateway import ChatRequest, Gateway
from .prompts import render_template
from .retrieval import chunk_unit_id
from .rule_model import Rule

MODES = frozenset({"applicability_rule", "applicability_chunk", "relevance_rule"})

MatchUnit = Union[Rule, Chunk]

NOT_SPECIFIED = "(not specified)"


@dataclass(frozen=True)
class MatchDecision:
    case_id: str
    unit_id: str
    verdict: str
    mode: str
    reason: str | None = None
    raw_response: str = ""

    def __post_init__(self):
        if self.verdict not in ("YES", "NO"):
            raise ValidationError(f"verdict must be YES or NO, got {self.verdict!r}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown match mode {self.mode!r}")


@dataclass(frozen=True)
class MatchedSet:
    case_id: str
    unit_ids: tuple[str, ...]
    decisions: tuple[MatchDecision, ...]

    def __post_init__(self):
        expected = tuple(
            sorted(d.unit_id for d in self.decisions if d.verdict == "YES")
        )
        if tuple(self.unit_ids) != expected:
            raise ValidationError("unit_ids must be the sorted YES decisions")
        ordered = tuple(sorted(self.decisions, key=lambda d: d.unit_id))
        if self.decisions != ordered:
            raise ValidationError("decisions must be ordered by unit_id")
        if any(d.case_id != self.case_id for d in self.decisions):
            raise ValidationError("decision case_id mismatch")


def unit_id_of(unit: MatchUnit) -> str:
    if isinstance(unit, Rule):
        return unit.rule_id
    return chunk_unit_id(unit.chunk_id)


def assemble_match_prompt(
    case: TaskCase, unit: MatchUnit, mode: str, domain: str = "general"
) -> tuple[str, str]:
    """Render the (system, user) pair for one pairwise judgment.

    Applicability modes never include the rule's action; the relevance
    mode always does. The NBA domain uses its structured rule card with
    placeholder text for fields the generic rule model does not carry.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown match mode {mode!r}")
    if mode == "applicability_chunk":
        if not isinstance(unit, Chunk):
            raise ValidationError("applicability_chunk mode requires chunk units")
        system = render_template("matcher_general_system")
        user = render_template(
            "matcher_general_user",
            query=case.input_text,
            rule_id=unit_id_of(unit),
            rule_name="policy excerpt",
            condition=unit.text,
            tags="excerpt",
        )
        return system, user
    if not isinstance(unit, Rule):
        raise ValidationError(f"{mode} mode requires rule units")
    tags = ", ".join(unit.category_tags)
    if mode == "relevance_rule":
        system = render_template("relevance_system")
        user = render_template(
            "relevance_user",
            query=case.input_text,
            rule_id=unit.rule_id,
            rule_name=unit.rule_name,
            condition=unit.condition,
            action=unit.action,
            tags=tags,
        )
        return system, user
    if domain == "nba":
        system = render_template("matcher_nba_system")
        user = render_template(
            "matcher_nba_user",
            scenario=case.input_text,
            rule_id=unit.rule_id,
            rule_name=unit.rule_name,
            primary_tag=unit.category_tags[0],
            applies_when=unit.condition,
            constraint=NOT_SPECIFIED,
            violation_check=NOT_SPECIFIED,
            does_not_apply_to=NOT_SPECIFIED,
        )
        return system, user
    system = render_template("matcher_general_system")
    user = render_template(
        "matcher_general_user",
        query=case.input_text,
        rule_id=unit.rule_id,
        rule_name=unit.rule_name,
        condition=unit.condition,
        tags=tags,
    )
    return system, user


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if not text.startswith("```"):
        return text
    lines = text.split("\n")[1:]
    if lines and lines[-1].strip().startswith("```"):
        lines = lines[:-1]
    return "\n".join(lines).strip()


def _parse_verdict(raw: str) -> tuple[str, None]:
    try:
        obj = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise ParseError(f"verdict is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"verdict"}:
        raise ParseError('verdict object must be exactly {"verdict": ...}')
    verdict = obj["verdict"]
    if verdict not in ("YES", "NO"):
        raise ParseError(f"verdict must be YES or NO, got {verdict!r}")
    return verdict, None


def _parse_nba_verdict(raw: str) -> tuple[str, str]:
    try:
        obj = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise ParseError(f"verdict is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"applicable", "reason"}:
        raise ParseError('verdict object must have exactly the keys "applicable" and "reason"')
    applicable = obj["applicable"]
    if not isinstance(applicable, bool):
        raise ParseError(f"applicable must be true or false, got {applicable!r}")
    reason = obj["reason"]
    if not isinstance(reason, str):
        raise ParseError(f"reason must be a string, got {type(reason).__name__}")
    return ("YES" if applicable else "NO"), reason


def judge_pair(
    case: TaskCase,
    unit: MatchUnit,
    mode: str,
    gateway: Gateway,
    domain: str = "general",
) -> MatchDecision:
    """Judge one (input, unit) pair; parse failures repair once, then raise."""
    system, user = assemble_match_prompt(case, unit, mode, domain)
    request_tag = f"match:{mode}"
    model = gateway.config.matcher_model_id
    parse = (
        _parse_nba_verdict
        if domain == "nba" and mode == "applicability_rule"
        else _parse_verdict
    )
    raw = gateway.complete(
        ChatRequest(
            model_id=model, system_message=system, user_message=user, request_tag=request_tag
        )
    )
    try:
        verdict, reason = parse(raw)
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
                request_tag=request_tag,
            )
        )
        verdict, reason = parse(raw)
    return MatchDecision(
        case_id=case.case_id,
        unit_id=unit_id_of(unit),
        verdict=verdict,
        mode=mode,
        reason=reason,
        raw_response=raw,
    )


def match_all(
    case: TaskCase,
    units: list[MatchUnit],
    mode: str,
    gateway: Gateway,
    domain: str = "general",
    parallelism: int | None = None,
) -> MatchedSet:
    """Judge every unit for one case, one isolated call per pair."""
    if not units:
        raise EmptyInputError("match_all requires at least one unit")
    ordered = sorted(units, key=unit_id_of)
    workers = parallelism if parallelism is not None else gateway.config.max_parallel_requests
    decisions: list[MatchDecision] = []
    failures: list[tuple[str, Exception]] = []
    if workers <= 1 or len(ordered) == 1:
        for unit in ordered:
            try:
                decisions.append(judge_pair(case, unit, mode, gateway, domain))
            except (ParseError, TransportError) as exc:
                failures.append((unit_id_of(unit), exc))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                (unit_id_of(unit), pool.submit(judge_pair, case, unit, mode, gateway, domain))
                for unit in ordered
            ]
            for unit_id, future in futures:
                try:
                    decisions.append(future.result())
                except (ParseError, TransportError) as exc:
                    failures.append((unit_id, exc))
    if failures:
        unit_id, first = failures[0]
        raise MatchError(
            f"case {case.case_id}: {len(failures)} pair judgment(s) failed; "
            f"first failure on unit {unit_id}: {first}",
            decisions=decisions,
        )
    yes_ids = tuple(sorted(d.unit_id for d in decisions if d.verdict == "YES"))
    return MatchedSet(case_id=case.case_id, unit_ids=yes_ids, decisions=tuple(decisions))


def matched_set_to_obj(ms: MatchedSet) -> dict:
    return {
        "case_id": ms.case_id,
        "unit_ids": list(ms.unit_ids),
        "decisions": [
            {
                "unit_id": d.unit_id,
                "verdict": d.verdict,
                "mode": d.mode,
                "reason": d.reason,
                "raw_response": d.raw_response,
            }
            for d in ms.decisions
        ],
    }


def matched_set_from_obj(obj: dict) -> MatchedSet:
    try:
        case_id = obj["case_id"]
        decisions = tuple(
            MatchDecision(
                case_id=case_id,
                unit_id=d["unit_id"],
                verdict=d["verdict"],
                mode=d["mode"],
                reason=d.get("reason"),
                raw_response=d.get("raw_response", ""),
            )
            for d in obj["decisions"]
        )
        return MatchedSet(
            case_id=case_id, unit_ids=tuple(obj["unit_ids"]), decisions=decisions
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed matched-set object: {exc}") from exc
