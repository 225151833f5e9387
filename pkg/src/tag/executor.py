"""Task execution: assemble the domain prompt, call the model, parse output."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence, Union

from .corpus import Chunk, TaskCase
from .errors import ParseError, ValidationError
from .llm_gateway import ChatRequest, Gateway
from .prompts import render_template
from .retrieval import chunk_unit_id
from .rule_model import Rule

DOMAINS = frozenset({"npov", "code", "nba"})
EXEC_MODES = frozenset({"rule", "chunk", "none"})

NO_REFERENCE_PLACEHOLDER = "(no reference material provided)"

ContextUnit = Union[Rule, Chunk]


@dataclass(frozen=True)
class NpovOutput:
    applied_rules: tuple[str, ...]
    reasoning: str
    rewrite: str


@dataclass(frozen=True)
class NbaOutput:
    answer: bool
    illegal_operation: str | None
    problematic_team: str | None
    rationale: str


@dataclass(frozen=True)
class CodeOutput:
    source_code: str


ParsedOutput = Union[NpovOutput, NbaOutput, CodeOutput]


@dataclass(frozen=True)
class ExecutionRecord:
    case_id: str
    method_id: str
    units_shown: tuple[str, ...]
    prompt_hash: str
    raw_output: str
    parsed: ParsedOutput | None
    parse_ok: bool


def render_reference(context: Sequence[ContextUnit], mode: str) -> str:
    """Reference block: action lines for rules, verbatim excerpts for chunks."""
    if mode == "none" or not context:
        return NO_REFERENCE_PLACEHOLDER
    if mode == "rule":
        rules = sorted(context, key=lambda rule: rule.rule_id)
        return "\n".join(f"{rule.rule_id}: {rule.action}" for rule in rules)
    if mode == "chunk":
        return "\n\n".join(chunk.text for chunk in context)
    raise ValidationError(f"unknown executor mode {mode!r}")


def _template_base(domain: str, mode: str) -> str:
    if domain == "npov":
        return "executor_npov_chunk" if mode == "chunk" else "executor_npov_rule"
    if domain == "code":
        return "executor_code"
    if domain == "nba":
        return "executor_nba"
    raise ValidationError(f"unknown domain {domain!r}")


def assemble_prompt(
    case: TaskCase,
    context: Sequence[ContextUnit],
    domain: str,
    mode: str,
    model_id: str,
) -> ChatRequest:
    """Build the executor request; rules contribute only their actions."""
    if domain not in DOMAINS:
        raise ValidationError(f"unknown domain {domain!r}")
    if mode not in EXEC_MODES:
        raise ValidationError(f"unknown executor mode {mode!r}")
    base = _template_base(domain, mode)
    reference = render_reference(context, mode)
    system = render_template(base + "_system")
    if domain == "npov":
        user = render_template(
            base + "_user", query=case.input_text, reference_rules=reference
        )
    elif domain == "code":
        user = render_template(
            base + "_user", prompt=case.input_text, reference_rules=reference
        )
    else:
        user = render_template(
            base + "_user", scenario=case.input_text, reference_rules=reference
        )
    return ChatRequest(
        model_id=model_id,
        system_message=system,
        user_message=user,
        request_tag=f"exec:{domain}",
    )


def prompt_hash(req: ChatRequest) -> str:
    payload = json.dumps(
        [req.model_id, req.system_message, req.user_message], ensure_ascii=False
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if not text.startswith("```"):
        return text
    lines = text.split("\n")[1:]
    if lines and lines[-1].strip().startswith("```"):
        lines = lines[:-1]
    return "\n".join(lines).strip()


def parse_npov(raw: str) -> NpovOutput:
    """Tolerant three-line parse; the last occurrence of each label wins."""
    applied_line: str | None = None
    reasoning_line: str | None = None
    rewrite_line: str | None = None
    for line in raw.splitlines():
        stripped = line.strip()
        lowered = stripped.lower()
        if lowered.startswith("applied rules:"):
            applied_line = stripped[len("applied rules:") :].strip()
        elif lowered.startswith("reasoning:"):
            reasoning_line = stripped[len("reasoning:") :].strip()
        elif lowered.startswith("rewrite:"):
            rewrite_line = stripped[len("rewrite:") :].strip()
    if rewrite_line is None:
        raise ParseError("no Rewrite line found in executor output")
    applied: tuple[str, ...] = ()
    if applied_line:
        applied = tuple(token.strip() for token in applied_line.split(",") if token.strip())
    return NpovOutput(
        applied_rules=applied,
        reasoning=reasoning_line or "",
        rewrite=rewrite_line,
    )


def parse_code(raw: str) -> CodeOutput:
    """Store source verbatim; fence stripping is the only transformation."""
    return CodeOutput(source_code=_strip_fences(raw))


def parse_nba(raw: str) -> NbaOutput:
    try:
        obj = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise ParseError(f"output is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseError("output is not a JSON object")
    answer = obj.get("answer")
    if not isinstance(answer, bool):
        raise ParseError(f"answer must be true or false, got {answer!r}")
    operation = obj.get("illegal_operation")
    if operation is not None and not isinstance(operation, str):
        raise ParseError("illegal_operation must be a string or null")
    team = obj.get("problematic_team")
    if team is not None and not isinstance(team, str):
        raise ParseError("problematic_team must be a string or null")
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        raise ParseError("rationale must be a string")
    return NbaOutput(
        answer=answer,
        illegal_operation=operation,
        problematic_team=team,
        rationale=rationale,
    )


def parse_output(raw: str, domain: str) -> ParsedOutput:
    if domain == "npov":
        return parse_npov(raw)
    if domain == "code":
        return parse_code(raw)
    if domain == "nba":
        return parse_nba(raw)
    raise ValidationError(f"unknown domain {domain!r}")


def units_shown_of(context: Sequence[ContextUnit], mode: str) -> tuple[str, ...]:
    if mode == "none" or not context:
        return ()
    if mode == "rule":
        return tuple(sorted(rule.rule_id for rule in context))
    return tuple(chunk_unit_id(chunk.chunk_id) for chunk in context)


def execute(
    case: TaskCase,
    context: Sequence[ContextUnit],
    domain: str,
    mode: str,
    gateway: Gateway,
    method_id: str,
) -> ExecutionRecord:
    """One prompt, one completion; parse failures are recorded, not raised."""
    req = assemble_prompt(case, context, domain, mode, gateway.config.model_id)
    raw = gateway.complete(req)
    try:
        parsed: ParsedOutput | None = parse_output(raw, domain)
        parse_ok = True
    except ParseError:
        parsed = None
        parse_ok = False
    return ExecutionRecord(
        case_id=case.case_id,
        method_id=method_id,
        units_shown=units_shown_of(context, mode),
        prompt_hash=prompt_hash(req),
        raw_output=raw,
        parsed=parsed,
        parse_ok=parse_ok,
    )


def _parsed_to_obj(parsed: ParsedOutput | None) -> dict | None:
    if parsed is None:
        return None
    if isinstance(parsed, NpovOutput):
        return {
            "kind": "npov",
            "applied_rules": list(parsed.applied_rules),
            "reasoning": parsed.reasoning,
            "rewrite": parsed.rewrite,
        }
    if isinstance(parsed, NbaOutput):
        return {
            "kind": "nba",
            "answer": parsed.answer,
            "illegal_operation": parsed.illegal_operation,
            "problematic_team": parsed.problematic_team,
            "rationale": parsed.rationale,
        }
    return {"kind": "code", "source_code": parsed.source_code}


def _parsed_from_obj(obj: dict | None) -> ParsedOutput | None:
    if obj is None:
        return None
    kind = obj.get("kind")
    if kind == "npov":
        return NpovOutput(
            applied_rules=tuple(obj["applied_rules"]),
            reasoning=obj["reasoning"],
            rewrite=obj["rewrite"],
        )
    if kind == "nba":
        return NbaOutput(
            answer=obj["answer"],
            illegal_operation=obj["illegal_operation"],
            problematic_team=obj["problematic_team"],
            rationale=obj["rationale"],
        )
    if kind == "code":
        return CodeOutput(source_code=obj["source_code"])
    raise ParseError(f"unknown parsed-output kind {kind!r}")


def record_to_obj(record: ExecutionRecord) -> dict:
    return {
        "case_id": record.case_id,
        "method_id": record.method_id,
        "units_shown": list(record.units_shown),
        "prompt_hash": record.prompt_hash,
        "raw_output": record.raw_output,
        "parsed": _parsed_to_obj(record.parsed),
        "parse_ok": record.parse_ok,
    }


def record_from_obj(obj: dict) -> ExecutionRecord:
    try:
        return ExecutionRecord(
            case_id=obj["case_id"],
            method_id=obj["method_id"],
            units_shown=tuple(obj["units_shown"]),
            prompt_hash=obj["prompt_hash"],
            raw_output=obj["raw_output"],
            parsed=_parsed_from_obj(obj.get("parsed")),
            parse_ok=bool(obj["parse_ok"]),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed execution record: {exc}") from exc
