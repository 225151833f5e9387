"""Documents, task cases, and fixed-size overlapping chunks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import (
    DuplicateIdError,
    EncodingError,
    InvalidParams,
    IoError,
    ParseError,
    ValidationError,
)

_RESERVED_CASE_KEYS = {"case_id", "input_text", "metadata", "gold"}


def normalize_text(text: str) -> str:
    """Unify line endings to LF; leave everything else byte-faithful."""
    return text.replace("\r\n", "\n").replace("\r", "\n")


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    domain_label: str = ""
    char_count: int = -1

    def __post_init__(self):
        if not self.text:
            raise ValidationError("empty document")
        if self.char_count == -1:
            object.__setattr__(self, "char_count", len(self.text))
        elif self.char_count != len(self.text):
            raise ValidationError(
                f"char_count {self.char_count} != text length {len(self.text)}"
            )


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    start_offset: int
    end_offset: int
    text: str

    def __post_init__(self):
        if self.end_offset - self.start_offset != len(self.text):
            raise ValidationError(
                f"chunk {self.chunk_id}: offsets span "
                f"{self.end_offset - self.start_offset} chars, text has {len(self.text)}"
            )


@dataclass(frozen=True)
class TaskCase:
    case_id: str
    input_text: str
    metadata: dict[str, str] = field(default_factory=dict)
    gold: dict | None = None


def load_document(path: str, doc_id: str, domain_label: str = "") -> Document:
    """Read a UTF-8 text file and normalize its line endings."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read document {path!r}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"document {path!r} is not valid UTF-8: {exc}") from exc
    text = normalize_text(text)
    if not text:
        raise ValidationError("empty document")
    return Document(doc_id=doc_id, text=text, domain_label=domain_label)


def chunk_document(doc: Document, chunk_size: int, overlap: int) -> list[Chunk]:
    """Slice a document into fixed-size chunks with a fixed overlap.

    Chunk i starts at i * (chunk_size - overlap); the final chunk is
    truncated at the end of the document and may be shorter than
    `overlap`. Offsets count Unicode scalar values, not bytes.
    """
    if chunk_size <= 0:
        raise InvalidParams(f"chunk_size must be positive, got {chunk_size}")
    if not 0 <= overlap < chunk_size:
        raise InvalidParams(
            f"overlap must satisfy 0 <= overlap < chunk_size, got {overlap}"
        )
    n = doc.char_count
    stride = chunk_size - overlap
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + chunk_size, n)
        chunks.append(
            Chunk(
                chunk_id=len(chunks),
                start_offset=start,
                end_offset=end,
                text=doc.text[start:end],
            )
        )
        if end == n:
            break
        start += stride
    return chunks


def _case_from_obj(obj: dict, line: int) -> TaskCase:
    if not isinstance(obj, dict):
        raise ParseError("case is not a JSON object", line=line)
    case_id = obj.get("case_id")
    if not isinstance(case_id, str) or not case_id:
        raise ParseError("missing or invalid case_id", line=line)
    input_text = obj.get("input_text")
    if not isinstance(input_text, str) or not input_text:
        raise ParseError("missing or invalid input_text", line=line)
    metadata: dict[str, str] = {}
    raw_meta = obj.get("metadata", {})
    if not isinstance(raw_meta, dict):
        raise ParseError("metadata is not an object", line=line)
    for key, value in raw_meta.items():
        metadata[str(key)] = value if isinstance(value, str) else json.dumps(value)
    # Unknown top-level keys are preserved in metadata.
    for key, value in obj.items():
        if key not in _RESERVED_CASE_KEYS:
            metadata[str(key)] = value if isinstance(value, str) else json.dumps(value)
    gold = obj.get("gold")
    if gold is not None and not isinstance(gold, dict):
        raise ParseError("gold is not an object", line=line)
    return TaskCase(case_id=case_id, input_text=input_text, metadata=metadata, gold=gold)


def load_cases(path: str) -> list[TaskCase]:
    """Load task cases from a JSONL file, preserving file order."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read case file {path!r}: {exc}") from exc
    cases: list[TaskCase] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
        case = _case_from_obj(obj, lineno)
        if case.case_id in seen:
            raise DuplicateIdError(f"duplicate case_id {case.case_id!r}", line=lineno)
        seen.add(case.case_id)
        cases.append(case)
    return cases


def save_cases(cases: list[TaskCase], path: str) -> None:
    """Write task cases as JSONL (inverse of load_cases)."""
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            obj: dict = {"case_id": case.case_id, "input_text": case.input_text}
            if case.metadata:
                obj["metadata"] = case.metadata
            if case.gold is not None:
                obj["gold"] = case.gold
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
