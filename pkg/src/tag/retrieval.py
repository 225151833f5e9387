"""Embedding index construction and cosine top-k retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Chunk
from .errors import (
    DimensionMismatchError,
    EmptyIndexError,
    InvalidParams,
    IoError,
    ParseError,
    ValidationError,
    ZeroVectorError,
)
from .llm_gateway import EmbeddingVector, Gateway
from .rule_model import Rule, RuleSet

UNIT_KINDS = frozenset({"chunk", "rule"})


def chunk_unit_id(chunk_id: int) -> str:
    """Stable string id for a chunk; zero-padded so id order is numeric order."""
    return f"C-{chunk_id:03d}"


def rule_embedding_text(rule: Rule) -> str:
    """Embedded representation of a rule: name, condition, and action."""
    return f"{rule.rule_name}\n{rule.condition}\n{rule.action}"


def rule_units(rs: RuleSet) -> list[tuple[str, str]]:
    return [(rule.rule_id, rule_embedding_text(rule)) for rule in rs.rules]


def chunk_units(chunks: list[Chunk]) -> list[tuple[str, str]]:
    return [(chunk_unit_id(chunk.chunk_id), chunk.text) for chunk in chunks]


@dataclass(frozen=True)
class IndexEntry:
    unit_id: str
    text: str
    vector: tuple[float, ...]


@dataclass(frozen=True)
class SimilarityIndex:
    unit_kind: str
    entries: tuple[IndexEntry, ...]
    model_id: str

    def __post_init__(self):
        if self.unit_kind not in UNIT_KINDS:
            raise ValidationError(f"unknown unit_kind {self.unit_kind!r}")
        ids = [entry.unit_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate unit_id in index")
        dims = {len(entry.vector) for entry in self.entries}
        if len(dims) > 1:
            raise DimensionMismatchError(
                f"mixed vector dimensionalities in index: {sorted(dims)}"
            )


def build_index(
    units: list[tuple[str, str]], kind: str, gateway: Gateway
) -> SimilarityIndex:
    """Embed (unit_id, text) pairs into an immutable similarity index."""
    if not units:
        raise ValidationError("cannot build an index from zero units")
    ids = [unit_id for unit_id, _ in units]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate unit_id in index build input")
    texts = [text for _, text in units]
    vectors = gateway.embed(texts)
    entries = tuple(
        IndexEntry(unit_id=unit_id, text=text, vector=vec.values)
        for (unit_id, text), vec in zip(units, vectors)
    )
    return SimilarityIndex(
        unit_kind=kind, entries=entries, model_id=gateway.config.embedding_model_id
    )


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine similarity of two vectors in 64-bit float arithmetic."""
    a = np.asarray(u.values, dtype=np.float64)
    b = np.asarray(v.values, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimensions {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine undefined for the all-zero vector")
    return float(np.dot(a, b) / (na * nb))


def top_k(
    index: SimilarityIndex, query_vec: EmbeddingVector, k: int
) -> list[tuple[str, float]]:
    """Best k entries by cosine score, ties broken by ascending unit_id."""
    if k < 1:
        raise InvalidParams(f"k must be >= 1, got {k}")
    if not index.entries:
        raise EmptyIndexError("similarity index is empty")
    q = np.asarray(query_vec.values, dtype=np.float64)
    nq = float(np.linalg.norm(q))
    if nq == 0.0:
        raise ZeroVectorError("cosine undefined for the all-zero query")
    matrix = np.asarray([entry.vector for entry in index.entries], dtype=np.float64)
    if matrix.shape[1] != q.shape[0]:
        raise DimensionMismatchError(
            f"query dimension {q.shape[0]} vs index dimension {matrix.shape[1]}"
        )
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("index contains an all-zero vector")
    scores = matrix @ q / (norms * nq)
    ranked = sorted(
        zip((entry.unit_id for entry in index.entries), scores.tolist()),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return ranked[:k]


def save_index(index: SimilarityIndex, path: str) -> None:
    obj = {
        "unit_kind": index.unit_kind,
        "model_id": index.model_id,
        "entries": [
            {"unit_id": e.unit_id, "text": e.text, "vector": list(e.vector)}
            for e in index.entries
        ],
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write index {path!r}: {exc}") from exc


def load_index(path: str) -> SimilarityIndex:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read index {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"index {path!r} is not valid JSON: {exc}") from exc
    try:
        entries = tuple(
            IndexEntry(
                unit_id=e["unit_id"],
                text=e["text"],
                vector=tuple(float(v) for v in e["vector"]),
            )
            for e in obj["entries"]
        )
        return SimilarityIndex(
            unit_kind=obj["unit_kind"], entries=entries, model_id=obj["model_id"]
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed index object: {exc}") from exc
