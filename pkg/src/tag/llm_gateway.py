"""Single choke-point for chat completions and embeddings, with caching."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import (
    DimensionMismatchError,
    ScriptError,
    TransportError,
    ValidationError,
)

API_KEY_ENV = "TAG_API_KEY"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_message: str
    user_message: str
    temperature: float = 0.0
    max_output_tokens: int = 4096
    request_tag: str = ""


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str


@dataclass(frozen=True)
class GatewayConfig:
    model_id: str = "executor-model"
    matcher_model_id: str = "matcher-model"
    judge_model_id: str = "judge-model"
    embedding_model_id: str = "embedding-model"
    endpoint_url: str = ""
    max_parallel_requests: int = 4


class Provider(Protocol):
    def chat(self, req: ChatRequest) -> str: ...

    def embed(self, model_id: str, texts: list[str]) -> list[tuple[float, ...]]: ...


@dataclass(frozen=True)
class ScriptEntry:
    """One canned response; matches on request_tag and/or substrings."""

    response: str
    request_tag: str | None = None
    patterns: tuple[str, ...] = ()

    def matches(self, req: ChatRequest) -> bool:
        if self.request_tag is not None and self.request_tag != req.request_tag:
            return False
        combined = req.system_message + "\n" + req.user_message
        return all(pattern in combined for pattern in self.patterns)


@dataclass(frozen=True)
class ProviderScript:
    entries: tuple[ScriptEntry, ...] = ()
    embedding_table: dict[str, tuple[float, ...]] = field(default_factory=dict)
    default_embedding_dim: int | None = None


def _hash_vector(model_id: str, text: str, dim: int) -> tuple[float, ...]:
    """Deterministic unit-norm vector derived from a content hash."""
    values: list[float] = []
    counter = 0
    while len(values) < dim:
        digest = hashlib.sha256(
            f"{model_id}\x00{text}\x00{counter}".encode("utf-8")
        ).digest()
        values.extend(b / 255.0 - 0.5 for b in digest)
        counter += 1
    values = values[:dim]
    norm = sum(v * v for v in values) ** 0.5
    if norm == 0.0:
        values[0] = 1.0
        norm = 1.0
    return tuple(v / norm for v in values)


class ScriptedProvider:
    """Deterministic replay provider; first matching entry wins."""

    def __init__(self, script: ProviderScript):
        self.script = script
        self.chat_calls: list[ChatRequest] = []
        self.embed_calls: list[tuple[str, str]] = []

    def chat(self, req: ChatRequest) -> str:
        self.chat_calls.append(req)
        for entry in self.script.entries:
            if entry.matches(req):
                return entry.response
        snippet = req.user_message[:160].replace("\n", " ")
        raise ScriptError(
            f"no script entry matches request_tag={req.request_tag!r}, user={snippet!r}"
        )

    def embed(self, model_id: str, texts: list[str]) -> list[tuple[float, ...]]:
        out: list[tuple[float, ...]] = []
        for text in texts:
            self.embed_calls.append((model_id, text))
            vector = self.script.embedding_table.get(text)
            if vector is None:
                if self.script.default_embedding_dim is None:
                    snippet = text[:80].replace("\n", " ")
                    raise ScriptError(f"no scripted embedding for text {snippet!r}")
                vector = _hash_vector(model_id, text, self.script.default_embedding_dim)
            out.append(tuple(float(v) for v in vector))
        return out


class HttpProvider:
    """OpenAI-style HTTP endpoint: /chat/completions and /embeddings."""

    def __init__(self, endpoint_url: str, api_key: str | None = None, timeout: float = 120.0):
        if not endpoint_url:
            raise ValidationError("endpoint_url is required for the HTTP provider")
        self.endpoint_url = endpoint_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, path: str, payload: dict, request_tag: str) -> dict:
        import requests

        try:
            resp = requests.post(
                self.endpoint_url + path,
                json=payload,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}", request_tag=request_tag) from exc
        if resp.status_code >= 500:
            raise TransportError(
                f"server error {resp.status_code}", request_tag=request_tag
            )
        if resp.status_code != 200:
            err = TransportError(
                f"endpoint returned {resp.status_code}: {resp.text[:200]}",
                request_tag=request_tag,
            )
            err.retryable = False
            raise err
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(
                f"non-JSON response: {exc}", request_tag=request_tag
            ) from exc

    def chat(self, req: ChatRequest) -> str:
        payload = {
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_message},
                {"role": "user", "content": req.user_message},
            ],
            "temperature": req.temperature,
            "top_p": 1.0,
            "max_tokens": req.max_output_tokens,
        }
        body = self._post("/chat/completions", payload, req.request_tag)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(
                f"malformed completion payload: {exc}", request_tag=req.request_tag
            ) from exc

    def embed(self, model_id: str, texts: list[str]) -> list[tuple[float, ...]]:
        body = self._post("/embeddings", {"model": model_id, "input": texts}, "embed")
        try:
            rows = sorted(body["data"], key=lambda row: row["index"])
            return [tuple(float(v) for v in row["embedding"]) for row in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError(
                f"malformed embedding payload: {exc}", request_tag="embed"
            ) from exc


def _chat_key(req: ChatRequest) -> str:
    payload = json.dumps(
        [req.model_id, req.system_message, req.user_message, req.temperature, req.max_output_tokens],
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _embed_key(model_id: str, text: str) -> str:
    payload = json.dumps(["embed", model_id, text], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Gateway:
    """Caches, retries, and logs every model call in one place.

    The cache is content-addressed over (model_id, system, user,
    temperature, max tokens) and optionally persisted under
    `<run_dir>/cache/` so interrupted runs resume without re-spending
    upstream calls.
    """

    def __init__(
        self,
        provider: Provider,
        config: GatewayConfig | None = None,
        cache_dir: str | None = None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        log: Callable[[dict], None] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.config = config or GatewayConfig()
        self.cache_dir = cache_dir
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._log_fn = log
        self._sleep = sleep
        self._mem: dict[str, str] = {}
        self._mem_vectors: dict[str, tuple[float, ...]] = {}
        self._inflight: dict[str, threading.Event] = {}
        self._lock = threading.Lock()
        self.upstream_chat_calls = 0
        self.upstream_embed_calls = 0
        self.cache_hits = 0
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    def _log(self, record: dict) -> None:
        if self._log_fn is not None:
            self._log_fn(record)

    def _disk_path(self, key: str) -> str:
        assert self.cache_dir is not None
        return os.path.join(self.cache_dir, key + ".json")

    def _disk_read(self, key: str) -> dict | None:
        if not self.cache_dir:
            return None
        path = self._disk_path(key)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def _disk_write(self, key: str, payload: dict) -> None:
        if not self.cache_dir:
            return
        path = self._disk_path(key)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, ensure_ascii=False)
        os.replace(tmp, path)

    def _call_with_retries(self, req: ChatRequest) -> str:
        last: TransportError | None = None
        for attempt in range(self.max_attempts):
            try:
                return self.provider.chat(req)
            except TransportError as exc:
                if not getattr(exc, "retryable", True):
                    raise TransportError(str(exc), request_tag=req.request_tag) from exc
                last = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(self.backoff * (2**attempt))
        raise TransportError(
            f"gave up after {self.max_attempts} attempts: {last}",
            request_tag=req.request_tag,
        )

    def complete(self, req: ChatRequest) -> str:
        """Return raw model text; identical requests are served from cache."""
        key = _chat_key(req)
        while True:
            with self._lock:
                if key in self._mem:
                    self.cache_hits += 1
                    self._log(
                        {"event": "chat", "request_tag": req.request_tag, "cache_hit": True}
                    )
                    return self._mem[key]
                stored = self._disk_read(key)
                if stored is not None:
                    self._mem[key] = stored["response"]
                    self.cache_hits += 1
                    self._log(
                        {"event": "chat", "request_tag": req.request_tag, "cache_hit": True}
                    )
                    return stored["response"]
                event = self._inflight.get(key)
                if event is None:
                    self._inflight[key] = threading.Event()
                    break
            event.wait()
        try:
            text = self._call_with_retries(req)
            with self._lock:
                self.upstream_chat_calls += 1
                self._mem[key] = text
                self._disk_write(
                    key,
                    {
                        "kind": "chat",
                        "model_id": req.model_id,
                        "request_tag": req.request_tag,
                        "response": text,
                    },
                )
        finally:
            with self._lock:
                done = self._inflight.pop(key)
            done.set()
        self._log({"event": "chat", "request_tag": req.request_tag, "cache_hit": False})
        return text

    def embed(self, texts: list[str], model_id: str | None = None) -> list[EmbeddingVector]:
        """Embed texts in order; per-(model, text) results are cached."""
        if not texts:
            raise ValidationError("embed requires at least one text")
        model = model_id or self.config.embedding_model_id
        with self._lock:
            keys = [_embed_key(model, text) for text in texts]
            resolved: dict[str, tuple[float, ...]] = {}
            misses: list[str] = []
            for key, text in zip(keys, texts):
                if key in self._mem_vectors:
                    resolved[key] = self._mem_vectors[key]
                    continue
                stored = self._disk_read(key)
                if stored is not None:
                    vector = tuple(float(v) for v in stored["values"])
                    self._mem_vectors[key] = vector
                    resolved[key] = vector
                elif text not in misses:
                    misses.append(text)
            if misses:
                vectors = self.provider.embed(model, misses)
                self.upstream_embed_calls += 1
                if len(vectors) != len(misses):
                    raise TransportError(
                        f"embedding count mismatch: sent {len(misses)}, got {len(vectors)}",
                        request_tag="embed",
                    )
                for text, vector in zip(misses, vectors):
                    key = _embed_key(model, text)
                    self._mem_vectors[key] = vector
                    resolved[key] = vector
                    self._disk_write(
                        key, {"kind": "embedding", "model_id": model, "values": list(vector)}
                    )
            out = [EmbeddingVector(values=resolved[key], model_id=model) for key in keys]
        dims = {len(vec.values) for vec in out}
        if len(dims) > 1:
            raise DimensionMismatchError(f"mixed embedding dimensionalities {sorted(dims)}")
        self._log({"event": "embed", "count": len(texts), "misses": len(misses)})
        return out
