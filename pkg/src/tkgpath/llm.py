"""Text generation / embedding / editing backends behind one gateway.

The remote backend speaks the OpenAI-compatible ``/chat/completions`` and ``/embeddings``
JSON protocol. The offline backend is deterministic and needs no network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    pass


class BackendError(RuntimeError):
    pass


class ConsistencyError(RuntimeError):
    pass


def estimate_tokens(text: str) -> int:
    """Offline token estimate: ceil(utf-8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass
class BackendConfig:
    backend: str = "offline"  # offline | remote
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    generate_model: str = "glm-4-flash"
    embed_model: str = "text-embedding-v3"
    edit_model: str = "deepseek-v3"
    max_attempts: int = 3
    backoff: float = 1.0
    concurrency: int = 4
    cache_dir: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    offline_embed_dim: int = 64

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency cap must be >= 1")
        if self.backend not in ("offline", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class LlmRequest:
    messages: list[dict]
    model: str
    temperature: float = 0.0
    max_tokens: int = 1024


@dataclass
class LlmResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    cached: bool = False


@dataclass
class Usage:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cache_hits: int = 0
    network_calls: int = 0


_LABEL_LINE = re.compile(r'^Label:\s*"(.*)"\s*$', re.MULTILINE)
_KIND_LINE = re.compile(r"^Kind:\s*(\S+)\s*$", re.MULTILINE)


def offline_description(prompt: str) -> str:
    """Fixed-template description derived only from the prompt's label/kind lines."""
    label_m = _LABEL_LINE.search(prompt)
    kind_m = _KIND_LINE.search(prompt)
    name = label_m.group(1) if label_m else prompt.strip().splitlines()[0][:80]
    kind = kind_m.group(1) if kind_m else "entity"
    if kind == "relation":
        return f"Relation {name}: the subject performs '{name}' toward the object in a recorded event."
    if kind == "inverse-relation":
        return f"Relation {name} (passive form): the subject is the target of '{name}' performed by the object."
    return f"Entity {name}: {name} is an actor in recorded events."


def offline_embedding(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class Gateway:
    """Thread-safe client with a content-hash cache and a bounded number of in-flight requests."""

    def __init__(
        self,
        config: BackendConfig | None = None,
        transport: httpx.BaseTransport | None = None,
        edit_rules: Callable[[str], str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config or BackendConfig()
        self.edit_rules = edit_rules
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(self.config.concurrency)
        self._lock = threading.Lock()
        self.usage = Usage()
        self.in_flight = 0
        self.max_in_flight = 0
        self.embed_dim: int | None = None
        self._client: httpx.Client | None = None
        self._transport = transport

    @property
    def backend_id(self) -> str:
        return self.config.backend

    # -- plumbing -------------------------------------------------------------

    def _http(self) -> httpx.Client:
        if self._client is None:
            key = os.environ.get(self.config.api_key_env, "")
            headers = {"Authorization": f"Bearer {key}"} if key else {}
            self._client = httpx.Client(
                base_url=self.config.endpoint.rstrip("/"),
                headers=headers,
                timeout=self.config.timeout,
                transport=self._transport,
            )
        return self._client

    def cache_key(self, model: str, payload: str) -> str:
        h = hashlib.sha256()
        h.update(self.backend_id.encode("utf-8") + b"\0" + model.encode("utf-8") + b"\0")
        h.update(payload.encode("utf-8"))
        return h.hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        if not self.config.cache_dir:
            return None
        return Path(self.config.cache_dir) / self.backend_id / f"{key}.json"

    def _cache_get(self, key: str) -> dict | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _cache_put(self, key: str, body: dict) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(body, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    def _enter(self) -> None:
        self._sem.acquire()
        with self._lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def _exit(self) -> None:
        with self._lock:
            self.in_flight -= 1
        self._sem.release()

    def _post(self, path: str, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            try:
                with self._lock:
                    self.usage.network_calls += 1
                resp = self._http().post(path, json=body)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (httpx.HTTPError, TransportError, json.JSONDecodeError) as exc:
                last = exc
                logger.warning("request to %s failed (attempt %d): %s", path, attempt + 1, exc)
                if attempt + 1 < self.config.max_attempts:
                    self._sleep(self.config.backoff * (2**attempt))
        raise TransportError(f"{path} failed after {self.config.max_attempts} attempts: {last}")

    def _record(self, resp: LlmResponse) -> None:
        with self._lock:
            self.usage.requests += 1
            self.usage.prompt_tokens += resp.prompt_tokens
            self.usage.completion_tokens += resp.completion_tokens
            if resp.cached:
                self.usage.cache_hits += 1

    # -- chat -----------------------------------------------------------------

    def complete(self, request: LlmRequest, offline_reply: Callable[[str], str]) -> LlmResponse:
        prompt = "\n".join(m["content"] for m in request.messages)
        key = self.cache_key(request.model, prompt)
        hit = self._cache_get(key)
        if hit is not None:
            resp = LlmResponse(hit["text"], hit["prompt_tokens"], hit["completion_tokens"], 0.0, True)
            self._record(resp)
            return resp
        self._enter()
        try:
            start = time.perf_counter()
            if self.config.backend == "offline":
                text = offline_reply(prompt)
                resp = LlmResponse(text, estimate_tokens(prompt), estimate_tokens(text))
            else:
                body = self._post(
                    "/chat/completions",
                    {
                        "model": request.model,
                        "messages": request.messages,
                        "temperature": request.temperature,
                        "max_tokens": request.max_tokens,
                    },
                )
                try:
                    text = body["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError):
                    raise BackendError(f"malformed completion body: {str(body)[:200]}") from None
                usage = body.get("usage") or {}
                resp = LlmResponse(
                    text or "",
                    int(usage.get("prompt_tokens", estimate_tokens(prompt))),
                    int(usage.get("completion_tokens", estimate_tokens(text or ""))),
                )
            resp.latency = time.perf_counter() - start
        finally:
            self._exit()
        if not resp.text:
            raise BackendError("empty completion")
        self._cache_put(
            key, {"text": resp.text, "prompt_tokens": resp.prompt_tokens, "completion_tokens": resp.completion_tokens}
        )
        self._record(resp)
        return resp

    def generate(self, prompt: str) -> str:
        req = LlmRequest(
            [{"role": "user", "content": prompt}],
            self.config.generate_model,
            self.config.temperature,
            self.config.max_tokens,
        )
        return self.complete(req, offline_description).text

    def chat_edit(self, prompt: str) -> str:
        req = LlmRequest(
            [{"role": "user", "content": prompt}],
            self.config.edit_model,
            0.0,
            self.config.max_tokens,
        )
        return self.chat_edit_response(req).text

    def chat_edit_response(self, request: LlmRequest) -> LlmResponse:
        rules = self.edit_rules or (lambda _prompt: "[]")
        return self.complete(request, rules)

    # -- embeddings -------------------------------------------------------------

    def embed(self, texts: list[str], batch_size: int = 64) -> np.ndarray:
        if not texts:
            raise ValueError("embed: texts must be non-empty")
        model = self.config.embed_model
        rows: list[np.ndarray | None] = [None] * len(texts)
        missing = []
        for i, text in enumerate(texts):
            hit = self._cache_get(self.cache_key(model, text))
            if hit is not None:
                rows[i] = np.asarray(hit["embedding"], dtype=np.float64)
                with self._lock:
                    self.usage.cache_hits += 1
            else:
                missing.append(i)
        for start in range(0, len(missing), batch_size):
            chunk = missing[start : start + batch_size]
            vectors = self._embed_batch([texts[i] for i in chunk])
            for i, vec in zip(chunk, vectors):
                rows[i] = vec
                self._cache_put(self.cache_key(model, texts[i]), {"embedding": vec.tolist()})
        dims = {r.shape[0] for r in rows}
        if len(dims) != 1 or (self.embed_dim is not None and dims != {self.embed_dim}):
            raise ConsistencyError(f"embedding dimension drift: {sorted(dims)} vs {self.embed_dim}")
        self.embed_dim = dims.pop()
        return np.stack(rows)

    def _embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        self._enter()
        try:
            if self.config.backend == "offline":
                out = [offline_embedding(t, self.config.offline_embed_dim) for t in texts]
                tokens = sum(estimate_tokens(t) for t in texts)
            else:
                body = self._post("/embeddings", {"model": self.config.embed_model, "input": texts})
                try:
                    data = sorted(body["data"], key=lambda d: d.get("index", 0))
                    out = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
                except (KeyError, TypeError):
                    raise BackendError(f"malformed embeddings body: {str(body)[:200]}") from None
                if len(out) != len(texts):
                    raise BackendError(f"expected {len(texts)} embeddings, got {len(out)}")
                tokens = int((body.get("usage") or {}).get("prompt_tokens", 0))
        finally:
            self._exit()
        dims = {v.shape[0] for v in out}
        if len(dims) != 1:
            raise ConsistencyError(f"embedding dimension drift inside a batch: {sorted(dims)}")
        with self._lock:
            self.usage.requests += 1
            self.usage.prompt_tokens += tokens
        return out

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None
