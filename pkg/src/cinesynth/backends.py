"""Uniform client layer for chat, embedding, and image services.

Every backend comes in two flavors: an HTTP client speaking a minimal JSON
contract, and a deterministic mock for offline runs and tests. Mocks are
pure functions of (script, request), so a pipeline driven by mocks is
replayable byte for byte. A content-addressed response cache can wrap any
client; cached calls perform zero backend work, observable via call
counters.
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import (
    BackendUnavailable,
    ConfigError,
    ContractViolation,
    InvalidRequest,
    MockScriptMiss,
)
from .util import atomic_write_bytes, content_hash, sha256_hex

VALID_ROLES = ("system", "user", "assistant")


# ---------------------------------------------------------------------------
# request / response values


@dataclass
class ChatRequest:
    model_name: str
    messages: list
    temperature: float = 0.7
    seed: int | None = None
    max_tokens: int = 2048

    def validate(self) -> None:
        if not self.messages:
            raise InvalidRequest("chat request has no messages")
        for m in self.messages:
            if m.get("role") not in VALID_ROLES:
                raise InvalidRequest(f"bad message role {m.get('role')!r}")
            if not isinstance(m.get("content"), str):
                raise InvalidRequest("message content must be text")
        if self.messages[-1]["role"] != "user":
            raise InvalidRequest("last message must come from the user")
        if self.temperature < 0:
            raise InvalidRequest("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise InvalidRequest("max_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "messages": [{"role": m["role"], "content": m["content"]} for m in self.messages],
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }

    def last_user_content(self) -> str:
        return self.messages[-1]["content"]


@dataclass
class EmbeddingVector:
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.dim:
            raise ContractViolation(
                f"embedding has {self.values.shape} values, declared dim {self.dim}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("embedding contains non-finite values")


@dataclass
class EmbeddingRequest:
    modality: str  # "text" | "image"
    payload: object  # str for text, bytes for image

    def validate(self) -> None:
        if self.modality not in ("text", "image"):
            raise InvalidRequest(f"unknown embedding modality {self.modality!r}")
        if self.modality == "text":
            if not isinstance(self.payload, str) or not self.payload:
                raise InvalidRequest("text embedding requires non-empty text")
        else:
            if not isinstance(self.payload, (bytes, bytearray)) or not self.payload:
                raise InvalidRequest("image embedding requires non-empty bytes")

    def to_dict(self) -> dict:
        if self.modality == "image":
            payload = base64.b64encode(bytes(self.payload)).decode("ascii")
        else:
            payload = self.payload
        return {"modality": self.modality, "payload": payload}


@dataclass
class ImageRequest:
    prompt: str
    seed: int
    width: int
    height: int
    negative_prompt: str | None = None
    style_embedding_ref: str | None = None

    def validate(self, min_size: int = 64, max_size: int = 2048) -> None:
        if not self.prompt:
            raise InvalidRequest("image prompt is empty")
        for label, v in (("width", self.width), ("height", self.height)):
            if v <= 0:
                raise InvalidRequest(f"{label} must be positive")
            if v % 8 != 0:
                raise InvalidRequest(f"{label} must be a multiple of 8")
            if not (min_size <= v <= max_size):
                raise InvalidRequest(
                    f"{label} {v} outside configured bounds [{min_size}, {max_size}]"
                )

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "style_embedding_ref": self.style_embedding_ref,
        }


@dataclass
class BackendConfig:
    kind: str  # "http" | "mock"
    endpoint: str = ""
    auth_env: str = ""
    max_attempts: int = 3
    backoff: float = 0.5
    rate_limit: float = 0.0  # requests/sec, 0 = unlimited
    script_path: str = ""
    embedding_dim: int = 512
    image_min_size: int = 64
    image_max_size: int = 2048
    timeout: float = 30.0

    def validate(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ConfigError(f"backend kind must be http or mock, got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigError("http backend requires an endpoint")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.rate_limit < 0 or self.backoff < 0:
            raise ConfigError("rate_limit and backoff must be >= 0")


def cache_key(backend_id: str, request) -> str:
    """Hash of (backend id, full request); model name rides inside the request."""
    return content_hash({"backend": backend_id, "request": request.to_dict()})


# ---------------------------------------------------------------------------
# shared plumbing


class RateLimiter:
    """Spaces request starts at least 1/rate apart. Injectable clock for tests."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = (1.0 / rate) if rate > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next_at = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            if self._next_at is None or now >= self._next_at:
                self._next_at = now + self.min_interval
                return
            wait = self._next_at - now
            self._next_at += self.min_interval
        self._sleep(wait)


class MockClock:
    """Virtual time for rate-limit tests; sleeping advances it."""

    def __init__(self):
        self.now = 0.0
        self._lock = threading.Lock()

    def time(self) -> float:
        with self._lock:
            return self.now

    def sleep(self, dt: float) -> None:
        with self._lock:
            self.now += dt


class ResponseCache:
    """Request-keyed byte cache; files named by cache key, written atomically."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / key

    def get(self, key: str):
        path = self._path(key)
        if path.exists():
            return path.read_bytes()
        return None

    def put(self, key: str, data: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, data)


class _Counter:
    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def bump(self) -> None:
        with self._lock:
            self._n += 1

    @property
    def value(self) -> int:
        with self._lock:
            return self._n


# ---------------------------------------------------------------------------
# mock backends


class MockChatBackend:
    """Replays a scripted conversation table.

    The script is an ordered list of {match, response}; `match` is tested as
    a substring of the last user message and the first hit wins. A miss is a
    test bug, not a runtime condition, so it raises immediately.
    """

    def __init__(self, script_path, rate_limiter: RateLimiter | None = None):
        self.script_path = Path(script_path)
        if not self.script_path.exists():
            raise ConfigError(f"mock chat script not found: {script_path}")
        entries = json.loads(self.script_path.read_text(encoding="utf-8"))
        if not isinstance(entries, list):
            raise ConfigError("mock chat script must be a JSON list")
        for e in entries:
            if not isinstance(e, dict) or "match" not in e or "response" not in e:
                raise ConfigError("each script entry needs 'match' and 'response'")
            if not isinstance(e["match"], str) or not isinstance(e["response"], str):
                raise ConfigError("script 'match' and 'response' must be strings")
        self.entries = entries
        self.backend_id = f"mock-chat:{self.script_path.name}"
        self.calls = _Counter()
        self._limiter = rate_limiter or RateLimiter(0)

    def chat(self, req: ChatRequest) -> str:
        req.validate()
        self._limiter.acquire()
        self.calls.bump()
        last = req.last_user_content()
        for entry in self.entries:
            if entry["match"] in last:
                return entry["response"]
        raise MockScriptMiss(
            f"no script entry in {self.script_path.name} matches request; "
            f"last user message starts: {last[:160]!r}"
        )


class MockEmbeddingBackend:
    """Deterministic keyed-hash embeddings.

    Algorithm: blake2b(payload bytes, person=modality) -> 64-bit seed -> PCG64
    standard normal draw of `dim` values -> unit normalization. Stable across
    processes and platforms; distinct payloads give (almost surely) distinct
    directions.
    """

    def __init__(self, dim: int = 512, rate_limiter: RateLimiter | None = None):
        if dim <= 0:
            raise ConfigError("embedding dim must be positive")
        self.dim = dim
        self.backend_id = f"mock-embed:{dim}"
        self.calls = _Counter()
        self._limiter = rate_limiter or RateLimiter(0)

    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        req.validate()
        self._limiter.acquire()
        self.calls.bump()
        payload = req.payload.encode("utf-8") if req.modality == "text" else bytes(req.payload)
        import hashlib

        digest = hashlib.blake2b(
            payload, digest_size=8, person=req.modality.encode("ascii")
        ).digest()
        seed = int.from_bytes(digest, "big")
        rng = np.random.Generator(np.random.PCG64(seed))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        return EmbeddingVector(values=v, dim=self.dim)


class MockImageBackend:
    """Procedural PNG renderer.

    Pixels derive only from the request: a two-corner gradient seeded by the
    request seed, plus a 4x4 grid of blocks colored from a hash of the prompt
    (and style ref when present). Same request, same bytes.
    """

    def __init__(
        self,
        min_size: int = 64,
        max_size: int = 2048,
        rate_limiter: RateLimiter | None = None,
    ):
        self.min_size = min_size
        self.max_size = max_size
        self.backend_id = "mock-image"
        self.calls = _Counter()
        self._limiter = rate_limiter or RateLimiter(0)

    def generate_image(self, req: ImageRequest):
        req.validate(self.min_size, self.max_size)
        self._limiter.acquire()
        self.calls.bump()
        import hashlib

        key = content_hash(req.to_dict()).encode("ascii")
        digest = hashlib.blake2b(key, digest_size=8).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))

        w, h = req.width, req.height
        c0 = rng.integers(0, 256, size=3).astype(np.float64)
        c1 = rng.integers(0, 256, size=3).astype(np.float64)
        ty = np.linspace(0.0, 1.0, h)[:, None, None]
        tx = np.linspace(0.0, 1.0, w)[None, :, None]
        t = (ty + tx) * 0.5
        pixels = c0 * (1.0 - t) + c1 * t

        grid = 4
        bh, bw = h // grid, w // grid
        for gy in range(grid):
            for gx in range(grid):
                color = rng.integers(0, 256, size=3).astype(np.float64)
                y0, x0 = gy * bh, gx * bw
                patch = pixels[y0 : y0 + bh, x0 : x0 + bw]
                patch += (color - patch) * 0.35

        arr = np.clip(pixels, 0, 255).astype(np.uint8)
        img = Image.fromarray(arr, mode="RGB")
        buf = io.BytesIO()
        img.save(buf, format="PNG", optimize=False)
        data = buf.getvalue()
        return data, sha256_hex(data)


# ---------------------------------------------------------------------------
# http backends


def _auth_headers(config: BackendConfig) -> dict:
    if not config.auth_env:
        return {}
    token = os.environ.get(config.auth_env)
    if token is None:
        raise ConfigError(f"auth env var {config.auth_env} is not set")
    return {"Authorization": f"Bearer {token}"}


class _HttpBase:
    def __init__(self, config: BackendConfig, session=None, clock=time.monotonic, sleep=time.sleep):
        config.validate()
        if config.kind != "http":
            raise ConfigError("http client requires kind=http")
        self.config = config
        self.session = session or requests.Session()
        self.backend_id = f"http:{config.endpoint}"
        self.calls = _Counter()
        self._sleep = sleep
        self._limiter = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)

    def _post(self, body: dict):
        headers = _auth_headers(self.config)
        last_error = None
        for attempt in range(1, self.config.max_attempts + 1):
            self._limiter.acquire()
            self.calls.bump()
            try:
                resp = self.session.post(
                    self.config.endpoint,
                    json=body,
                    headers=headers,
                    timeout=self.config.timeout,
                )
                resp.raise_for_status()
                return resp
            except requests.RequestException as e:
                last_error = e
                if attempt < self.config.max_attempts:
                    self._sleep(self.config.backoff * (2 ** (attempt - 1)))
        raise BackendUnavailable(
            f"{self.config.endpoint}: {last_error} "
            f"(after {self.config.max_attempts} attempts)"
        )


class HttpChatBackend(_HttpBase):
    def chat(self, req: ChatRequest) -> str:
        req.validate()
        body = {
            "model": req.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        resp = self._post(body)
        try:
            text = resp.json()["text"]
        except (ValueError, KeyError) as e:
            raise ContractViolation(f"chat endpoint returned malformed body: {e}")
        if not isinstance(text, str):
            raise ContractViolation("chat endpoint 'text' field is not a string")
        return text


class HttpEmbeddingBackend(_HttpBase):
    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        req.validate()
        resp = self._post(req.to_dict())
        try:
            vector = resp.json()["vector"]
        except (ValueError, KeyError) as e:
            raise ContractViolation(f"embedding endpoint returned malformed body: {e}")
        values = np.asarray(vector, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.config.embedding_dim:
            raise ContractViolation(
                f"embedding endpoint returned dim {values.shape}, "
                f"configured {self.config.embedding_dim}"
            )
        return EmbeddingVector(values=values, dim=self.config.embedding_dim)


PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class HttpImageBackend(_HttpBase):
    def generate_image(self, req: ImageRequest):
        req.validate(self.config.image_min_size, self.config.image_max_size)
        resp = self._post(req.to_dict())
        data = resp.content
        if not data.startswith(PNG_MAGIC):
            raise ContractViolation("image endpoint did not return a PNG body")
        return data, sha256_hex(data)


# ---------------------------------------------------------------------------
# caching wrappers


class CachedChat:
    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    @property
    def calls(self):
        return self.inner.calls

    def chat(self, req: ChatRequest) -> str:
        key = cache_key(self.backend_id, req)
        hit = self.cache.get(key)
        if hit is not None:
            return hit.decode("utf-8")
        out = self.inner.chat(req)
        self.cache.put(key, out.encode("utf-8"))
        return out


class CachedEmbedding:
    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    @property
    def calls(self):
        return self.inner.calls

    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        key = cache_key(self.backend_id, req)
        hit = self.cache.get(key)
        if hit is not None:
            values = json.loads(hit.decode("ascii"))
            return EmbeddingVector(values=np.asarray(values), dim=len(values))
        out = self.inner.embed(req)
        # repr-based float serialization round-trips float64 exactly
        self.cache.put(key, json.dumps(out.values.tolist()).encode("ascii"))
        return out


class CachedImage:
    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    @property
    def calls(self):
        return self.inner.calls

    def generate_image(self, req: ImageRequest):
        key = cache_key(self.backend_id, req)
        hit = self.cache.get(key)
        if hit is not None:
            return hit, sha256_hex(hit)
        data, digest = self.inner.generate_image(req)
        self.cache.put(key, data)
        return data, digest


# ---------------------------------------------------------------------------
# factories


def make_chat_backend(config: BackendConfig, cache: ResponseCache | None = None,
                      clock=time.monotonic, sleep=time.sleep):
    config.validate()
    if config.kind == "mock":
        if not config.script_path:
            raise ConfigError("mock chat backend requires a script path")
        limiter = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)
        client = MockChatBackend(config.script_path, rate_limiter=limiter)
    else:
        client = HttpChatBackend(config, clock=clock, sleep=sleep)
    return CachedChat(client, cache) if cache else client


def make_embedding_backend(config: BackendConfig, cache: ResponseCache | None = None,
                           clock=time.monotonic, sleep=time.sleep):
    config.validate()
    if config.kind == "mock":
        limiter = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)
        client = MockEmbeddingBackend(config.embedding_dim, rate_limiter=limiter)
    else:
        client = HttpEmbeddingBackend(config, clock=clock, sleep=sleep)
    return CachedEmbedding(client, cache) if cache else client


def make_image_backend(config: BackendConfig, cache: ResponseCache | None = None,
                       clock=time.monotonic, sleep=time.sleep):
    config.validate()
    if config.kind == "mock":
        limiter = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)
        client = MockImageBackend(
            config.image_min_size, config.image_max_size, rate_limiter=limiter
        )
    else:
        client = HttpImageBackend(config, clock=clock, sleep=sleep)
    return CachedImage(client, cache) if cache else client
