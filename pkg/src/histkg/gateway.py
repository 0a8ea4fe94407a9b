"""Chat-completion gateway: HTTP client, mock backend, retry/fallback, cache.

Every model call in the package goes through :class:`Gateway.complete`.
Log lines carry the request digest, never the prompt or document text.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

import httpx

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    pass


class AllModelsFailed(GatewayError):
    def __init__(self, last_error: BaseException | None):
        self.last_error = last_error
        super().__init__(f"all models failed; last error: {last_error!r}")


class AuthMissing(GatewayError):
    pass


class CacheCorrupt(GatewayError):
    def __init__(self, path: Path, reason: str):
        self.path = path
        super().__init__(f"cache entry {path} is unusable: {reason}")


class BackendError(GatewayError):
    """A single failed attempt (transport, status, timeout or empty body)."""


@dataclass(frozen=True)
class ModelRequest:
    system_prompt: str
    user_content: str
    model_id: str
    json_response: bool = True
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.system_prompt:
            raise ValueError("system_prompt must not be empty")
        if not self.model_id:
            raise ValueError("model_id must not be empty")

    @property
    def digest(self) -> str:
        return request_digest(self.model_id, self.system_prompt, self.user_content)


@dataclass(frozen=True)
class ModelResponse:
    raw_text: str
    model_used: str
    from_cache: bool = False


@dataclass(frozen=True)
class GatewayConfig:
    api_base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    primary_model: str = "gpt-4o-mini"
    fallback_model: str = "gpt-4o"
    request_timeout: float = 120.0
    max_retries_before_fallback: int = 2
    retry_backoff: float = 1.0
    cache_dir: str | None = None
    parallelism: int = 4

    def __post_init__(self) -> None:
        if self.max_retries_before_fallback < 1:
            raise ValueError("max_retries_before_fallback must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def request_digest(model_id: str, system_prompt: str, user_content: str) -> str:
    canonical = json.dumps(
        {"model": model_id, "system": system_prompt, "user": user_content},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def chat(self, request: ModelRequest, model: str, timeout: float) -> str: ...


class HttpBackend:
    """OpenAI-compatible ``POST {base}/chat/completions`` with bearer auth."""

    def __init__(self, base_url: str, api_key: str, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self._client = client or httpx.Client()

    @classmethod
    def from_config(cls, cfg: GatewayConfig, client: httpx.Client | None = None) -> HttpBackend:
        key = os.environ.get(cfg.api_key_env, "").strip()
        if not key:
            raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
        return cls(cfg.api_base_url, key, client)

    def chat(self, request: ModelRequest, model: str, timeout: float) -> str:
        payload: dict[str, Any] = {
            "model": model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_content},
            ],
        }
        if request.json_response:
            payload["response_format"] = {"type": "json_object"}
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=timeout,
            )
        except httpx.HTTPError as exc:
            raise BackendError(f"transport error: {type(exc).__name__}") from exc
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed completion payload") from exc
        if not isinstance(content, str) or not content.strip():
            raise BackendError("empty completion")
        return content


@dataclass(frozen=True)
class MockFixture:
    system_contains: str
    user_contains: str
    response: str


_SCHEMA_KEY = re.compile(r'"(\w+)"\s*:\s*\[')


def empty_response_for(system_prompt: str) -> str:
    """Empty result shaped after the first list-valued key in the prompt's schema."""
    m = _SCHEMA_KEY.search(system_prompt)
    if m is None:
        return "{}"
    return json.dumps({m.group(1): []})


def canned_index(seed: int, request: ModelRequest, n: int) -> int:
    """Mapping from a request to one of ``n`` canned responses.

    ``int(sha256(f"{seed}:{request.digest}")[:16], 16) % n``
    """
    h = hashlib.sha256(f"{seed}:{request.digest}".encode("ascii")).hexdigest()
    return int(h[:16], 16) % n


class MockBackend:
    """Offline backend resolving requests against fixtures, first match wins.

    A fixture matches when both of its substrings occur in the system prompt
    and user content respectively. Unmatched requests fall back to a canned
    pool (picked by :func:`canned_index`) when one is given, otherwise to an
    empty list under the key the prompt asks for, e.g. ``{"individual": []}``.
    """

    def __init__(self, fixtures: Iterable[MockFixture], canned: Iterable[str] = (), seed: int = 0):
        self.fixtures = tuple(fixtures)
        self.canned = tuple(canned)
        self.seed = seed
        if not self.fixtures and not self.canned:
            raise ValueError("mock backend needs at least one fixture")
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def resolve(self, request: ModelRequest) -> str:
        for fx in self.fixtures:
            if fx.system_contains in request.system_prompt and fx.user_contains in request.user_content:
                return fx.response
        if self.canned:
            return self.canned[canned_index(self.seed, request, len(self.canned))]
        return empty_response_for(request.system_prompt)

    def chat(self, request: ModelRequest, model: str, timeout: float) -> str:
        with self._lock:
            self.calls.append((model, request.digest))
        return self.resolve(request)


def mock_backend(fixtures: Iterable[MockFixture | dict], canned: Iterable[str] = (), seed: int = 0) -> MockBackend:
    """Build a :class:`MockBackend` from fixture objects or plain dicts.

    Dict fixtures use the keys ``system_contains``, ``user_contains`` and
    ``response``; a non-string response is serialized as JSON.
    """
    items = []
    for fx in fixtures:
        if isinstance(fx, dict):
            response = fx["response"]
            if not isinstance(response, str):
                response = json.dumps(response, ensure_ascii=False, sort_keys=True)
            fx = MockFixture(fx.get("system_contains", ""), fx.get("user_contains", ""), response)
        items.append(fx)
    return MockBackend(items, canned, seed)


def load_mock_fixtures(path: str | Path) -> MockBackend:
    """Read a fixture file: a list of fixtures, or ``{"fixtures": [...], "canned": [...], "seed": n}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        return mock_backend(data)
    canned = [c if isinstance(c, str) else json.dumps(c, sort_keys=True) for c in data.get("canned", [])]
    return mock_backend(data.get("fixtures", []), canned, int(data.get("seed", 0)))


class ResponseCache:
    """One file per request digest under ``cache_dir``, holding the raw text."""

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, digest: str) -> Path:
        return self.root / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        path = self.path_for(digest)
        if not path.exists():
            return None
        try:
            text = path.read_bytes().decode("utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CacheCorrupt(path, type(exc).__name__) from exc
        if not text.strip():
            raise CacheCorrupt(path, "empty entry")
        return text

    def put(self, digest: str, text: str) -> None:
        path = self.path_for(digest)
        # write-then-rename so concurrent writers never expose a partial file
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(text.encode("utf-8"))
        os.replace(tmp, path)


@dataclass
class GatewayStats:
    requests: int = 0
    cache_hits: int = 0
    backend_calls: int = 0
    failures: int = 0
    fallbacks: int = 0


@dataclass
class Gateway:
    backend: Backend
    config: GatewayConfig = field(default_factory=GatewayConfig)
    stats: GatewayStats = field(default_factory=GatewayStats)

    def __post_init__(self) -> None:
        self.cache = ResponseCache(self.config.cache_dir) if self.config.cache_dir else None
        self._slots = threading.BoundedSemaphore(self.config.parallelism)
        self._stats_lock = threading.Lock()

    def _count(self, **deltas: int) -> None:
        with self._stats_lock:
            for name, delta in deltas.items():
                setattr(self.stats, name, getattr(self.stats, name) + delta)

    def request(self, system_prompt: str, user_content: str, json_response: bool = True) -> ModelRequest:
        return ModelRequest(system_prompt, user_content, self.config.primary_model, json_response)

    def complete(self, req: ModelRequest) -> ModelResponse:
        digest = req.digest
        self._count(requests=1)
        if self.cache is not None:
            try:
                cached = self.cache.get(digest)
            except CacheCorrupt as exc:
                log.warning(json.dumps({"event": "cache_corrupt", "digest": digest, "error": str(exc)}))
                cached = None
            if cached is not None:
                self._count(cache_hits=1)
                log.debug(json.dumps({"event": "cache_hit", "digest": digest}))
                return ModelResponse(cached, req.model_id, from_cache=True)

        models = [req.model_id]
        if self.config.fallback_model and self.config.fallback_model != req.model_id:
            models.append(self.config.fallback_model)

        last_error: BaseException | None = None
        retries = 0
        with self._slots:
            for position, model in enumerate(models):
                if position:
                    self._count(fallbacks=1)
                for attempt in range(self.config.max_retries_before_fallback):
                    started = time.monotonic()
                    self._count(backend_calls=1)
                    try:
                        text = self.backend.chat(req, model, self.config.request_timeout)
                        if not isinstance(text, str) or not text.strip():
                            raise BackendError("empty completion")
                    except (BackendError, httpx.HTTPError, TimeoutError, OSError) as exc:
                        last_error = exc
                        retries += 1
                        self._count(failures=1)
                        log.warning(json.dumps({
                            "event": "model_attempt_failed",
                            "digest": digest,
                            "model": model,
                            "attempt": attempt + 1,
                            "error": type(exc).__name__,
                        }))
                        if self.config.retry_backoff > 0:
                            time.sleep(self.config.retry_backoff * (attempt + 1))
                        continue
                    log.info(json.dumps({
                        "event": "model_response",
                        "digest": digest,
                        "model_used": model,
                        "latency_s": round(time.monotonic() - started, 3),
                        "retries": retries,
                    }))
                    if self.cache is not None:
                        self.cache.put(digest, text)
                    return ModelResponse(text, model, from_cache=False)
        raise AllModelsFailed(last_error)
