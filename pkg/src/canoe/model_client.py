"""Text generation and sequence scoring backends.

Two backends share one surface: :class:`OpenAICompatibleClient` talks to any
chat-completions HTTP endpoint, :class:`MockClient` is a pure function of the
request and a mock seed so every pipeline stage can run offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence, TypeVar

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "CANOE_API_KEY"
BASE_URL_ENV = "CANOE_BASE_URL"
DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_MAX_TOKENS = 1024

T = TypeVar("T")
R = TypeVar("R")


class ClientError(RuntimeError):
    """Base class for backend failures."""


class AuthError(ClientError):
    pass


class RateLimitError(ClientError):
    pass


class ClientTimeoutError(ClientError):
    pass


class TransportError(ClientError):
    """Retryable transport failure that persisted after all retries."""


class CapabilityError(ClientError):
    """Backend cannot perform the requested operation (e.g. no logprobs)."""


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_message: str
    temperature: float = 0.7
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and non-negative")

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system_prompt:
            msgs.append({"role": "system", "content": self.system_prompt})
        msgs.append({"role": "user", "content": self.user_message})
        return msgs


@dataclass(frozen=True)
class ScoredSequence:
    text: str
    token_logprobs: tuple[float, ...]
    total_logprob: float = field(default=float("nan"))

    def __post_init__(self):
        lps = tuple(float(x) for x in self.token_logprobs)
        object.__setattr__(self, "token_logprobs", lps)
        if any(lp > 0 for lp in lps):
            raise ValueError("token log-probabilities must be <= 0")
        total = math.fsum(lps)
        if math.isnan(self.total_logprob):
            object.__setattr__(self, "total_logprob", total)
        elif abs(self.total_logprob - total) > 1e-9:
            raise ValueError("total_logprob disagrees with the token log-probabilities")


def perplexity(seq: ScoredSequence) -> float:
    n = len(seq.token_logprobs)
    if n < 1:
        raise ValueError("perplexity needs at least one token")
    return math.exp(-math.fsum(seq.token_logprobs) / n)


class GenerationClient:
    """Common surface; subclasses implement :meth:`_generate` and optionally :meth:`_score`."""

    name = "client"
    supports_scoring = False

    def __init__(self, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT, audit_path: str | None = None):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._audit_path = audit_path
        self._audit_lock = threading.Lock()
        self.calls = 0
        self._calls_lock = threading.Lock()

    @contextmanager
    def _slot(self):
        with self._slots:
            with self._calls_lock:
                self.calls += 1
            yield

    def identity(self) -> dict:
        return {"backend": self.name}

    def generate(self, req: GenerationRequest) -> str:
        with self._slot():
            text = self._generate(req)
        self._audit({"op": "generate", "request": asdict(req), "response": text})
        return text

    def score(self, text_prefix: str, continuation: str) -> ScoredSequence:
        if not continuation:
            raise ValueError("continuation must be non-empty")
        if not self.supports_scoring:
            raise CapabilityError(f"{self.name} backend does not expose log-probabilities")
        with self._slot():
            seq = self._score(text_prefix, continuation)
        self._audit({"op": "score", "prefix": text_prefix, "continuation": continuation,
                     "token_logprobs": list(seq.token_logprobs)})
        return seq

    def _generate(self, req: GenerationRequest) -> str:
        raise NotImplementedError

    def _score(self, text_prefix: str, continuation: str) -> ScoredSequence:
        raise CapabilityError(f"{self.name} backend does not expose log-probabilities")

    def _audit(self, record: dict) -> None:
        if not self._audit_path:
            return
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._audit_lock, open(self._audit_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int = DEFAULT_MAX_IN_FLIGHT) -> list[R]:
    """Apply ``fn`` concurrently; results come back in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- mock


def stable_digest(*parts: object) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def stable_int(*parts: object) -> int:
    return int(stable_digest(*parts)[:16], 16)


Responder = Callable[[GenerationRequest, random.Random], str]


def echo_responder(req: GenerationRequest, rng: random.Random) -> str:
    return f"mock-{rng.getrandbits(48):012x}"


class MockClient(GenerationClient):
    """Deterministic offline backend.

    Every response is ``responder(request, rng)`` where ``rng`` is seeded from a
    digest of the mock seed and the full request, so equal requests always get
    equal text. Scoring splits the continuation on whitespace; with
    ``vocab_size`` set each token gets log(1/V), otherwise a hashed
    pseudo-random log-probability in [log 0.02, 0).
    """

    name = "mock"
    supports_scoring = True

    def __init__(self, responder: Responder | None = None, seed: int = 0,
                 vocab_size: int | None = None, scoring: bool = True, label: str = "echo", **kwargs):
        super().__init__(**kwargs)
        self.responder = responder or echo_responder
        self.seed = seed
        self.vocab_size = vocab_size
        self.supports_scoring = scoring
        self.label = label

    def identity(self) -> dict:
        return {"backend": self.name, "responder": self.label, "seed": self.seed}

    def _generate(self, req: GenerationRequest) -> str:
        rng = random.Random(stable_int(self.seed, req.seed, req.temperature, req.system_prompt, req.user_message))
        return self.responder(req, rng)

    def _score(self, text_prefix: str, continuation: str) -> ScoredSequence:
        tokens = continuation.split() or [continuation]
        if self.vocab_size:
            lps = [-math.log(self.vocab_size)] * len(tokens)
        else:
            ctx = stable_digest(self.seed, text_prefix)
            lps = []
            for i, tok in enumerate(tokens):
                u = stable_int(ctx, i, tok) / 2**64
                lps.append(math.log(0.02 + 0.98 * (1.0 - u)))
        return ScoredSequence(continuation, tuple(lps))


class ScriptedClient(GenerationClient):
    """Replays a fixed list of outputs; exceptions in the list are raised."""

    name = "scripted"

    def __init__(self, outputs: Sequence[str | BaseException], **kwargs):
        super().__init__(**kwargs)
        self._outputs = list(outputs)
        self._lock = threading.Lock()
        self.requests: list[GenerationRequest] = []

    def _generate(self, req: GenerationRequest) -> str:
        with self._lock:
            self.requests.append(req)
            if not self._outputs:
                raise ClientError("script exhausted")
            out = self._outputs.pop(0)
        if isinstance(out, BaseException):
            raise out
        return out


# --------------------------------------------------------------------------- http


class OpenAICompatibleClient(GenerationClient):
    """Chat-completions client with bounded retries and exponential backoff.

    401/403 fail immediately. 429, 5xx, timeouts and connection errors are
    retried up to ``max_retries`` times. ``score`` uses the legacy
    ``/completions`` endpoint with ``echo`` so prompt tokens carry logprobs.
    """

    name = "openai-compatible"
    supports_scoring = True

    def __init__(self, base_url: str, api_key: str | None, model: str, *, timeout: float = 60.0,
                 max_retries: int = 3, backoff: float = 0.5, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, **kwargs):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)
        self._local = threading.local()
        self.total_retries = 0

    @classmethod
    def from_env(cls, model: str, **kwargs) -> "OpenAICompatibleClient":
        base_url = os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ClientError(f"{BASE_URL_ENV} is not set")
        return cls(base_url, os.environ.get(API_KEY_ENV), model, **kwargs)

    @property
    def last_retry_count(self) -> int:
        return getattr(self._local, "retries", 0)

    def identity(self) -> dict:
        return {"backend": self.name, "base_url": self.base_url, "model": self.model}

    def close(self) -> None:
        self._http.close()

    def _post(self, path: str, payload: dict) -> dict:
        self._local.retries = 0
        last: ClientError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._local.retries = attempt
                self.total_retries += 1
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last = ClientTimeoutError(f"timeout calling {path}: {exc}")
                continue
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure calling {path}: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code} from {path}")
            if resp.status_code == 429:
                last = RateLimitError(f"rate limited by {path}")
                continue
            if resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code} from {path}")
                continue
            if resp.status_code >= 400:
                raise ClientError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
            return resp.json()
        assert last is not None
        raise last

    def _generate(self, req: GenerationRequest) -> str:
        payload = {
            "model": self.model,
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        data = self._post("/chat/completions", payload)
        content = data["choices"][0]["message"].get("content") or ""
        if not content:
            log.info("empty completion from %s", self.base_url)
        return content

    def _score(self, text_prefix: str, continuation: str) -> ScoredSequence:
        payload = {
            "model": self.model,
            "prompt": text_prefix + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        data = self._post("/completions", payload)
        lp = (data.get("choices") or [{}])[0].get("logprobs")
        if not lp or "token_logprobs" not in lp or "text_offset" not in lp:
            raise CapabilityError("endpoint returned no prompt log-probabilities")
        cut = len(text_prefix)
        picked = [v for off, v in zip(lp["text_offset"], lp["token_logprobs"]) if off >= cut and v is not None]
        if not picked:
            raise CapabilityError("no scored tokens fall inside the continuation")
        return ScoredSequence(continuation, tuple(min(0.0, v) for v in picked))
