"""OpenAI-compatible chat-completions client with live, replay, and scripted
mock backends, plus token-based cost accounting.

The live backend speaks the plain wire protocol (POST /v1/chat/completions)
so any compatible server works. Replay keys on a stable digest of
(model, messages, temperature, seed, max_tokens), which makes re-runs free
and byte-deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence

import requests

from .prompts import ChatMessage
from .tokens import count_tokens

logger = logging.getLogger(__name__)

RESPONSE_FORMAT_TEXT = "text"
RESPONSE_FORMAT_JSON = "json_object"

DEFAULT_BASE_URL = "https://api.openai.com"
DEFAULT_MAX_ATTEMPTS = 5


class LlmError(Exception):
    pass


class AuthError(LlmError):
    pass


class RateLimitedExhaustedError(LlmError):
    pass


class ProtocolError(LlmError):
    pass


class ReplayMissError(LlmError):
    pass


class UnknownModelError(LlmError):
    pass


class TransientLlmError(LlmError):
    """Retryable transport failure; retry_after_s honors Retry-After headers."""

    def __init__(self, message: str, retry_after_s: Optional[float] = None):
        super().__init__(message)
        self.retry_after_s = retry_after_s


class RequestTimeoutError(TransientLlmError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    seed: Optional[int] = None
    max_tokens: Optional[int] = None
    response_format: str = RESPONSE_FORMAT_TEXT

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request must carry at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.response_format not in (RESPONSE_FORMAT_TEXT, RESPONSE_FORMAT_JSON):
            raise ValueError(f"invalid response_format {self.response_format!r}")
        object.__setattr__(self, "messages", tuple(self.messages))


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    model: str
    finish_reason: str = "stop"

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def request_digest(request: ChatRequest) -> str:
    """Stable identity of a request for replay/transcript keying."""
    payload = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "seed": request.seed,
        "max_tokens": request.max_tokens,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def request_to_wire(request: ChatRequest) -> dict[str, Any]:
    """The exact JSON body sent to /v1/chat/completions."""
    body: dict[str, Any] = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "response_format": {"type": request.response_format},
    }
    if request.seed is not None:
        body["seed"] = request.seed
    if request.max_tokens is not None:
        body["max_tokens"] = request.max_tokens
    return body


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class Backend(Protocol):
    deterministic: bool

    def send(self, request: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """Live HTTP backend for any OpenAI-compatible chat-completions server."""

    deterministic = False

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key: Optional[str] = None,
        *,
        timeout_s: float = 180.0,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            http_response = self.session.post(
                f"{self.base_url}/v1/chat/completions",
                json=request_to_wire(request),
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.Timeout as exc:
            raise RequestTimeoutError(f"request timed out: {exc}") from exc
        except requests.RequestException as exc:
            raise TransientLlmError(f"connection failure: {exc}") from exc

        if http_response.status_code in (401, 403):
            raise AuthError(f"authentication failed (HTTP {http_response.status_code})")
        if http_response.status_code == 429 or http_response.status_code >= 500:
            retry_after = http_response.headers.get("Retry-After")
            raise TransientLlmError(
                f"HTTP {http_response.status_code} from server",
                retry_after_s=float(retry_after) if retry_after else None,
            )
        if http_response.status_code != 200:
            raise ProtocolError(
                f"HTTP {http_response.status_code}: {http_response.text[:500]}"
            )
        try:
            payload = http_response.json()
            choice = payload["choices"][0]
            usage = payload.get("usage") or {}
            return ChatResponse(
                content=choice["message"]["content"] or "",
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                model=payload.get("model", request.model),
                finish_reason=choice.get("finish_reason") or "stop",
            )
        except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc


class ReplayBackend:
    """Serve canned responses keyed by request digest from a transcript file."""

    deterministic = True

    def __init__(self, entries: Mapping[str, ChatResponse]):
        self.entries = dict(entries)

    @classmethod
    def from_transcript(cls, path: Path | str) -> "ReplayBackend":
        entries: dict[str, ChatResponse] = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                response = record["response"]
                entries[record["digest"]] = ChatResponse(
                    content=response["content"],
                    prompt_tokens=response["prompt_tokens"],
                    completion_tokens=response["completion_tokens"],
                    model=response["model"],
                    finish_reason=response.get("finish_reason", "stop"),
                )
        return cls(entries)

    def send(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        try:
            return self.entries[digest]
        except KeyError:
            raise ReplayMissError(
                f"no transcript entry for request digest {digest[:12]}… "
                f"(model={request.model}, {len(request.messages)} messages)"
            ) from None


class MockBackend:
    """Scripted backend: a callable maps each request to response content.

    Usage comes from the deterministic byte-heuristic counter so cost and
    token statistics are reproducible.
    """

    deterministic = True

    def __init__(self, script: Callable[[ChatRequest], str]):
        self.script = script

    @classmethod
    def from_sequence(cls, contents: Sequence[str]) -> "MockBackend":
        """Pop scripted responses in call order (not thread-safe by design;
        use for single-worker tests)."""
        queue = list(contents)

        def pop(_: ChatRequest) -> str:
            if not queue:
                raise ProtocolError("mock script exhausted")
            return queue.pop(0)

        return cls(pop)

    def send(self, request: ChatRequest) -> ChatResponse:
        content = self.script(request)
        prompt_text = "".join(m.content for m in request.messages)
        return ChatResponse(
            content=content,
            prompt_tokens=count_tokens(prompt_text),
            completion_tokens=count_tokens(content),
            model=request.model,
            finish_reason="stop",
        )


class FlakyBackend:
    """Fault-injection wrapper: raise scripted transient errors, then delegate."""

    def __init__(self, inner: Backend, failures: Sequence[TransientLlmError]):
        self.inner = inner
        self.deterministic = inner.deterministic
        self._failures = list(failures)

    def send(self, request: ChatRequest) -> ChatResponse:
        if self._failures:
            raise self._failures.pop(0)
        return self.inner.send(request)


# ---------------------------------------------------------------------------
# Client: retries, rate limiting, transcripts, telemetry
# ---------------------------------------------------------------------------

@dataclass
class Telemetry:
    requests: int = 0
    retries: int = 0
    failures: int = 0


class LlmClient:
    """Thread-safe wrapper adding retry with backoff, an in-flight request
    cap, transcript capture, and telemetry on top of a backend."""

    def __init__(
        self,
        backend: Backend,
        *,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_base_s: float = 0.5,
        backoff_cap_s: float = 30.0,
        max_in_flight: Optional[int] = None,
        transcript_path: Optional[Path | str] = None,
        rng: Optional[random.Random] = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.backend = backend
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.backoff_cap_s = backoff_cap_s
        self.telemetry = Telemetry()
        self._semaphore = (
            threading.Semaphore(max_in_flight) if max_in_flight else None
        )
        self._transcript_path = Path(transcript_path) if transcript_path else None
        self._lock = threading.Lock()
        self._rng = rng or random.Random()

    @property
    def deterministic(self) -> bool:
        return self.backend.deterministic

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self._semaphore is not None:
            self._semaphore.acquire()
        try:
            response = self._complete_with_retries(request)
        finally:
            if self._semaphore is not None:
                self._semaphore.release()
        self._record(request, response)
        return response

    def _complete_with_retries(self, request: ChatRequest) -> ChatResponse:
        last_error: Optional[TransientLlmError] = None
        for attempt in range(self.max_attempts):
            with self._lock:
                self.telemetry.requests += 1
            try:
                return self.backend.send(request)
            except TransientLlmError as exc:
                last_error = exc
                if attempt == self.max_attempts - 1:
                    break
                with self._lock:
                    self.telemetry.retries += 1
                delay = exc.retry_after_s
                if delay is None:
                    delay = min(
                        self.backoff_cap_s, self.backoff_base_s * (2**attempt)
                    ) * (1 + self._rng.random())
                if delay > 0:
                    time.sleep(delay)
        with self._lock:
            self.telemetry.failures += 1
        raise RateLimitedExhaustedError(
            f"gave up after {self.max_attempts} attempts: {last_error}"
        ) from last_error

    def _record(self, request: ChatRequest, response: ChatResponse) -> None:
        if self._transcript_path is None:
            return
        record = {
            "digest": request_digest(request),
            "request": request_to_wire(request),
            "response": {
                "content": response.content,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
                "model": response.model,
                "finish_reason": response.finish_reason,
            },
        }
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self._transcript_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


# ---------------------------------------------------------------------------
# Pricing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelPricing:
    input_usd_per_million: float
    output_usd_per_million: float
    training_usd_per_million: Optional[float] = None

    def __post_init__(self) -> None:
        for price in (
            self.input_usd_per_million,
            self.output_usd_per_million,
            self.training_usd_per_million,
        ):
            if price is not None and price < 0:
                raise ValueError("prices must be >= 0")


class PricingTable:
    """model_id -> per-million-token prices. Lookup falls back to the longest
    prefix entry so fine-tuned model ids resolve to their base entry."""

    def __init__(self, prices: Mapping[str, ModelPricing]):
        self._prices = dict(prices)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, float]]) -> "PricingTable":
        return cls(
            {
                model_id: ModelPricing(
                    input_usd_per_million=entry["input_usd_per_million"],
                    output_usd_per_million=entry["output_usd_per_million"],
                    training_usd_per_million=entry.get("training_usd_per_million"),
                )
                for model_id, entry in data.items()
            }
        )

    @classmethod
    def load(cls, path: Path | str) -> "PricingTable":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def default(cls) -> "PricingTable":
        data = resources.files("text2sql.data").joinpath("default_pricing.json")
        return cls.from_dict(json.loads(data.read_text(encoding="utf-8")))

    def for_model(self, model_id: str) -> ModelPricing:
        if model_id in self._prices:
            return self._prices[model_id]
        # Fine-tuned ids extend a base id with ":suffix" segments.
        matches = [
            known
            for known in self._prices
            if model_id.startswith(known) and model_id[len(known) :].startswith(":")
        ]
        if matches:
            return self._prices[max(matches, key=len)]
        raise UnknownModelError(f"no pricing for model {model_id!r}")


def inference_cost(
    prompt_tokens: int,
    completion_tokens: int,
    model_id: str,
    prices: PricingTable,
) -> float:
    pricing = prices.for_model(model_id)
    return (
        prompt_tokens * pricing.input_usd_per_million
        + completion_tokens * pricing.output_usd_per_million
    ) / 1e6


def training_cost(
    training_tokens: int,
    epochs: int,
    model_id: str,
    prices: PricingTable,
) -> float:
    pricing = prices.for_model(model_id)
    if pricing.training_usd_per_million is None:
        raise UnknownModelError(f"model {model_id!r} has no training price")
    return training_tokens * epochs * pricing.training_usd_per_million / 1e6
