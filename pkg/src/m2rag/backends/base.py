"""Chat-completion backend abstraction with retries, rate limiting and cost accounting."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    """Transport failure or rate-limit response; the request may be retried."""


class RetriesExhausted(BackendError):
    def __init__(self, backend: str, attempts: int, last: Exception | None):
        super().__init__(f"{backend}: giving up after {attempts} attempts ({last})")
        self.attempts = attempts
        self.last = last


class CapabilityError(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    user_text: str
    system_text: str = ""
    image_attachments: tuple[str, ...] = ()
    max_output_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.user_text.strip():
            raise ValueError("user_text must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "image_attachments", tuple(self.image_attachments))


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int
    output_tokens: int
    latency: float
    attempts: int = 1


@dataclass(frozen=True)
class BackendConfig:
    name: str
    model: str = ""
    endpoint: str = ""
    timeout_s: float = 60.0
    retry_budget: int = 3
    requests_per_minute: float | None = None
    price_per_input_token: float = 0.0
    price_per_output_token: float = 0.0
    supports_images: bool = False
    temperature: float = 0.0
    max_output_tokens: int = 1024
    backoff_base_s: float = 1.0
    backoff_max_s: float = 30.0

    def __post_init__(self) -> None:
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")

    def api_key(self) -> str | None:
        return os.environ.get(f"M2RAG_API_KEY_{self.name.upper().replace('-', '_')}")


@dataclass(frozen=True)
class LedgerEntry:
    backend: str
    model: str
    input_tokens: int
    output_tokens: int
    cost: float
    attempts: int


class CostLedger:
    """Thread-safe per-run record of token usage and spend."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.entries: list[LedgerEntry] = []

    def record(self, entry: LedgerEntry) -> None:
        with self._lock:
            self.entries.append(entry)

    @property
    def total_cost(self) -> float:
        with self._lock:
            return sum(e.cost for e in self.entries)

    def summary(self, since: int = 0) -> dict[str, dict[str, float]]:
        """Per-backend totals over entries ``since`` onwards."""
        out: dict[str, dict[str, float]] = {}
        with self._lock:
            for e in self.entries[since:]:
                s = out.setdefault(e.backend, {"calls": 0, "attempts": 0, "input_tokens": 0, "output_tokens": 0, "cost": 0.0})
                s["calls"] += 1
                s["attempts"] += e.attempts
                s["input_tokens"] += e.input_tokens
                s["output_tokens"] += e.output_tokens
                s["cost"] += e.cost
        return out


class TokenBucket:
    """Client-side requests-per-minute limiter."""

    def __init__(self, per_minute: float, *, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = per_minute / 60.0
        self.capacity = max(1.0, per_minute / 60.0)
        self.tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self._sleep(wait)


def backoff_delays(base: float, cap: float, retries: int) -> list[float]:
    """Exponential, non-decreasing delays before each retry."""
    return [min(cap, base * 2**i) for i in range(retries)]


class ModelBackend:
    """A chat-completion endpoint (judge, generator or describer role).

    Subclasses implement ``_send``; retries, rate limiting and the cost
    ledger are handled here.
    """

    def __init__(self, config: BackendConfig, *, ledger: CostLedger | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.ledger = ledger if ledger is not None else CostLedger()
        self._sleep = sleep
        self.bucket = TokenBucket(config.requests_per_minute, sleep=sleep) if config.requests_per_minute else None
        self.retry_delays: list[float] = []
        self.calls = 0

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def supports_images(self) -> bool:
        return self.config.supports_images

    def _send(self, request: CompletionRequest) -> tuple[str, int, int]:
        raise NotImplementedError

    def complete(self, request: CompletionRequest) -> Completion:
        if request.image_attachments and not self.supports_images:
            raise CapabilityError(f"backend {self.name!r} does not accept image attachments")
        delays = backoff_delays(self.config.backoff_base_s, self.config.backoff_max_s, self.config.retry_budget)
        last: Exception | None = None
        for attempt in range(self.config.retry_budget + 1):
            if self.bucket is not None:
                self.bucket.acquire()
            start = time.perf_counter()
            self.calls += 1
            try:
                text, n_in, n_out = self._send(request)
            except TransientBackendError as exc:
                last = exc
                if attempt < self.config.retry_budget:
                    delay = delays[attempt]
                    logger.warning("%s: transient failure (%s), retrying in %.1fs", self.name, exc, delay)
                    self.retry_delays.append(delay)
                    self._sleep(delay)
                continue
            cost = n_in * self.config.price_per_input_token + n_out * self.config.price_per_output_token
            self.ledger.record(LedgerEntry(self.name, self.config.model, n_in, n_out, cost, attempt + 1))
            return Completion(text, n_in, n_out, time.perf_counter() - start, attempt + 1)
        raise RetriesExhausted(self.name, self.config.retry_budget + 1, last)


def count_tokens(text: str) -> int:
    return len(text.split())
