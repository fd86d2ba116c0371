"""Per-source-prefix token buckets limiting how many puzzles a reflector issues.

Buckets are keyed by the /24 (IPv4) or /56 (IPv6) of the claimed source
locator. Solving a puzzle does not refund a token; ``outstanding`` is only a
gauge of issued-but-unanswered puzzles.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import threading
from dataclasses import dataclass, field

from .identity import Locator

log = logging.getLogger(__name__)

IPV4_BUCKET_BITS = 24
IPV6_BUCKET_BITS = 56


@dataclass(frozen=True, order=True)
class BucketKey:
    family: int
    prefix: int

    @classmethod
    def for_locator(cls, loc: Locator) -> "BucketKey":
        value = int(loc.address)
        if loc.family == 4:
            return cls(4, value >> (32 - IPV4_BUCKET_BITS))
        return cls(6, value >> (128 - IPV6_BUCKET_BITS))

    def __str__(self) -> str:
        if self.family == 4:
            return f"{self.prefix >> 16}.{(self.prefix >> 8) & 0xFF}.{self.prefix & 0xFF}.0/24"
        return f"{self.prefix:014x}/56"


@dataclass(frozen=True)
class ShaperConfig:
    r_shap: float
    burst: int | None = None

    def __post_init__(self) -> None:
        if self.r_shap <= 0:
            raise ValueError("r_shap must be positive")
        if self.burst is not None and self.burst < 1:
            raise ValueError("burst must be at least 1")

    @property
    def capacity(self) -> int:
        return self.burst if self.burst is not None else math.ceil(self.r_shap)


class Admission(enum.Enum):
    ALLOW = "allow"
    DROP = "drop"

    def __bool__(self) -> bool:
        return self is Admission.ALLOW


@dataclass
class BucketState:
    tokens: float
    last_update: float
    outstanding: int = 0
    allowed: int = 0
    dropped: int = 0
    solved: int = 0


@dataclass
class Shaper:
    config: ShaperConfig
    buckets: dict[BucketKey, BucketState] = field(default_factory=dict)
    anomalies: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _last_sweep: float = float("-inf")

    @property
    def idle_timeout(self) -> float:
        # never shorter than a full refill, so eviction grants no extra tokens
        return max(10, self.config.capacity) / self.config.r_shap

    def _refill(self, b: BucketState, now: float) -> None:
        if now > b.last_update:
            b.tokens = min(self.config.capacity, b.tokens + (now - b.last_update) * self.config.r_shap)
            b.last_update = now

    def admit(self, key: BucketKey, now: float) -> Admission:
        with self._lock:
            self._evict(now)
            b = self.buckets.get(key)
            if b is None:
                b = self.buckets[key] = BucketState(float(self.config.capacity), now)
            self._refill(b, now)
            if b.tokens >= 1.0:
                b.tokens -= 1.0
                b.allowed += 1
                b.outstanding += 1
                return Admission.ALLOW
            b.dropped += 1
            return Admission.DROP

    def on_solution(self, key: BucketKey) -> None:
        with self._lock:
            b = self.buckets.get(key)
            if b is None or b.outstanding == 0:
                self.anomalies += 1
                log.warning("solution for bucket %s with nothing outstanding", key)
                return
            b.outstanding -= 1
            b.solved += 1

    def outstanding(self, key: BucketKey) -> int:
        b = self.buckets.get(key)
        return b.outstanding if b else 0

    def _evict(self, now: float) -> None:
        if now - self._last_sweep < self.idle_timeout:
            return
        self._last_sweep = now
        stale = [k for k, b in self.buckets.items() if now - b.last_update > self.idle_timeout]
        for k in stale:
            del self.buckets[k]

    def metrics_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["bucket", "allowed", "dropped", "solved", "outstanding"])
        for key in sorted(self.buckets):
            b = self.buckets[key]
            w.writerow([str(key), b.allowed, b.dropped, b.solved, b.outstanding])
        return out.getvalue()
