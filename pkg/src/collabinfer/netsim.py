"""Compute and transmission latency along a linear tier chain.

All times are simulated milliseconds; nothing here reads a clock.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError

TEXT_ENCODING = "latin-1"


@dataclass(frozen=True)
class NetworkLink:
    source: int
    rate: float  # bytes per simulated ms
    jitter: float = 0.0

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ConfigError(f"link {self.source}->{self.source + 1}: rate must be > 0, got {self.rate}")
        if not 0 <= self.jitter < 1:
            raise ConfigError(f"link {self.source}->{self.source + 1}: jitter must lie in [0, 1)")

    @property
    def destination(self) -> int:
        return self.source + 1


@dataclass(frozen=True)
class LatencyBreakdown:
    compute: tuple[float, ...]
    transmission: tuple[float, ...]

    @property
    def total_compute(self) -> float:
        return math.fsum(self.compute)

    @property
    def total_transmission(self) -> float:
        return math.fsum(self.transmission)

    @property
    def total(self) -> float:
        return self.total_compute + self.total_transmission


def task_size(text: str) -> int:
    """Byte length of ``text`` in an 8-bit encoding; unmappable characters count one byte each."""
    return len(text.encode(TEXT_ENCODING, errors="replace"))


def transmission_latency(size_bytes: int, link: NetworkLink,
                         rng: np.random.Generator | None = None) -> float:
    """``size / rate``, scaled by ``1 + u`` with ``u ~ U[-jitter, jitter]`` when jitter is on."""
    if size_bytes < 0:
        raise InvalidInputError("size must be non-negative")
    if not link.rate > 0:
        raise ConfigError("link rate must be positive")
    base = size_bytes / link.rate
    if link.jitter == 0:
        return base
    if rng is None:
        raise InvalidInputError("a random source is required when jitter is enabled")
    return base * (1.0 + rng.uniform(-link.jitter, link.jitter))


def total_latency(compute, transmission) -> LatencyBreakdown:
    compute = tuple(float(c) for c in compute)
    transmission = tuple(float(t) for t in transmission)
    if not compute:
        raise InvalidInputError("at least one tier must have run")
    if len(transmission) != len(compute) - 1:
        raise InvalidInputError(
            f"{len(compute)} tiers ran, so {len(compute) - 1} transmissions expected, "
            f"got {len(transmission)}")
    if any(v < 0 for v in compute + transmission):
        raise InvalidInputError("latencies must be non-negative")
    return LatencyBreakdown(compute, transmission)
