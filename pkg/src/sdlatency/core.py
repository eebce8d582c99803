"""Domain types and the steady-state latency law of a continuously batched server.

Mean latency under load follows ``L = c1 / (1 - rps * c2)``: a request pays a
load-independent cost ``c1`` plus ``c2`` for every other request sharing the
batch, and the batch size itself is ``rps * L`` by Little's Law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import StabilityError, UnboundedError


class Mode(str, Enum):
    DENSE = "dense"
    SD = "sd"


@dataclass(frozen=True)
class WorkloadConfig:
    """One experimental condition.

    ``alpha`` and ``draft_k`` are present exactly when ``mode`` is ``sd``.
    """

    model_id: str
    hardware_id: str
    prefill_tokens: int
    decode_tokens: int
    mode: Mode = Mode.DENSE
    alpha: Optional[float] = None
    draft_k: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.prefill_tokens < 1 or self.decode_tokens < 1:
            raise ValueError("prefill_tokens and decode_tokens must be >= 1")
        if self.mode is Mode.DENSE:
            if self.alpha is not None or self.draft_k is not None:
                raise ValueError("dense workloads carry no alpha/draft_k")
        else:
            if self.alpha is None or self.draft_k is None:
                raise ValueError("sd workloads need both alpha and draft_k")
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
            if self.draft_k < 1:
                raise ValueError(f"draft_k must be >= 1, got {self.draft_k}")

    @property
    def g(self) -> int:
        return self.decode_tokens

    @property
    def k(self) -> int:
        """Draft length, 0 for dense decoding."""
        return 0 if self.mode is Mode.DENSE else self.draft_k

    def group_key(self):
        return (self.model_id, self.hardware_id, self.prefill_tokens,
                self.decode_tokens, self.mode.value, self.alpha, self.draft_k)


@dataclass(frozen=True)
class LoadPoint:
    rps: float
    mean_latency: float
    p95_latency: Optional[float] = None
    p99_latency: Optional[float] = None
    n_requests: int = 1
    saturated: bool = False

    def __post_init__(self):
        if self.rps < 0:
            raise ValueError(f"rps must be >= 0, got {self.rps}")
        if not self.mean_latency > 0:
            raise ValueError(f"mean_latency must be > 0, got {self.mean_latency}")
        if self.n_requests < 1:
            raise ValueError("n_requests must be positive")
        if (self.p95_latency is not None and self.p99_latency is not None
                and self.p99_latency < self.p95_latency):
            raise ValueError("p99 latency below p95 latency")

    @property
    def effective_batch(self) -> float:
        return effective_batch(self.rps, self.mean_latency)

    def latency(self, column: str = "mean") -> Optional[float]:
        if column == "mean":
            return self.mean_latency
        if column == "p95":
            return self.p95_latency
        if column == "p99":
            return self.p99_latency
        raise ValueError(f"unknown latency column {column!r}")


@dataclass(frozen=True)
class SweepDataset:
    config: WorkloadConfig
    points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.rps))
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def stable_points(self):
        return tuple(p for p in self.points if not p.saturated)


@dataclass(frozen=True)
class ServingCoefficients:
    c1: float
    c2: float

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError(f"c1 must be > 0, got {self.c1}")
        if not self.c2 >= 0:
            raise ValueError(f"c2 must be >= 0, got {self.c2}")


def predict_latency(coeffs: ServingCoefficients, rps: float) -> float:
    if rps < 0:
        raise ValueError(f"rps must be >= 0, got {rps}")
    load = rps * coeffs.c2
    if load >= 1.0:
        sat = 1.0 / coeffs.c2
        raise StabilityError(
            f"rps={rps:g} is at or past saturation (1/c2 = {sat:g} rps)",
            saturation_rate=sat)
    return coeffs.c1 / (1.0 - load)


def effective_batch(rps: float, latency: float) -> float:
    """Average number of in-flight requests implied by Little's Law."""
    return rps * latency


def saturation_rate(coeffs: ServingCoefficients) -> float:
    if coeffs.c2 == 0:
        raise UnboundedError("c2 = 0: latency never diverges, saturation rate is infinite")
    return 1.0 / coeffs.c2


def normalize_point(coeffs: ServingCoefficients, point: LoadPoint, column: str = "mean"):
    """Map a measurement onto the universal curve ``y = 1 / (1 - x)``."""
    return point.rps * coeffs.c2, point.latency(column) / coeffs.c1


def collapse_residual(x: float, y: float) -> float:
    if x >= 1.0:
        return math.inf
    return y - 1.0 / (1.0 - x)
