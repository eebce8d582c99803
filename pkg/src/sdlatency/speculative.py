"""Latency and speedup of speculative decoding under load.

A speculative cycle runs ``k`` drafter passes and one verifier pass and emits
on average ``E(alpha, k)`` tokens, so a request of ``g`` decode tokens needs
``g / E`` cycles.  Fixed and load-dependent costs are each composed from a
prefill part plus ``g / E`` cycles of verify and draft work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

from .core import ServingCoefficients, predict_latency
from .errors import DegenerateError, NoStableConfigError, StabilityError


@dataclass(frozen=True)
class SpecParams:
    alpha: float
    k: int

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if int(self.k) != self.k or self.k < 0:
            raise ValueError(f"k must be a non-negative integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))


@dataclass(frozen=True)
class SpecCostCoefficients:
    c1p: float
    c1v: float
    c1d: float
    c2p: float
    c2v: float
    c2d: float

    def __post_init__(self):
        for name in ("c1p", "c1v", "c1d", "c2p", "c2v", "c2d"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.c1p + self.c1v > 0:
            raise ValueError("c1p + c1v must be positive")

    def dense(self, g: int) -> ServingCoefficients:
        """Coefficients of plain autoregressive decoding (k = 0)."""
        return ServingCoefficients(self.c1p + g * self.c1v, self.c2p + g * self.c2v)


@dataclass(frozen=True)
class CostRatios:
    c1r: float
    c2r: float


class RatioMinima(NamedTuple):
    min_c1r: float
    argmin_k_c1r: int
    min_c2r: float
    argmin_k_c2r: int


def expected_accept_length(spec: SpecParams) -> float:
    """Mean tokens emitted per cycle, counting the verifier's bonus token."""
    a, k = spec.alpha, spec.k
    if k == 0 or a == 0.0:
        return 1.0
    if a == 1.0:
        return float(k + 1)
    if a < 0.5:
        return (1.0 - a ** (k + 1)) / (1.0 - a)
    # a - 1 is exact here; expm1/log1p keeps precision as a approaches 1
    return -math.expm1((k + 1) * math.log1p(a - 1.0)) / (1.0 - a)


def effective_coefficients(costs: SpecCostCoefficients, spec: SpecParams,
                           g: int) -> ServingCoefficients:
    if g < 1:
        raise ValueError(f"g must be >= 1, got {g}")
    cycles = g / expected_accept_length(spec)
    k = spec.k
    c1 = costs.c1p + cycles * (costs.c1v + k * costs.c1d)
    c2 = costs.c2p + cycles * (costs.c2v + k * costs.c2d)
    return ServingCoefficients(c1, c2)


def predict_sd_latency(costs: SpecCostCoefficients, spec: SpecParams, g: int,
                       rps: float) -> float:
    return predict_latency(effective_coefficients(costs, spec, g), rps)


def speedup(dense: ServingCoefficients, sd: ServingCoefficients, rps: float) -> float:
    """Dense-to-SD latency ratio in the load-decomposed form.

    ``(1 / c1r) * (1 + (1 - c2r) * r / (1 - r))`` with ``r = rps * dense.c2``.
    When ``dense.c2`` is zero the ratio form is undefined and the identical
    value ``(1 / c1r) * (1 - rps * sd.c2)`` is returned.
    """
    for name, c in (("dense", dense), ("sd", sd)):
        if rps * c.c2 >= 1.0:
            raise StabilityError(
                f"{name} system saturated at rps={rps:g} (1/c2 = {1.0 / c.c2:g})",
                saturation_rate=1.0 / c.c2)
    c1r = sd.c1 / dense.c1
    if dense.c2 == 0.0:
        return (1.0 / c1r) * (1.0 - rps * sd.c2)
    c2r = sd.c2 / dense.c2
    r = rps * dense.c2
    return (1.0 / c1r) * (1.0 + (1.0 - c2r) * r / (1.0 - r))


def cost_ratios(dense: ServingCoefficients, sd: ServingCoefficients) -> CostRatios:
    if dense.c2 == 0.0:
        raise DegenerateError("dense c2 is zero: the load-dependent cost ratio is undefined")
    return CostRatios(sd.c1 / dense.c1, sd.c2 / dense.c2)


def min_cost_ratios_over_k(per_k: Mapping[int, ServingCoefficients],
                           dense: ServingCoefficients) -> RatioMinima:
    if not per_k:
        raise ValueError("per_k must not be empty")
    best1 = best2 = None
    for k in sorted(per_k):
        ratios = cost_ratios(dense, per_k[k])
        # strict comparison keeps the smaller k on ties
        if best1 is None or ratios.c1r < best1[0]:
            best1 = (ratios.c1r, k)
        if best2 is None or ratios.c2r < best2[0]:
            best2 = (ratios.c2r, k)
    return RatioMinima(best1[0], best1[1], best2[0], best2[1])


def latency_by_k(costs: SpecCostCoefficients, alpha: float, g: int, rps: float,
                 k_max: int) -> dict:
    """Predicted latency for every stable k in ``0..k_max``."""
    out = {}
    for k in range(k_max + 1):
        try:
            out[k] = predict_sd_latency(costs, SpecParams(alpha, k), g, rps)
        except StabilityError:
            continue
    return out


def optimal_draft_length(costs: SpecCostCoefficients, alpha: float, g: int,
                         rps: float, k_max: int) -> int:
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    lat = latency_by_k(costs, alpha, g, rps, k_max)
    if not lat:
        raise NoStableConfigError(
            f"no draft length in 0..{k_max} is stable at rps={rps:g}")
    best = min(lat.values())
    return min(k for k, v in lat.items() if v == best)
