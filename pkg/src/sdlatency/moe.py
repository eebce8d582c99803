"""Latency of mixture-of-experts models with load-dependent expert coverage.

At low concurrency a step touches only a fraction of the experts, so part of
the per-step cost scales with the expected coverage ``phi(T)`` where ``T`` is
the number of routed tokens in flight.  Because ``T`` itself depends on the
latency (``T ~ rps * L``), latency is the smallest root of ``L = f(L)``.
"""
from __future__ import annotations

import math

import numpy as np
from dataclasses import dataclass

from .core import ServingCoefficients, predict_latency
from .errors import NoStableSolutionError, StabilityError
from .speculative import SpecCostCoefficients, SpecParams, expected_accept_length, predict_sd_latency

DAMPING = 0.5
MAX_ITER = 1000
L_CAP = 1e6
_ITER_RTOL = 1e-13
_SCAN_POINTS = 400


@dataclass(frozen=True)
class MoeRouting:
    active: int  # experts selected per token
    total: int

    def __post_init__(self):
        if self.active < 1 or self.total < self.active:
            raise ValueError(f"need 1 <= active <= total, got {self.active}/{self.total}")


@dataclass(frozen=True)
class MoeCoefficients:
    c1u: float
    c1s: float
    c2u: float
    c2s: float

    def __post_init__(self):
        for name in ("c1u", "c1s", "c2u", "c2s"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.c1u > 0:
            raise ValueError("c1u must be > 0")


@dataclass(frozen=True)
class MoeSpecCoefficients:
    c1p: float
    c1vu: float
    c1vs: float
    c1d: float
    c2p: float
    c2vu: float
    c2vs: float
    c2d: float

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.c1p + self.c1vu > 0:
            raise ValueError("c1p + c1vu must be positive")

    def unsaturated(self) -> SpecCostCoefficients:
        return SpecCostCoefficients(self.c1p, self.c1vu, self.c1d,
                                    self.c2p, self.c2vu, self.c2d)


def expert_coverage(routing: MoeRouting, t: float) -> float:
    """Expected fraction of experts hit by ``t`` uniformly routed tokens."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return 0.0
    if routing.active == routing.total:
        return 1.0
    # 1 - (1 - m/M)**t, accurate for small t
    return -math.expm1(t * math.log1p(-routing.active / routing.total))


def solve_fixed_point(f, lower: float) -> float:
    """Smallest root of ``L = f(L)`` at or above ``lower``.

    ``f`` must be non-decreasing and return ``math.inf`` where the latency law
    is unstable.  Damped iteration from ``lower`` approaches the smallest root
    monotonically; a bracketed bisection takes over if it stalls.
    """
    L = lower
    for _ in range(MAX_ITER):
        fl = f(L)
        if not math.isfinite(fl):
            break
        if abs(fl - L) <= _ITER_RTOL * L:
            return fl if abs(f(fl) - fl) <= _ITER_RTOL * fl else L
        L = (1.0 - DAMPING) * L + DAMPING * fl
    return _bisect_smallest_root(f, lower)


def _bisect_smallest_root(f, lower):
    def resid(x):
        return x - f(x)

    r_lo = resid(lower)
    if r_lo >= 0:
        return lower
    cap = max(L_CAP, 2.0 * lower)
    ratio = (cap / lower) ** (1.0 / _SCAN_POINTS)
    lo = lower
    for j in range(1, _SCAN_POINTS + 1):
        hi = lower * ratio ** j if j < _SCAN_POINTS else cap
        r_hi = resid(hi)
        if math.isnan(r_hi) or r_hi == -math.inf:
            # past the pole of f, nothing further can be stable
            break
        if r_hi >= 0:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if mid <= lo or mid >= hi:
                    break
                if resid(mid) >= 0:
                    hi = mid
                else:
                    lo = mid
            return hi
        lo = hi
    raise NoStableSolutionError(
        f"no stable fixed point in [{lower:g}, {cap:g}] s")


def _ratio(num, den):
    return num / den if den > 0 else math.inf


def predict_moe_latency(coeffs: MoeCoefficients, routing: MoeRouting, rps: float) -> float:
    if rps < 0:
        raise ValueError(f"rps must be >= 0, got {rps}")
    if rps == 0 or (coeffs.c1s == 0 and coeffs.c2s == 0):
        base = ServingCoefficients(coeffs.c1u, coeffs.c2u)
        try:
            return predict_latency(base, rps)
        except StabilityError as exc:
            raise NoStableSolutionError(str(exc)) from exc

    def f(L):
        phi = expert_coverage(routing, rps * L)
        return _ratio(coeffs.c1u + phi * coeffs.c1s,
                      1.0 - rps * (coeffs.c2u + phi * coeffs.c2s))

    if not math.isfinite(f(coeffs.c1u)):
        raise NoStableSolutionError(f"unstable already at minimal coverage, rps={rps:g}")
    return solve_fixed_point(f, coeffs.c1u)


def moe_residual(coeffs: MoeCoefficients, routing: MoeRouting, rps: float, L: float) -> float:
    """Relative residual ``|L - f(L)| / L`` of the MoE latency equation."""
    phi = expert_coverage(routing, rps * L)
    f = _ratio(coeffs.c1u + phi * coeffs.c1s, 1.0 - rps * (coeffs.c2u + phi * coeffs.c2s))
    return abs(L - f) / L


def _moe_sd_map(coeffs, routing, spec, g, rps):
    cycles = g / expected_accept_length(spec)
    k = spec.k
    tokens_per_request = k if k >= 1 else 1

    def f(L):
        phi = expert_coverage(routing, rps * L * tokens_per_request)
        num = coeffs.c1p + cycles * (coeffs.c1vu + phi * coeffs.c1vs + k * coeffs.c1d)
        den = 1.0 - rps * (coeffs.c2p + cycles * (coeffs.c2vu + phi * coeffs.c2vs + k * coeffs.c2d))
        return _ratio(num, den)

    return f


def predict_moe_sd_latency(coeffs: MoeSpecCoefficients, routing: MoeRouting,
                           spec: SpecParams, g: int, rps: float) -> float:
    """Speculative MoE latency; coverage counts ``rps * L * k`` verifier tokens."""
    if rps < 0:
        raise ValueError(f"rps must be >= 0, got {rps}")
    if rps == 0 or (coeffs.c1vs == 0 and coeffs.c2vs == 0):
        try:
            return predict_sd_latency(coeffs.unsaturated(), spec, g, rps)
        except StabilityError as exc:
            raise NoStableSolutionError(str(exc)) from exc
    f = _moe_sd_map(coeffs, routing, spec, g, rps)
    cycles = g / expected_accept_length(spec)
    lower = coeffs.c1p + cycles * (coeffs.c1vu + spec.k * coeffs.c1d)
    if not math.isfinite(f(lower)):
        raise NoStableSolutionError(f"unstable already at minimal coverage, rps={rps:g}")
    return solve_fixed_point(f, lower)


def moe_sd_residual(coeffs, routing, spec, g, rps, L) -> float:
    f = _moe_sd_map(coeffs, routing, spec, g, rps)
    return abs(L - f(L)) / L


def moe_sd_latency_batch(params, routing: MoeRouting, rps, cycles, k):
    """Vectorised MoE latency over many operating points.

    ``params`` is ``(c1p, c1vu, c1vs, c1d, c2p, c2vu, c2vs, c2d)``; ``rps``,
    ``cycles`` (= g / E) and ``k`` are arrays of equal length.  The plain MoE
    law is the special case ``c1p = c2p = c1d = c2d = 0``, ``cycles = 1``,
    ``k = 0``.  Points without a stable root come back as ``inf``.
    """
    c1p, c1vu, c1vs, c1d, c2p, c2vu, c2vs, c2d = (float(v) for v in params)
    rps = np.asarray(rps, dtype=float)
    cycles = np.asarray(cycles, dtype=float)
    k = np.asarray(k, dtype=float)
    tokens = np.where(k >= 1, k, 1.0)
    log_miss = math.log1p(-routing.active / routing.total) if routing.active < routing.total else -math.inf

    a1 = c1p + cycles * (c1vu + k * c1d)
    s1 = cycles * c1vs
    a2 = c2p + cycles * (c2vu + k * c2d)
    s2 = cycles * c2vs

    def F(L):
        t = rps * L * tokens
        with np.errstate(invalid="ignore", over="ignore"):
            phi = np.where(t > 0, -np.expm1(t * log_miss), 0.0)
        den = 1.0 - rps * (a2 + phi * s2)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, (a1 + phi * s1) / den, np.inf)

    L = a1.copy()
    done = np.zeros(L.shape, dtype=bool)
    out = np.full(L.shape, np.nan)
    for _ in range(MAX_ITER):
        f = F(L)
        bad = ~np.isfinite(f) & ~done
        done |= bad
        conv = ~done & (np.abs(f - L) <= _ITER_RTOL * L)
        out[conv] = f[conv]
        done |= conv
        if done.all():
            break
        L = np.where(done, L, (1.0 - DAMPING) * L + DAMPING * f)

    for i in np.flatnonzero(np.isnan(out)):
        def f_i(x, i=i):
            return float(F(np.full(L.shape, x))[i])
        if not math.isfinite(f_i(a1[i])):
            out[i] = np.inf
            continue
        try:
            out[i] = _bisect_smallest_root(f_i, a1[i])
        except NoStableSolutionError:
            out[i] = np.inf
    return out
