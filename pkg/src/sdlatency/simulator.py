"""Discrete-event simulator of a continuously batched server with speculative decoding.

The engine runs back-to-back iterations.  Each iteration serves every admitted,
unfinished request: a request's first iteration is its prefill, every later
iteration is one decode cycle (a verify pass plus ``k`` draft passes when
speculation is on).  An iteration costs ``fixed + B * per_batch`` for each
phase it contains, with ``B`` the number of active requests, so the simulated
server realises the additive cost structure exactly and fits against it are
falsifiable.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import LoadPoint, Mode, ServingCoefficients, SweepDataset, WorkloadConfig
from .kernels import kernel as _default_kernel
from .moe import MoeRouting
from .speculative import (SpecCostCoefficients, SpecParams, effective_coefficients,
                          expected_accept_length)

ARRIVALS = ("constant_rate", "poisson")
BISECTION_STEPS = 12
SWEEP_RATES = 8
_QUEUE_SAMPLES = 256


@dataclass(frozen=True)
class PhaseCost:
    fixed: float = 0.0
    per_batch: float = 0.0

    def __post_init__(self):
        if not (self.fixed >= 0 and self.per_batch >= 0):
            raise ValueError("phase costs must be non-negative")


@dataclass(frozen=True)
class StepCosts:
    prefill: PhaseCost = PhaseCost()
    verify: PhaseCost = PhaseCost()
    draft: PhaseCost = PhaseCost()

    def as_array(self):
        return np.array([self.prefill.fixed, self.prefill.per_batch,
                         self.verify.fixed, self.verify.per_batch,
                         self.draft.fixed, self.draft.per_batch], dtype=np.float64)


@dataclass(frozen=True)
class SimConfig:
    """Simulator inputs.

    ``moe_saturation`` is the verify-phase increment charged in proportion to
    the sampled expert coverage; it needs ``routing``.  A run is flagged
    saturated when requests in system grow faster than both
    ``saturation_slope`` (requests/s) and ``saturation_growth`` times the
    offered rate over the final third of the arrival window.
    """

    step_costs: StepCosts
    workload: WorkloadConfig
    seed: int
    spec: Optional[SpecParams] = None
    routing: Optional[MoeRouting] = None
    moe_saturation: Optional[PhaseCost] = None
    arrival: str = "constant_rate"
    max_concurrency: Optional[int] = None
    warmup_requests: int = 2000
    measured_requests: int = 4000
    saturation_slope: float = 0.01
    saturation_growth: float = 0.005

    def __post_init__(self):
        if self.arrival not in ARRIVALS:
            raise ValueError(f"arrival must be one of {ARRIVALS}, got {self.arrival!r}")
        if self.measured_requests < 1 or self.warmup_requests < 0:
            raise ValueError("measured_requests must be >= 1 and warmup_requests >= 0")
        if self.max_concurrency is not None and self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.moe_saturation is not None and self.routing is None:
            raise ValueError("moe_saturation requires routing")
        wl = self.workload
        if self.spec is None and wl.mode is Mode.SD:
            object.__setattr__(self, "spec", SpecParams(wl.alpha, wl.draft_k))
        elif self.spec is not None and self.spec.k > 0:
            if wl.mode is Mode.DENSE:
                object.__setattr__(self, "workload", replace(
                    wl, mode=Mode.SD, alpha=self.spec.alpha, draft_k=self.spec.k))
            elif (wl.alpha, wl.draft_k) != (self.spec.alpha, self.spec.k):
                raise ValueError("spec disagrees with the workload's alpha/draft_k")

    @property
    def draft_k(self) -> int:
        return self.spec.k if self.spec is not None else 0

    def with_spec(self, alpha: float, k: int) -> "SimConfig":
        if k == 0:
            wl = replace(self.workload, mode=Mode.DENSE, alpha=None, draft_k=None)
            return replace(self, workload=wl, spec=None)
        wl = replace(self.workload, mode=Mode.SD, alpha=alpha, draft_k=k)
        return replace(self, workload=wl, spec=SpecParams(alpha, k))


@dataclass(frozen=True)
class SimResult:
    offered_rps: float
    closed_loop: bool
    arrival_times: np.ndarray
    completion_times: np.ndarray
    generated_tokens: np.ndarray  # raw tokens emitted, may overshoot g on the last cycle
    sd_cycles: np.ndarray
    mean_latency: float
    p95_latency: float
    p99_latency: float
    time_avg_concurrency: float
    achieved_rps: float
    saturated: bool
    queue_slope: float
    iterations: int
    extra: dict = field(default_factory=dict)

    @property
    def latencies(self) -> np.ndarray:
        return self.completion_times - self.arrival_times

    @property
    def n_requests(self) -> int:
        return int(self.arrival_times.size)

    @property
    def little_error(self) -> float:
        """Relative gap between measured concurrency and ``rps * latency``."""
        expected = self.achieved_rps * self.mean_latency
        return abs(self.time_avg_concurrency - expected) / expected

    def records(self):
        return [
            (float(a), float(c), float(c - a), int(t), int(n))
            for a, c, t, n in zip(self.arrival_times, self.completion_times,
                                  self.generated_tokens, self.sd_cycles)
        ]

    def load_point(self) -> LoadPoint:
        rps = 1.0 / self.mean_latency if self.closed_loop else self.offered_rps
        return LoadPoint(rps=rps, mean_latency=self.mean_latency,
                         p95_latency=self.p95_latency, p99_latency=self.p99_latency,
                         n_requests=self.n_requests, saturated=self.saturated)


class SplitMix64:
    """Seedable 64-bit stream shared by the compiled and pure-Python kernels."""

    def __init__(self, state: int):
        self.state = int(state) & 0xFFFFFFFFFFFFFFFF

    @classmethod
    def from_seed(cls, seed: int, run_index: int = 0) -> "SplitMix64":
        ss = np.random.SeedSequence(seed, spawn_key=(run_index,))
        return cls(int(ss.generate_state(1, np.uint64)[0]))


def sample_accepted(spec: SpecParams, rng: SplitMix64, size=None, kernel=None):
    """Tokens emitted by one speculative cycle: leading accepted drafts plus the bonus."""
    if spec.k < 1:
        raise ValueError("sampling acceptance needs k >= 1")
    kern = kernel or _default_kernel
    out, rng.state = kern.accept_counts(1 if size is None else int(size), spec.alpha, spec.k, rng.state)
    return int(out[0]) if size is None else out


def sample_expert_coverage(routing: MoeRouting, t: int, rng: SplitMix64, size=None, kernel=None):
    """Fraction of experts touched when ``t`` tokens each pick ``active`` distinct experts."""
    if t < 0:
        raise ValueError("t must be >= 0")
    kern = kernel or _default_kernel
    out, rng.state = kern.coverage_samples(1 if size is None else int(size), routing.active,
                                           routing.total, int(t), rng.state)
    return float(out[0]) if size is None else out


def nominal_coefficients(config: SimConfig) -> ServingCoefficients:
    """Latency-law coefficients the simulated server realises under load.

    Each request spends ``g / E`` decode cycles plus one admission iteration
    that, with other requests decoding, costs a full cycle.  Prefill costs
    are counted once, which is exact when prefill is free.
    """
    if config.moe_saturation is not None:
        raise ValueError("expert-coverage costs have no constant coefficients")
    sc = config.step_costs
    costs = SpecCostCoefficients(sc.prefill.fixed, sc.verify.fixed, sc.draft.fixed,
                                 sc.prefill.per_batch, sc.verify.per_batch, sc.draft.per_batch)
    spec = config.spec or SpecParams(0.0, 0)
    g = config.workload.decode_tokens
    return effective_coefficients(costs, spec, g + expected_accept_length(spec))


def _arrivals(config, rps, total, run_index):
    if config.arrival == "constant_rate":
        return np.arange(total, dtype=np.float64) / rps
    ss = np.random.SeedSequence(config.seed, spawn_key=(run_index, 1))
    gaps = np.random.default_rng(ss).exponential(1.0 / rps, size=total)
    gaps[0] = 0.0
    times = np.cumsum(gaps)
    # condition on the measured window realising the offered rate exactly
    first, last = config.warmup_requests, config.warmup_requests + config.measured_requests - 1
    if last > first and times[last] > times[first]:
        times *= ((last - first) / rps) / (times[last] - times[first])
    return times


def _in_system(arrivals, completions, times):
    a = np.sort(arrivals)
    c = np.sort(completions)
    return (np.searchsorted(a, times, side="right")
            - np.searchsorted(c, times, side="right")).astype(float)


def _queue_slope(arrivals, completions):
    """Least-squares growth rate of requests in system over the final third of arrivals."""
    t0, t1 = float(arrivals[0]), float(arrivals[-1])
    if t1 <= t0:
        return 0.0
    grid = np.linspace(t1 - (t1 - t0) / 3.0, t1, _QUEUE_SAMPLES)
    n = _in_system(arrivals, completions, grid)
    return float(np.polyfit(grid, n, 1)[0])


def _time_avg_concurrency(arrivals, completions, lo, hi):
    if hi <= lo:
        return 1.0
    overlap = np.clip(np.minimum(completions, hi) - np.maximum(arrivals, lo), 0.0, None)
    return float(overlap.sum() / (hi - lo))


def run_sim(config: SimConfig, offered_rps: Optional[float] = None, *, closed_loop=False,
            run_index: int = 0, kernel=None) -> SimResult:
    """Simulate one load level; ``closed_loop`` runs the one-at-a-time baseline."""
    kern = kernel or _default_kernel
    warm, meas = config.warmup_requests, config.measured_requests
    tail = 0 if closed_loop else warm
    total = warm + meas + tail
    if closed_loop:
        arrivals = np.zeros(total, dtype=np.float64)
        offered_rps = math.nan
    else:
        if offered_rps is None or not offered_rps > 0:
            raise ValueError("open-loop runs need offered_rps > 0")
        arrivals = _arrivals(config, offered_rps, total, run_index)

    rng = SplitMix64.from_seed(config.seed, run_index)
    k = config.draft_k
    alpha = config.spec.alpha if config.spec is not None else 0.0
    if config.routing is not None:
        moe_costs = np.array([config.moe_saturation.fixed, config.moe_saturation.per_batch]
                             if config.moe_saturation else [0.0, 0.0])
        m_act, m_tot = config.routing.active, config.routing.total
    else:
        moe_costs = np.zeros(2)
        m_act = m_tot = 0
    completion, tokens, cycles, iters, _ = kern.simulate(
        arrivals, bool(closed_loop), int(config.workload.decode_tokens), int(k), float(alpha),
        config.step_costs.as_array(), moe_costs, int(m_act), int(m_tot),
        int(config.max_concurrency or 0), rng.state)

    sel = slice(warm, warm + meas)
    arr_m, comp_m = arrivals[sel], completion[sel]
    lat = comp_m - arr_m
    lo, hi = float(arr_m[0]), float(arr_m[-1])
    if closed_loop:
        hi = float(comp_m[-1])
        conc = _time_avg_concurrency(arrivals, completion, lo, hi)
        achieved = meas / (hi - lo) if hi > lo else math.inf
        slope, saturated = 0.0, False
    else:
        conc = _time_avg_concurrency(arrivals, completion, lo, hi)
        slope = _queue_slope(arrivals, completion)
        saturated = slope > max(config.saturation_slope,
                                config.saturation_growth * offered_rps)
        # a stable run serves what it is offered; a saturated one only its throughput
        achieved = offered_rps
        if saturated and meas > 1:
            span = float(np.max(comp_m) - np.min(comp_m))
            if span > 0:
                achieved = min(offered_rps, (meas - 1) / span)
    return SimResult(
        offered_rps=float(offered_rps), closed_loop=bool(closed_loop),
        arrival_times=arr_m.copy(), completion_times=comp_m.copy(),
        generated_tokens=tokens[sel].copy(), sd_cycles=cycles[sel].copy(),
        mean_latency=float(lat.mean()),
        p95_latency=float(np.percentile(lat, 95)),
        p99_latency=float(np.percentile(lat, 99)),
        time_avg_concurrency=conc, achieved_rps=float(achieved),
        saturated=bool(saturated), queue_slope=slope, iterations=int(iters))


def find_max_stable_rate(config: SimConfig, *, max_doublings: int = 30, kernel=None,
                         baseline: Optional[SimResult] = None) -> float:
    """Largest non-saturating constant rate: doubling search, then bisection."""
    base = baseline or run_sim(config, closed_loop=True, kernel=kernel)
    index = iter(range(1000, 10_000))

    def stable(rate):
        return not run_sim(config, rate, run_index=next(index), kernel=kernel).saturated

    r0 = 1.0 / base.mean_latency if base.mean_latency > 0 else 1.0
    if stable(r0):
        lo, hi = r0, None
        for _ in range(max_doublings):
            if not stable(2.0 * lo):
                hi = 2.0 * lo
                break
            lo *= 2.0
        if hi is None:
            return lo
    else:
        hi, lo = r0, None
        for _ in range(max_doublings):
            if stable(hi / 2.0):
                lo = hi / 2.0
                break
            hi /= 2.0
        if lo is None:
            return hi / 2.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return lo


def sweep_rates(baseline_rps: float, ceiling: float, n: int = SWEEP_RATES):
    """``n`` evenly spaced rates strictly between the baseline and the ceiling."""
    return list(np.linspace(baseline_rps, ceiling, n + 2)[1:-1])


def run_sweep(config: SimConfig, *, kernel=None, workers: int = 1, return_runs=False):
    """Baseline, ceiling search, eight constant-rate runs; the ceiling is dropped.

    Returns the nine-point :class:`SweepDataset` (and the underlying runs when
    ``return_runs`` is set).
    """
    base = run_sim(config, closed_loop=True, kernel=kernel)
    ceiling = find_max_stable_rate(config, kernel=kernel, baseline=base)
    base_rps = 1.0 / base.mean_latency
    if not ceiling > base_rps:
        # pathological: no room above the baseline, spread below the ceiling instead
        ceiling = base_rps * (1.0 + 1e-3 * SWEEP_RATES)
    rates = sweep_rates(base_rps, ceiling)

    def one(item):
        i, r = item
        return run_sim(config, r, run_index=i + 1, kernel=kernel)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, enumerate(rates)))
    else:
        runs = [one(x) for x in enumerate(rates)]
    runs = [base] + runs
    ds = SweepDataset(config.workload, tuple(r.load_point() for r in runs))
    if return_runs:
        return ds, runs, ceiling
    return ds
