"""Fitting the latency laws to sweep measurements."""
from __future__ import annotations

import warnings
from dataclasses import replace
from typing import Iterable

import numpy as np

from .core import Mode, ServingCoefficients, SweepDataset
from .errors import (IdentifiabilityWarning, InsufficientDataError, NonConvergenceError,
                     NoStableSolutionError, StabilityError)
from .lm import FitResult, least_squares, r_squared
from .moe import MoeCoefficients, MoeRouting, MoeSpecCoefficients, moe_sd_latency_batch
from .speculative import SpecCostCoefficients, SpecParams, expected_accept_length

__all__ = [
    "FitResult", "least_squares", "r_squared", "fit_basic", "fit_spec", "fit_moe",
    "fit_moe_spec", "coefficients_of", "EQ1_PARAMS", "EQ3_PARAMS", "EQ4_PARAMS",
    "EQ5_PARAMS", "MULTISTART_FACTORS",
]

EQ1_PARAMS = ("c1", "c2")
EQ3_PARAMS = ("c1p", "c1v", "c1d", "c2p", "c2v", "c2d")
EQ4_PARAMS = ("c1u", "c1s", "c2u", "c2s")
EQ5_PARAMS = ("c1p", "c1vu", "c1vs", "c1d", "c2p", "c2vu", "c2vs", "c2d")
MULTISTART_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)

# keeps c1 strictly positive and rps_max * c2 strictly below 1
_C1_FLOOR = 1e-15
_STABILITY_MARGIN = 1e-9


def _columns(points, column):
    rps, lat = [], []
    for p in points:
        v = p.latency(column)
        if v is None or not v > 0:
            raise InsufficientDataError(
                f"{column} latency missing or non-positive at rps={p.rps:g}")
        rps.append(p.rps)
        lat.append(v)
    return np.array(rps), np.array(lat)


def _eq1_model(p, rps):
    den = 1.0 - rps * p[1]
    with np.errstate(divide="ignore"):
        return np.where(den > 0, p[0] / den, np.inf)


def fit_basic(dataset: SweepDataset, column: str = "mean", *, relative=False,
              include_saturated=False, strict=False) -> FitResult:
    """Fit ``(c1, c2)`` of the single-condition latency law."""
    points = dataset.points if include_saturated else dataset.stable_points()
    if len(points) < 3:
        raise InsufficientDataError(f"need >= 3 points, got {len(points)}")
    rps, lat = _columns(points, column)
    return _fit_eq1_arrays(rps, lat, column, relative=relative, strict=strict)


def _fit_eq1_arrays(rps, lat, column="mean", relative=False, strict=False):
    rps_max = float(rps.max())
    c2_hi = (1.0 - _STABILITY_MARGIN) / rps_max if rps_max > 0 else np.inf
    c1_0 = float(lat.min())
    if rps_max > 0:
        c2_0 = (1.0 - c1_0 / float(lat[np.argmax(rps)])) / rps_max
    else:
        c2_0 = 0.0
    c2_0 = min(max(c2_0, 0.0), 0.99 * c2_hi if np.isfinite(c2_hi) else c2_0)
    res = least_squares(_eq1_model, rps, lat, [c1_0, c2_0],
                        [_C1_FLOOR, 0.0], [np.inf, c2_hi], names=EQ1_PARAMS,
                        relative=relative, strict=strict, latency_column=column,
                        model_name="eq1")
    if np.isfinite(c2_hi) and res.params["c2"] >= c2_hi * (1.0 - 1e-6):
        raise StabilityError(
            "data can only be explained by a saturated server (c2 pinned at 1/max rps)",
            saturation_rate=rps_max)
    return res


class _SpecPoints:
    """Flattened (rps, cycles, k) inputs of a multi-condition sweep."""

    def __init__(self, datasets, column, include_saturated):
        datasets = list(datasets)
        if not datasets:
            raise InsufficientDataError("no datasets supplied")
        gs = {d.config.decode_tokens for d in datasets}
        if len(gs) != 1:
            raise ValueError(f"datasets mix decode lengths {sorted(gs)}")
        self.g = gs.pop()
        self.datasets = datasets
        rps, lat, cyc, ks, alphas = [], [], [], [], []
        for d in datasets:
            cfg = d.config
            spec = SpecParams(cfg.alpha if cfg.mode is Mode.SD else 0.0, cfg.k)
            pts = d.points if include_saturated else d.stable_points()
            r, l = _columns(pts, column)
            rps.append(r)
            lat.append(l)
            cyc.append(np.full(r.size, self.g / expected_accept_length(spec)))
            ks.append(np.full(r.size, spec.k, dtype=float))
            alphas.append(np.full(r.size, spec.alpha))
        self.rps = np.concatenate(rps)
        self.lat = np.concatenate(lat)
        self.cycles = np.concatenate(cyc)
        self.k = np.concatenate(ks)
        self.alpha = np.concatenate(alphas)

    def grid_warnings(self):
        out = []
        if np.unique(self.k).size < 2:
            out.append("identifiability: a single draft length cannot separate verify and draft costs")
        return out


def _eq3_model(p, pts):
    c1 = p[0] + pts.cycles * (p[1] + pts.k * p[2])
    c2 = p[3] + pts.cycles * (p[4] + pts.k * p[5])
    den = 1.0 - pts.rps * c2
    with np.errstate(divide="ignore"):
        return np.where(den > 0, c1 / den, np.inf)


def _stabilise(model, p, x, scale_idx):
    """Shrink the load-dependent terms until every point is stable."""
    p = np.array(p, dtype=float)
    for _ in range(200):
        if np.all(np.isfinite(model(p, x))):
            return p
        p[list(scale_idx)] *= 0.5
    raise StabilityError("could not find a stable starting point")


def _with_warnings(res: FitResult, extra, metadata) -> FitResult:
    allw = tuple(dict.fromkeys(tuple(res.warnings) + tuple(extra)))
    for w in allw:
        warnings.warn(w, IdentifiabilityWarning, stacklevel=3)
    return replace(res, warnings=allw, metadata={**res.metadata, **metadata})


def _densest(datasets, column, include_saturated):
    def usable(d):
        pts = d.points if include_saturated else d.stable_points()
        return sum(1 for p in pts if p.latency(column))
    return max(datasets, key=lambda d: (usable(d), -d.config.k))


def fit_spec(datasets: Iterable[SweepDataset], column: str = "mean", *, relative=False,
             include_saturated=False, strict=False) -> FitResult:
    """Jointly fit prefill/verify/draft costs over an (alpha, k) grid.

    Dense datasets enter as ``k = 0``.
    """
    pts = _SpecPoints(datasets, column, include_saturated)
    if pts.lat.size < len(EQ3_PARAMS):
        raise InsufficientDataError(f"need >= {len(EQ3_PARAMS)} points, got {pts.lat.size}")
    base = _densest(pts.datasets, column, include_saturated)
    b = fit_basic(base, column, relative=relative, include_saturated=include_saturated).params
    cfg = base.config
    spec = SpecParams(cfg.alpha if cfg.mode is Mode.SD else 0.0, cfg.k)
    per_token = (pts.g / expected_accept_length(spec)) * (1.0 + 0.01 * spec.k)
    c1v = 0.9 * b["c1"] / per_token
    c2v = 0.9 * b["c2"] / per_token
    init = [0.1 * b["c1"], c1v, 0.01 * c1v, 0.1 * b["c2"], c2v, 0.01 * c2v]
    init = _stabilise(_eq3_model, init, pts, (3, 4, 5))
    res = least_squares(_eq3_model, pts, pts.lat, init, np.zeros(6), np.full(6, np.inf),
                        names=EQ3_PARAMS, relative=relative, strict=strict,
                        latency_column=column, model_name="eq3")
    return _with_warnings(res, pts.grid_warnings(), {"g": pts.g, "init_from": list(cfg.group_key())})


def _moe_model(p, pts, routing, layout):
    if layout == "eq4":
        full = (0.0, p[0], p[1], 0.0, 0.0, p[2], p[3], 0.0)
    else:
        full = p
    return moe_sd_latency_batch(full, routing, pts.rps, pts.cycles, pts.k)


class _DensePoints:
    def __init__(self, rps):
        self.rps = rps
        self.cycles = np.ones_like(rps)
        self.k = np.zeros_like(rps)


def _multistart(model_fn, x, y, base_init, sat_idx, stab_idx, names, column, relative,
                strict, model_name):
    best = None
    starts = []
    for factor in MULTISTART_FACTORS:
        init = np.array(base_init, dtype=float)
        init[list(sat_idx)] *= factor
        try:
            init = _stabilise(model_fn, init, x, stab_idx)
            res = least_squares(model_fn, x, y, init, np.zeros(len(names)),
                                np.full(len(names), np.inf), names=names,
                                relative=relative, latency_column=column,
                                model_name=model_name)
        except (StabilityError, NoStableSolutionError, ValueError):
            starts.append({"factor": factor, "cost": None})
            continue
        starts.append({"factor": factor, "cost": res.cost, "converged": res.converged})
        key = (not res.converged, res.cost)
        if best is None or key < (not best.converged, best.cost):
            best = res
    if best is None:
        raise NoStableSolutionError("no multi-start initialisation produced a stable fit")
    if strict and not best.converged:
        raise NonConvergenceError("MoE fit did not converge from any start")
    return best, starts


def fit_moe(dataset: SweepDataset, routing: MoeRouting, column: str = "mean", *,
            relative=False, include_saturated=False, strict=False) -> FitResult:
    """Fit the coverage-corrected latency law (low-coverage + saturation costs)."""
    points = dataset.points if include_saturated else dataset.stable_points()
    if len(points) < len(EQ4_PARAMS):
        raise InsufficientDataError(f"need >= {len(EQ4_PARAMS)} points, got {len(points)}")
    rps, lat = _columns(points, column)
    b = _fit_eq1_arrays(rps, lat, column, relative).params
    base = [b["c1"], 0.1 * b["c1"], b["c2"], 0.1 * b["c2"]]
    x = _DensePoints(rps)

    def model(p, x):
        return _moe_model(p, x, routing, "eq4")

    res, starts = _multistart(model, x, lat, base, (1, 3), (2, 3), EQ4_PARAMS, column,
                              relative, strict, "eq4")
    extra = []
    if routing.active == routing.total:
        extra.append("identifiability: every token reaches all experts, the u/s split is unidentifiable")
    return _with_warnings(res, extra, {"routing": [routing.active, routing.total],
                                       "multistart": starts})


def fit_moe_spec(datasets: Iterable[SweepDataset], routing: MoeRouting, column: str = "mean",
                 *, relative=False, include_saturated=False, strict=False) -> FitResult:
    pts = _SpecPoints(datasets, column, include_saturated)
    if pts.lat.size < len(EQ5_PARAMS):
        raise InsufficientDataError(f"need >= {len(EQ5_PARAMS)} points, got {pts.lat.size}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentifiabilityWarning)
        s = fit_spec(pts.datasets, column, relative=relative,
                     include_saturated=include_saturated).params
    base = [s["c1p"], s["c1v"], 0.1 * s["c1v"], s["c1d"],
            s["c2p"], s["c2v"], 0.1 * s["c2v"], s["c2d"]]

    def model(p, x):
        return _moe_model(p, x, routing, "eq5")

    res, starts = _multistart(model, pts, pts.lat, base, (2, 6), (4, 5, 6, 7), EQ5_PARAMS,
                              column, relative, strict, "eq5")
    extra = pts.grid_warnings()
    if routing.active == routing.total:
        extra.append("identifiability: every token reaches all experts, the u/s split is unidentifiable")
    return _with_warnings(res, extra, {"g": pts.g, "routing": [routing.active, routing.total],
                                       "multistart": starts})


def coefficients_of(res: FitResult):
    """Typed coefficient object for a fit result."""
    p = res.params
    if res.model == "eq1":
        return ServingCoefficients(max(p["c1"], _C1_FLOOR), p["c2"])
    if res.model == "eq3":
        return SpecCostCoefficients(**p)
    if res.model == "eq4":
        return MoeCoefficients(**p)
    if res.model == "eq5":
        return MoeSpecCoefficients(**p)
    raise ValueError(f"no coefficient type for model {res.model!r}")
