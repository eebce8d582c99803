"""Linear scaling trends of fitted coefficients and their held-out validation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DegenerateError, InsufficientDataError
from .lm import r_squared

MAX_SUBSETS = 10_000


class Predictor(str, Enum):
    VERIFIER_PARAMS = "verifier_params"
    DRAFTER_PARAMS = "drafter_params"
    PREFILL_TOKENS = "prefill_tokens"
    EFFECTIVE_TOKENS = "effective_tokens"


@dataclass(frozen=True)
class ScalingTrend:
    slope: float
    intercept: float
    predictor: Predictor
    r2: float

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class LeaveNOutSummary:
    n: int
    folds: int
    r2: float  # predictive r2 of all held-out predictions pooled
    fold_r2_mean: float
    fold_r2_min: float
    full_r2: float
    pooling: str = "pooled"

    @property
    def headline(self) -> float:
        return self.r2 if self.pooling == "pooled" else self.fold_r2_mean


def effective_token_count(prefill: float, decode: float) -> float:
    """Average attended context per decode step: prefill plus half the decode."""
    if prefill < 0 or decode < 0:
        raise ValueError("token counts must be non-negative")
    return prefill + 0.5 * decode


def _ols(x, y):
    xm = x.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise DegenerateError("predictor has zero variance")
    slope = float(np.sum((x - xm) * (y - y.mean())) / sxx)
    return slope, float(y.mean() - slope * xm)


def fit_scaling_trend(points: Sequence, predictor="effective_tokens") -> ScalingTrend:
    """Ordinary least-squares line through ``(predictor value, coefficient)`` pairs."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise InsufficientDataError("need at least 2 (x, y) pairs")
    x, y = arr[:, 0], arr[:, 1]
    slope, intercept = _ols(x, y)
    pred = intercept + slope * x
    try:
        r2 = r_squared(y, pred)
    except DegenerateError:
        r2 = 1.0  # constant coefficient, reproduced exactly by a flat line
    return ScalingTrend(slope, intercept, Predictor(predictor), r2)


def _subsets(count, n, seed):
    total = math.comb(count, n)
    if total <= MAX_SUBSETS:
        yield from itertools.combinations(range(count), n)
        return
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SUBSETS):
        yield tuple(sorted(rng.choice(count, size=n, replace=False)))


def leave_n_out(points: Sequence, n: int, predictor="effective_tokens", *,
                pooling="pooled", seed=0) -> LeaveNOutSummary:
    """Hold out every ``n``-subset, refit the trend on the rest, score the held-out points.

    ``pooling="pooled"`` scores all held-out predictions together.  Per-fold
    scores use the variance of the full table as reference, since a fold of
    one or two points has no usable variance of its own.
    """
    arr = np.asarray(points, dtype=float)
    count = arr.shape[0] if arr.ndim == 2 else 0
    if n < 1 or count - n < 2:
        raise InsufficientDataError(
            f"leave-{n}-out needs at least {n + 2} configurations, got {count}")
    if pooling not in ("pooled", "per_fold"):
        raise ValueError(f"unknown pooling {pooling!r}")
    x, y = arr[:, 0], arr[:, 1]
    full = fit_scaling_trend(arr, predictor)
    ss_ref = float(np.sum((y - y.mean()) ** 2)) / count
    obs, pred, fold_scores = [], [], []
    folds = 0
    for held in _subsets(count, n, seed):
        mask = np.ones(count, dtype=bool)
        mask[list(held)] = False
        slope, intercept = _ols(x[mask], y[mask])
        yhat = intercept + slope * x[~mask]
        obs.append(y[~mask])
        pred.append(yhat)
        if ss_ref > 0:
            fold_scores.append(1.0 - float(np.mean((y[~mask] - yhat) ** 2)) / ss_ref)
        folds += 1
    obs = np.concatenate(obs)
    pred = np.concatenate(pred)
    try:
        pooled = r_squared(obs, pred)
    except DegenerateError:
        pooled = 1.0 if np.allclose(obs, pred) else -math.inf
    fold_scores = np.array(fold_scores) if fold_scores else np.array([pooled])
    return LeaveNOutSummary(n=n, folds=folds, r2=pooled,
                            fold_r2_mean=float(fold_scores.mean()),
                            fold_r2_min=float(fold_scores.min()),
                            full_r2=full.r2, pooling=pooling)
