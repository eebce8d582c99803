"""Bounded Levenberg-Marquardt least squares.

Bounds are handled by clamping each trial point into the box and freezing
parameters that sit on a bound while the gradient pushes outward, so the
Jacobian stays in natural units.  The model may return non-finite values for
infeasible parameters (e.g. past saturation); such trial steps are rejected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, NonConvergenceError, SingularJacobianError

XTOL = 1e-10
FTOL = 1e-12
MAX_ITER = 10_000
LAMBDA_MAX = 1e16
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class FitResult:
    params: dict
    r2: Optional[float]
    rmse: float
    residuals: tuple
    n_points: int
    converged: bool
    iterations: int
    latency_column: str = "mean"
    model: str = "generic"
    cost: float = 0.0
    warnings: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def identifiable(self) -> bool:
        return not any(w.startswith("identifiability") for w in self.warnings)

    def values(self) -> np.ndarray:
        return np.array(list(self.params.values()), dtype=float)


def r_squared(observed, predicted) -> float:
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    if obs.shape != pred.shape or obs.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateError("observed values have zero variance")
    ss_res = float(np.sum((obs - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def _residuals(model, p, x, y, relative):
    try:
        pred = np.asarray(model(p, x), dtype=float)
    except (ArithmeticError, ValueError):
        return None
    if pred.shape != y.shape or not np.all(np.isfinite(pred)):
        return None
    r = pred - y
    return r / y if relative else r


def _jacobian(model, p, x, y, relative, lower, upper, r0, typical):
    n = p.size
    J = np.empty((y.size, n))
    for j in range(n):
        h = math.sqrt(_EPS) * max(abs(p[j]), typical[j])
        up = p.copy()
        dn = p.copy()
        up[j] = p[j] + h
        dn[j] = p[j] - h
        r_up = _residuals(model, up, x, y, relative) if up[j] <= upper[j] else None
        r_dn = _residuals(model, dn, x, y, relative) if dn[j] >= lower[j] else None
        if r_up is not None and r_dn is not None:
            J[:, j] = (r_up - r_dn) / (2 * h)
        elif r_up is not None:
            J[:, j] = (r_up - r0) / h
        elif r_dn is not None:
            J[:, j] = (r0 - r_dn) / h
        else:
            J[:, j] = np.nan
    return J


def _rank_deficient(J, free):
    Jf = J[:, free]
    if Jf.size == 0:
        return False
    norms = np.linalg.norm(Jf, axis=0)
    if np.any(norms == 0):
        return True
    s = np.linalg.svd(Jf / norms, compute_uv=False)
    return s[-1] < 1e-8 * s[0]


def least_squares(model, x, y, init, lower=None, upper=None, *, names=None,
                  relative=False, max_iter=MAX_ITER, strict=False,
                  latency_column="mean", model_name="generic"):
    """Fit ``model(params, x) ~ y``.

    Returns a :class:`FitResult`.  A fit that exhausts ``max_iter`` comes back
    with ``converged=False`` unless ``strict`` is set, in which case
    :class:`NonConvergenceError` is raised.
    """
    y = np.asarray(y, dtype=float)
    p = np.asarray(init, dtype=float).copy()
    n = p.size
    if y.size < n:
        raise ValueError(f"{y.size} points cannot determine {n} parameters")
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    names = list(names) if names is not None else [f"p{i}" for i in range(n)]
    p = np.clip(p, lower, upper)
    # difference-step scale; a parameter starting at zero gets unit scale
    typical = np.where(p != 0, np.abs(p), 1.0)

    r = _residuals(model, p, x, y, relative)
    if r is None:
        raise ValueError("model is not finite at the initial parameters")
    cost = float(r @ r)
    lam = 1e-3
    converged = cost == 0.0
    it = 0
    J = None
    while not converged and it < max_iter:
        it += 1
        J = _jacobian(model, p, x, y, relative, lower, upper, r, typical)
        if not np.all(np.isfinite(J)) or not np.any(J):
            raise SingularJacobianError("Jacobian is zero or not finite at the current parameters")
        grad = J.T @ r
        at_lo = (p <= lower) & (grad > 0)
        at_hi = (p >= upper) & (grad < 0)
        free = ~(at_lo | at_hi)
        if not np.any(free):
            converged = True
            break
        Jf = J[:, free]
        A = Jf.T @ Jf
        gf = grad[free]
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p.copy()
            trial[free] += step
            trial = np.clip(trial, lower, upper)
            r_new = _residuals(model, trial, x, y, relative)
            if r_new is not None:
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            # no descent left at machine precision
            converged = True
            break
        dp = np.linalg.norm(trial - p) / (np.linalg.norm(p) + 1e-300)
        df = (cost - cost_new) / cost
        p, r, cost = trial, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if dp < XTOL or df < FTOL or cost == 0.0:
            converged = True

    if not converged and strict:
        raise NonConvergenceError(f"no convergence after {it} iterations")

    warnings = []
    Jfinal = _jacobian(model, p, x, y, relative, lower, upper, r, typical)
    if np.all(np.isfinite(Jfinal)):
        grad = Jfinal.T @ r
        free = ~(((p <= lower) & (grad > 0)) | ((p >= upper) & (grad < 0)))
        if _rank_deficient(Jfinal, free):
            warnings.append("identifiability: Jacobian is rank deficient at the solution")

    pred = np.asarray(model(p, x), dtype=float)
    abs_res = pred - y
    try:
        r2 = r_squared(y, pred)
    except DegenerateError:
        r2 = None
    return FitResult(
        params=dict(zip(names, (float(v) for v in p))),
        r2=r2,
        rmse=float(np.sqrt(np.mean(abs_res ** 2))),
        residuals=tuple(float(v) for v in abs_res),
        n_points=int(y.size),
        converged=bool(converged),
        iterations=it,
        latency_column=latency_column,
        model=model_name,
        cost=cost,
        warnings=tuple(warnings),
        metadata={
            "init": [float(v) for v in np.asarray(init, dtype=float)],
            "lower": [float(v) for v in lower],
            "upper": [float(v) for v in upper],
            "residual_mode": "relative" if relative else "absolute",
        },
    )
