"""Synthetic sweep builders shared by the test modules."""
import numpy as np

from sdlatency import (LoadPoint, MoeRouting, ServingCoefficients, SpecParams, SweepDataset,
                       WorkloadConfig, effective_coefficients, predict_latency,
                       predict_moe_latency, predict_moe_sd_latency)


def workload(alpha=None, k=None, g=64, prefill=128):
    if k:
        return WorkloadConfig("synthetic", "none", prefill, g, "sd", alpha, k)
    return WorkloadConfig("synthetic", "none", prefill, g)


def rates(c2, n=9, top=0.9):
    """``n`` rates from light load up to ``top`` of saturation."""
    return np.linspace(0.05, top, n) / c2


def noisy(values, noise, rng):
    values = np.asarray(values, dtype=float)
    if not noise:
        return values
    return values * (1.0 + noise * rng.standard_normal(values.size))


def eq1_dataset(c1, c2, n=9, noise=0.0, seed=0, top=0.9):
    rng = np.random.default_rng(seed)
    coeffs = ServingCoefficients(c1, c2)
    rps = rates(c2, n, top)
    lat = noisy([predict_latency(coeffs, r) for r in rps], noise, rng)
    return SweepDataset(workload(), tuple(LoadPoint(r, l) for r, l in zip(rps, lat)))


def eq3_datasets(costs, alphas, ks, g=64, n=9, noise=0.0, seed=0, top=0.9):
    rng = np.random.default_rng(seed)
    out = []
    for a in alphas:
        for k in ks:
            eff = effective_coefficients(costs, SpecParams(a, k), g)
            rps = rates(eff.c2, n, top)
            lat = noisy([predict_latency(eff, r) for r in rps], noise, rng)
            out.append(SweepDataset(workload(a, k, g),
                                    tuple(LoadPoint(r, l) for r, l in zip(rps, lat))))
    return out


def eq4_dataset(coeffs, routing: MoeRouting, rps, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    lat = noisy([predict_moe_latency(coeffs, routing, r) for r in rps], noise, rng)
    return SweepDataset(workload(), tuple(LoadPoint(r, l) for r, l in zip(rps, lat)))


def eq5_datasets(coeffs, routing, alphas, ks, g=64, n=9):
    out = []
    unsat = coeffs.unsaturated()
    for a in alphas:
        for k in ks:
            spec = SpecParams(a, k)
            eff = effective_coefficients(unsat, spec, g)
            # the saturated law diverges earlier; stay inside its stable range
            full = effective_coefficients(type(unsat)(coeffs.c1p, coeffs.c1vu + coeffs.c1vs,
                                                      coeffs.c1d, coeffs.c2p,
                                                      coeffs.c2vu + coeffs.c2vs, coeffs.c2d),
                                          spec, g)
            rps = rates(max(eff.c2, full.c2), n)
            lat = [predict_moe_sd_latency(coeffs, routing, spec, g, r) for r in rps]
            out.append(SweepDataset(workload(a, k, g),
                                    tuple(LoadPoint(r, l) for r, l in zip(rps, lat))))
    return out
