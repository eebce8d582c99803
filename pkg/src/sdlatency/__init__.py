"""Latency modeling for speculative decoding under continuous batching."""

__version__ = "0.1.0"

from .core import (LoadPoint, Mode, ServingCoefficients, SweepDataset, WorkloadConfig,
                   collapse_residual, effective_batch, normalize_point, predict_latency,
                   saturation_rate)
from .errors import (DegenerateError, IdentifiabilityWarning, InsufficientDataError,
                     MissingInputError, NoStableConfigError, NoStableSolutionError,
                     NonConvergenceError, ParseError, SchemaError, SdLatencyError,
                     SingularJacobianError, StabilityError, UnboundedError, ValidationError,
                     VersionError)
from .fit import (FitResult, coefficients_of, fit_basic, fit_moe, fit_moe_spec, fit_spec,
                  least_squares, r_squared)
from .moe import (MoeCoefficients, MoeRouting, MoeSpecCoefficients, expert_coverage,
                  moe_residual, moe_sd_residual, predict_moe_latency, predict_moe_sd_latency,
                  solve_fixed_point)
from .scaling import (LeaveNOutSummary, Predictor, ScalingTrend, effective_token_count,
                      fit_scaling_trend, leave_n_out)
from .simulator import (PhaseCost, SimConfig, SimResult, SplitMix64, StepCosts,
                        find_max_stable_rate, nominal_coefficients, run_sim, run_sweep,
                        sample_accepted, sample_expert_coverage)
from .speculative import (CostRatios, RatioMinima, SpecCostCoefficients, SpecParams,
                          cost_ratios, effective_coefficients, expected_accept_length,
                          latency_by_k, min_cost_ratios_over_k, optimal_draft_length,
                          predict_sd_latency, speedup)
