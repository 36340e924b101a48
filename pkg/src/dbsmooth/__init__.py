"""Double Bayesian smoothing for conditionally linear Gaussian models.

The package couples a Kalman-side filter over a redundant (or disjoint)
Gaussian state representation with a particle filter over the nonlinear
block, then runs backward refinement passes that fuse both into smoothed
estimates, either as sampled backward trajectories or as reweighted
marginals. Bundled extras: two benchmark models, an exact linear-Gaussian
oracle, an analytic memory/flop model and a Monte Carlo harness with a
CLI front end (`dbsmooth`).
"""

from .errors import (
    ConfigError,
    DegenerateWeights,
    Diagnostics,
    DimensionMismatch,
    EstimationError,
    InvalidParam,
    LengthMismatch,
    SingularCovariance,
    ToleranceNotMet,
    UnknownAlgorithm,
)
from .gaussians import (
    CanonicalGaussian,
    MomentGaussian,
    WeightedGaussianMixture,
    gaussian_correlation,
    mixture_moments,
    product,
    to_canonical,
    to_moment,
)
from .particles import ParticleSet, RandomStream, effective_sample_size
from .models import ClgModel, Trajectory, simulate
from .benchmarks import ssm1_build, ssm2_build
from .forward import ForwardCache, MpfRun, run_dbf, run_mpf, run_sdbf
from .backward import SmootherOutput, run_smoother
from .oracle import LinearModel, kalman_filter, kalman_rts
from .complexity import (
    CostReport,
    Dims,
    appendix_b_breakdown,
    flops_estimate,
    memory_estimate,
)
from .bench import (
    BenchReport,
    BenchRow,
    ExperimentConfig,
    detect_divergence,
    emit_outputs,
    format_config,
    parse_config,
    rmse,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "BenchRow",
    "CanonicalGaussian",
    "ClgModel",
    "ConfigError",
    "CostReport",
    "DegenerateWeights",
    "Diagnostics",
    "DimensionMismatch",
    "Dims",
    "EstimationError",
    "ExperimentConfig",
    "ForwardCache",
    "InvalidParam",
    "LengthMismatch",
    "LinearModel",
    "MomentGaussian",
    "MpfRun",
    "ParticleSet",
    "RandomStream",
    "SingularCovariance",
    "SmootherOutput",
    "ToleranceNotMet",
    "Trajectory",
    "UnknownAlgorithm",
    "WeightedGaussianMixture",
    "appendix_b_breakdown",
    "detect_divergence",
    "effective_sample_size",
    "emit_outputs",
    "flops_estimate",
    "format_config",
    "gaussian_correlation",
    "kalman_filter",
    "kalman_rts",
    "memory_estimate",
    "mixture_moments",
    "parse_config",
    "product",
    "rmse",
    "run_dbf",
    "run_experiment",
    "run_mpf",
    "run_sdbf",
    "run_smoother",
    "simulate",
    "ssm1_build",
    "ssm2_build",
    "to_canonical",
    "to_moment",
]
