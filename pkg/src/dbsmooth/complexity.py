"""Analytic memory and flop-count models for the smoother family.

Two granularities are exposed. ``memory_estimate`` and ``flops_estimate``
evaluate the closed-form storage and cost expressions for whole runs, the
way one would compare algorithms on paper. ``appendix_b_breakdown`` prices
a single backward recursion task by task (backward prediction, the
per-particle pseudo-measurement work, weight products, and so on), which is
the level at which options like forward-weight reuse or storing the
measurement message actually bite.

All arithmetic is exact rational arithmetic; the printed constants contain
thirds and sixths from Cholesky-based inversion counts, and float rounding
would make equality tests meaningless. Results are returned as ints; the
rare closed-form total that is not a whole number is rounded half up (the
per-task constants themselves always combine to whole numbers).

Costs of evaluating the model's own matrices and functions (dynamics,
observation maps, their Jacobians) default to zero; they depend on the
model, not the algorithm, and are supplied through ``FunctionCosts`` when a
model-specific price is wanted. Resampling is priced at ``2*N_p`` flops.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional

from .errors import UnknownAlgorithm

__all__ = [
    "Dims",
    "FunctionCosts",
    "CostReport",
    "memory_estimate",
    "flops_estimate",
    "appendix_b_breakdown",
    "MEMORY_ALGORITHMS",
    "FLOPS_ALGORITHMS",
]

# Algorithms with a closed-form storage model. The marginal smoothers store
# exactly what their trajectory counterparts do, and the two external
# baselines with published storage models are kept for comparison tables.
MEMORY_ALGORITHMS = (
    "mpf",
    "dbf",
    "sdbf",
    "alg-l",
    "rbss",
    "sps",
    "dbsa",
    "sdbsa",
    "ddbsa",
    "sddbsa",
)

# Algorithms with a closed-form flop model (the four smoothers).
FLOPS_ALGORITHMS = ("dbsa", "sdbsa", "ddbsa", "sddbsa")


@dataclass(frozen=True)
class Dims:
    """Problem dimensions for the cost models.

    D is always D_L + D_N; it is exposed as a property rather than a field
    so the invariant cannot be violated by construction.
    """

    D_L: int
    D_N: int
    P: int
    N_p: int
    M: int = 1
    n_i: int = 1
    T: int = 1

    def __post_init__(self) -> None:
        for name in ("D_L", "D_N", "P", "N_p", "M", "n_i", "T"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def D(self) -> int:
        return self.D_L + self.D_N

    def degree_of_redundancy(self, case: str) -> int:
        """Size of the substate estimated by both interconnected filters:
        the whole nonlinear block in the redundant case, nothing in the
        disjoint case."""
        if case == "c1":
            return self.D_N
        if case == "c2":
            return 0
        raise ValueError(f"case must be 'c1' or 'c2', got {case!r}")


@dataclass(frozen=True)
class FunctionCosts:
    """Per-call flop prices of the model-supplied maps, all defaulting to
    zero (the estimator compares algorithms, and these costs are common to
    every algorithm run on the same model)."""

    state_transition: int = 0  # full-state dynamics map and its Jacobian
    linear_dynamics: int = 0  # A^(L)-style matrix evaluation
    nonlinear_dynamics: int = 0  # A^(N)-style matrix evaluation
    linear_drift: int = 0  # drift of the linear block
    nonlinear_drift: int = 0  # drift of the nonlinear block
    observation_matrix: int = 0  # linear-block observation matrix
    observation_jacobian: int = 0  # full observation Jacobian
    observation_offset: int = 0  # nonlinear observation offset


@dataclass(frozen=True)
class CostReport:
    """Single-recursion flop breakdown plus whole-run totals.

    phase_flops holds the three backward-recursion phases; term_flops the
    individual tasks inside them (per recursion, iteration counts already
    applied). flops_total and memory_reals cover whole runs per algorithm.
    """

    dims: Dims
    weight_reuse: bool
    store_measurement_message: bool
    phase_flops: Dict[str, int]
    term_flops: Dict[str, int]
    flops_total: Dict[str, int] = field(default_factory=dict)
    memory_reals: Dict[str, int] = field(default_factory=dict)

    def recursion_flops(self) -> int:
        return sum(self.phase_flops.values())


def _as_int(value: Fraction) -> int:
    """Exact when whole, otherwise round half up (documented behavior for
    the closed-form totals, whose dropped-term simplification can leave a
    stray third)."""
    if value.denominator == 1:
        return int(value)
    return int(value + Fraction(1, 2))


def memory_estimate(alg: str, dims: Dims) -> int:
    """Number of real scalars a whole run of ``alg`` keeps live.

    The forward-pass stores dominate: per-step Gaussian statistics for the
    Kalman-side filter and the particle cloud with its weights. The
    smoother variants add only the backward workspace on top of their
    forward filter's cache.
    """
    D_L, D_N, P = dims.D_L, dims.D_N, dims.P
    D = dims.D
    N_p, T = dims.N_p, dims.T
    del P  # storage models do not depend on the measurement size

    mpf = N_p * T * (2 * D_L**2 + 2 * D_L + D_N + 1)
    dbf = T * (2 * D**2 + 2 * D + N_p * D_N + N_p)
    sdbf = T * (2 * D_L**2 + 2 * D_L + N_p * D_N + N_p)

    table = {
        "mpf": mpf,
        "dbf": dbf,
        "sdbf": sdbf,
        "alg-l": mpf + D_L**2 + D,
        "rbss": mpf + D_L**2 + D,
        "sps": mpf + D_L**2 + D,
        "dbsa": dbf + N_p + D**2 + D + D_N,
        "sdbsa": dbf + N_p + D**2 + D + D_N,
        "ddbsa": sdbf + N_p + D_L**2 + D,
        "sddbsa": sdbf + N_p + D_L**2 + D,
    }
    key = alg.lower()
    if key not in table:
        raise UnknownAlgorithm(f"no storage model for algorithm {alg!r}")
    return table[key]


def flops_estimate(alg: str, dims: Dims, forward_flops_per_step: int = 0) -> int:
    """Whole-run flop count from the closed-form dominant-term model.

    The model keeps matrix inversions, matrix products and Cholesky
    factorizations and drops model-function evaluations; the forward
    filter's per-step cost enters symbolically through
    ``forward_flops_per_step`` (default 0, i.e. backward work only).
    Trajectory smoothers pay their per-pass bracket M times per step; the
    marginal smoothers run the same bracket once. The bracket is priced
    as a whole number of flops before scaling, so totals are exactly
    linear in M and T.
    """
    D_L, D_N = Fraction(dims.D_L), Fraction(dims.D_N)
    D = Fraction(dims.D)
    N_p, M, n_i, T = dims.N_p, dims.M, dims.n_i, dims.T

    per_particle = n_i * N_p * (
        2 * D_L**2 * D_N + 2 * D_L * D_N**2 + D_N**3 / 3 + 5 * D_L**3
    )
    key = alg.lower()
    if key in ("dbsa", "sdbsa"):
        bracket = Fraction(38, 3) * D**3 + Fraction(20, 3) * D_N**3 \
            + per_particle + 6 * n_i * D**3
    elif key in ("ddbsa", "sddbsa"):
        bracket = Fraction(38, 3) * D_L**3 + Fraction(20, 3) * D_N**3 \
            + per_particle + 6 * n_i * D_L**3
    else:
        raise UnknownAlgorithm(f"no flop model for algorithm {alg!r}")

    passes = M if key in ("dbsa", "ddbsa") else 1
    return T * (forward_flops_per_step + passes * _as_int(bracket))


def _term_table(
    dims: Dims, disjoint: bool, reuse: bool, store_ms: bool, fc: FunctionCosts
) -> Dict[str, Dict[str, Fraction]]:
    """Per-task flop prices of one backward recursion, keyed by phase.

    ``disjoint`` applies the documented substitution for the disjoint-case
    smoother: every Gaussian-block task runs on the linear block alone
    (D -> D_L, nonlinear size -> 0), while the per-particle tasks keep
    their printed prices.
    """
    D_L = Fraction(dims.D_L)
    D_N = Fraction(dims.D_N)
    P = Fraction(dims.P)
    N_p = dims.N_p

    # Gaussian-block sizes for this case.
    gD = D_L if disjoint else D_L + D_N
    gN = Fraction(0) if disjoint else D_N

    phase1 = {
        # Backward-predicted precision/transformed mean of the whole state:
        # one inversion sandwich plus the affine push-through.
        "predict_precision": fc.state_transition
        + Fraction(26, 3) * gD**3 - gD**2 / 2 + Fraction(5, 6) * gD,
        "predict_mean": 4 * gD**3 + 4 * gD**2 - 2 * gD,
        # Per-particle pseudo-measurement statistics for the nonlinear
        # block: residual, precision, transformed mean, covariance, mean.
        "pseudo_residuals": N_p * (fc.nonlinear_drift + D_N),
        "pseudo_precision": N_p * (fc.nonlinear_dynamics + 4 * D_N**3 - 2 * D_N**2),
        "pseudo_transformed_mean": N_p * (2 * D_N**3 + D_N**2 - D_N),
        "pseudo_covariance": N_p
        * (Fraction(2, 3) * D_N**3 + Fraction(3, 2) * D_N**2 + Fraction(5, 6) * D_N),
        "pseudo_mean": N_p * (2 * D_N**2 - D_N),
    }

    # Mixture moments of the pseudo-measurement message over the cloud.
    mix_mean = 2 * N_p * gD - gD
    mix_cov = (
        5 * N_p * D_L**2 + 4 * N_p * gN**2 + 4 * N_p * D_L * gN
        + D_L**2 + gN**2 + D_L * gN
    )
    phase2 = {
        "mixture_moments": mix_mean + mix_cov,
        # Fusing the backward message with the mixture (moment and
        # canonical views of the fused Gaussian).
        "backward_fuse": (Fraction(14, 3) * gD**3 + gD**2 / 2 + Fraction(5, 6) * gD)
        + (4 * gD**2 - gD)
        + (Fraction(2, 3) * gD**3 + Fraction(3, 2) * gD**2 + Fraction(5, 6) * gD)
        + (2 * gD**2 - gD),
        # Product with the forward estimate and recovery of its moments.
        "smooth_combine": gD**2 + gD
        + (Fraction(2, 3) * gD**3 + Fraction(3, 2) * gD**2 + Fraction(5, 6) * gD)
        + (2 * gD**2 - gD),
        # Per-particle transition factor to the backward state.
        "transition_weights": N_p
        * (
            fc.nonlinear_dynamics + fc.nonlinear_drift + 2 * D_L * D_N
            + 2 * D_L**2 * D_N + 2 * D_L * D_N**2 - D_L * D_N
            + D_N**3 / 3 + D_N**2 + Fraction(5, 3) * D_N + 2
            + 2 * D_N**2 + 2 * D_N - 1
        ),
        # Per-particle pseudo-measurement factor on the linear residual.
        "pseudo_weights": N_p
        * (
            fc.linear_dynamics + 2 * D_L**2
            + 4 * D_L**3 - D_L**2
            + Fraction(2, 3) * D_L**3 + Fraction(5, 2) * D_L**2 + Fraction(5, 6) * D_L
            + fc.linear_drift + 4 * D_L**2 - D_L
            + D_L**3 / 3 + 2 * D_L**2 + Fraction(5, 3) * D_L + 2
            + 6 * D_L**2 + 3 * D_L - 1
        ),
        # Per-particle measurement factor; skipped entirely under reuse.
        "measurement_weights": Fraction(0)
        if reuse
        else N_p
        * (
            fc.observation_matrix + fc.observation_offset + 2 * P * D_L
            + 2 * P * D_L**2 + 2 * P**2 * D_L - P * D_L
            + D_L**3 / 3 + D_L**2 + Fraction(5, 3) * D_L + 2
            + Fraction(2, 3) * P**3 + Fraction(7, 2) * P**2 + Fraction(17, 6) * P - 1
        ),
        # Combining the three factor families into unnormalized weights:
        # two exponent merges (one flop each under reuse) and the product.
        "weight_products": N_p * ((1 + 1 if reuse else 2 + 2) + 3),
        "weight_normalize": N_p + (2 * N_p - 1),
    }
    for name in (
        "mixture_moments",
        "backward_fuse",
        "smooth_combine",
        "transition_weights",
        "pseudo_weights",
        "measurement_weights",
        "weight_products",
        "weight_normalize",
    ):
        phase2[name] = dims.n_i * phase2[name]

    measurement_message = (
        Fraction(0)
        if store_ms
        else (
            fc.observation_jacobian
            + 2 * P**2 * gD + 2 * P * gD**2 - gD**2 - P * gD
            + fc.observation_matrix + fc.observation_offset
            + 2 * P**2 * gD + 3 * P * gD + 2 * P * D_L - P - gD
        )
    )
    phase3 = {
        # Redraws the conditioning particle (trajectory mode); the
        # marginal variants replace this with the weighted particle mean.
        "backward_draw": Fraction(2 * N_p),
        "mixture_moments_final": mix_mean + mix_cov,
        "backward_fuse_final": phase2["backward_fuse"] / dims.n_i,
        "measurement_message": measurement_message,
        "backward_state_update": gD**2 + gD
        + (Fraction(2, 3) * gD**3 + Fraction(3, 2) * gD**2 + Fraction(5, 6) * gD)
        + (2 * gD**2 - gD),
    }
    return {"phase1": phase1, "phase2": phase2, "phase3": phase3}


def appendix_b_breakdown(
    dims: Dims,
    weight_reuse: bool = True,
    store_measurement_message: bool = False,
    function_costs: Optional[FunctionCosts] = None,
) -> CostReport:
    """Price one backward recursion task by task and roll the result up to
    whole-run totals for all four smoothers.

    The per-recursion breakdown is computed for the redundant-case
    smoother; the whole-run totals substitute the disjoint-case Gaussian
    sizes where applicable and account for trajectory-vs-marginal pass
    counts (M*T versus T recursions). The marginal smoothers also swap the
    phase-3 particle draw for a weighted mean costing D_N*(2*N_p - 1).
    """
    fc = function_costs if function_costs is not None else FunctionCosts()

    totals: Dict[str, int] = {}
    for alg in FLOPS_ALGORITHMS:
        disjoint = alg in ("ddbsa", "sddbsa")
        marginal = alg in ("sdbsa", "sddbsa")
        table = _term_table(dims, disjoint, weight_reuse, store_measurement_message, fc)
        if marginal:
            table["phase3"]["backward_draw"] = Fraction(
                dims.D_N * (2 * dims.N_p - 1)
            )
        per_recursion = sum(sum(phase.values()) for phase in table.values())
        recursions = dims.T if marginal else dims.M * dims.T
        totals[alg] = recursions * _as_int(per_recursion)

    main = _term_table(dims, False, weight_reuse, store_measurement_message, fc)
    phase_flops = {
        phase: _as_int(sum(terms.values())) for phase, terms in main.items()
    }
    term_flops = {
        f"{phase}.{name}": _as_int(value)
        for phase, terms in main.items()
        for name, value in terms.items()
    }
    memory = {alg: memory_estimate(alg, dims) for alg in MEMORY_ALGORITHMS}
    return CostReport(
        dims=dims,
        weight_reuse=weight_reuse,
        store_measurement_message=store_measurement_message,
        phase_flops=phase_flops,
        term_flops=term_flops,
        flops_total=totals,
        memory_reals=memory,
    )
