"""Forward pass: a Gaussian filter and a particle filter exchanging
messages every step, plus a marginalized particle filter baseline.

Two interconnection cases share one code path:

- case "c1": the Gaussian filter tracks the full state, so both filters
  carry the nonlinear block and exchange redundant information about it;
- case "c2": the Gaussian filter tracks only the linear block, conditioned
  on the particle filter's nonlinear point estimates.

The per-step order is fixed: Gaussian measurement update (linearized at
the predicted mean), particle weight update against the freshly updated
linear marginal, particle pseudo-weighting by the Gaussian's nonlinear
marginal (c1 only), systematic resampling with an importance correction
for the pseudo factor, particle propagation with the linear block
marginalized out, a second Gaussian update built from the particle
transitions, then both time updates. Everything the backward smoother
consumes is stored per step in a ForwardCache.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateWeights,
    Diagnostics,
    DimensionMismatch,
    SingularCovariance,
    SingularPrecision,
)
from .gaussians import (
    JITTER_REL,
    CanonicalGaussian,
    MomentGaussian,
    WeightedGaussianMixture,
    batched_log_density,
    chol_lower,
    inv_psd,
    logdet_psd,
    mixture_moments,
    psd_clamp,
    to_canonical,
    to_moment,
)
from .models import ClgModel, batched_eval, linearize_markov, linearize_measurement
from .particles import (
    ParticleSet,
    RandomStream,
    effective_sample_size,
    normalize,
    systematic_indices,
)

__all__ = [
    "ForwardCache",
    "FilterState",
    "MpfState",
    "MpfRun",
    "ekf_measurement_update",
    "ekf_time_update",
    "pf_step",
    "forward_pseudo_update_linear",
    "dbf_recursion",
    "sdbf_recursion",
    "mpf_recursion",
    "run_dbf",
    "run_sdbf",
    "run_mpf",
]

# stream ids keyed off the run seed: 0 = truth simulation, 1 = forward
# filters, 2 = model construction, 3 = backward passes, 4 = the baseline
FORWARD_STREAM = 1
MPF_STREAM = 4

# Resample only when the effective sample size falls below this fraction of
# N_p; skipping the step when weights are healthy avoids needless ancestry
# collapse.
RESAMPLE_ESS_FRAC = 0.5


@dataclass(frozen=True)
class ForwardCache:
    """Per-step record of one forward run, consumed by the backward pass.

    The Gaussian entries have dimension D (case c1) or D_L (case c2):
    predicted moments, the measurement-updated canonical pair, the cached
    measurement information summands, and the linearized transition used
    at that step. Particle entries are the positions weighted at step k
    together with their predicted and measurement-updated weights.
    """

    case: str
    D_L: int
    D_N: int
    fp_mean: np.ndarray  # (T, dg)
    fp_cov: np.ndarray  # (T, dg, dg)
    W_fe1: np.ndarray  # (T, dg, dg)
    w_fe1: np.ndarray  # (T, dg)
    particles: np.ndarray  # (T, N_p, D_N)
    w_p: np.ndarray  # (T, N_p)
    w_fe: np.ndarray  # (T, N_p)
    F_lin: np.ndarray  # (T, dg, dg) transition k -> k+1
    u_lin: np.ndarray  # (T, dg)
    W_ms: np.ndarray  # (T, dg, dg) measurement information summand
    w_ms: np.ndarray  # (T, dg)
    ys: np.ndarray  # (T, P)
    x_fp_N: np.ndarray  # (T, D_N) predicted particle mean
    x_fe_N: np.ndarray  # (T, D_N) filtered particle mean
    estimates: np.ndarray  # (T, D_L + D_N) point estimates per step
    diagnostics: Diagnostics

    def __post_init__(self):
        T = self.fp_mean.shape[0]
        for attr in (
            "fp_cov",
            "W_fe1",
            "w_fe1",
            "particles",
            "w_p",
            "w_fe",
            "F_lin",
            "u_lin",
            "W_ms",
            "w_ms",
            "ys",
            "x_fp_N",
            "x_fe_N",
            "estimates",
        ):
            if getattr(self, attr).shape[0] != T:
                raise DimensionMismatch(f"cache field {attr} has wrong length")
        if self.case not in ("c1", "c2"):
            raise ConfigError(f"unknown cache case {self.case!r}")

    @property
    def T(self) -> int:
        return self.fp_mean.shape[0]

    @property
    def N_p(self) -> int:
        return self.particles.shape[1]

    @property
    def gauss_dim(self) -> int:
        return self.fp_mean.shape[1]


@dataclass(frozen=True)
class FilterState:
    """Predicted quantities entering step k: the Gaussian over the full
    state (c1) or the linear block (c2), and the particle set with its
    predicted weights."""

    gaussian: MomentGaussian
    particles: ParticleSet
    k: int


@dataclass(frozen=True)
class MpfState:
    """Per-particle Gaussian bank over the linear block, plus particles."""

    particles: ParticleSet
    means: np.ndarray  # (N_p, D_L)
    covs: np.ndarray  # (N_p, D_L, D_L)
    k: int


@dataclass(frozen=True)
class MpfRun:
    estimates: np.ndarray  # (T, D)
    diagnostics: Diagnostics


# ---------------------------------------------------------------------------
# Elementary updates


def _measurement_info(y, Ht, v, W_e):
    """Information summands of a linear(ized) measurement y = Ht x + v + e."""
    W_ms = Ht.T @ W_e @ Ht
    w_ms = Ht.T @ (W_e @ (np.asarray(y, dtype=float) - v))
    return 0.5 * (W_ms + W_ms.T), w_ms


def ekf_measurement_update(fp: CanonicalGaussian, y, Ht, v, C_e) -> CanonicalGaussian:
    """Information-form measurement update.

    Ht is the (P, dim) Jacobian of the measurement at the linearization
    point and v its affine offset, so the linearized model is
    y = Ht x + v + e with e ~ N(0, C_e). Precision never decreases.
    """
    W_e = inv_psd(np.asarray(C_e, dtype=float))
    W_ms, w_ms = _measurement_info(y, np.asarray(Ht, dtype=float), np.asarray(v, dtype=float), W_e)
    return CanonicalGaussian(fp.precision + W_ms, fp.transformed_mean + w_ms)


def ekf_time_update(fe: MomentGaussian, F, u, C_w) -> MomentGaussian:
    """Propagate a filtered Gaussian through x' = F x + u + w."""
    F = np.asarray(F, dtype=float)
    mean = F @ fe.mean + np.asarray(u, dtype=float)
    cov = F @ fe.cov @ F.T + np.asarray(C_w, dtype=float)
    return MomentGaussian(mean, 0.5 * (cov + cov.T))


def _exp_normalize(logw, fallback, diagnostics):
    """Exponentiate log weights with max-shift; on total collapse fall back
    to the supplied weights and count the event."""
    logw = np.asarray(logw, dtype=float)
    with np.errstate(invalid="ignore"):
        shift = np.nanmax(logw)
    if not np.isfinite(shift):
        diagnostics.weight_collapse += 1
        return normalize(fallback)
    w = np.exp(logw - shift)
    w[~np.isfinite(logw)] = 0.0
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        diagnostics.weight_collapse += 1
        return normalize(fallback)
    return w / total


def _draw_gaussian_batch(means, covs, rng):
    """One sample per row; covs (J, d, d) or a shared (d, d)."""
    means = np.asarray(means, dtype=float)
    J, d = means.shape
    covs = np.asarray(covs, dtype=float)
    if not np.any(covs):
        return means.copy()
    if covs.ndim == 2:
        L = np.linalg.cholesky(covs)
        return means + rng.standard_normal((J, d)) @ L.T
    L = np.linalg.cholesky(covs)
    return means + np.einsum("jab,jb->ja", L, rng.standard_normal((J, d)))


def _batched_spread(A, C, At=None):
    """A_j C A_j^T for (J, n, m) A and (m, m) or (J, m, m) C."""
    AC = A @ C
    B = A if At is None else At
    return AC @ np.swapaxes(B, -1, -2)


def _pf_meas_loglik(model, xN, eta_L, C_LL, y, k):
    """Per-particle measurement log density with the linear block
    marginalized against (eta_L, C_LL)."""
    J = xN.shape[0]
    B = batched_eval(model.eval_B, xN, k, (model.P, model.D_L))
    g = batched_eval(model.eval_g, xN, k, (model.P,))
    mu = g + np.einsum("jpl,l->jp", B, eta_L)
    resid = np.asarray(y, dtype=float) - mu
    if model.D_L >= model.P:
        S = _batched_spread(B, C_LL) + model.C_e
        return batched_log_density(resid, S)
    # S_j = B_j C B_j^T + C_e has rank-D_L structure over the larger
    # measurement space; go through the D_L x D_L capacitance instead of
    # factorizing J matrices of size P x P.
    W_e = inv_psd(model.C_e)
    L_c = chol_lower(C_LL)
    BL = B @ L_c
    WBL = W_e @ BL
    eye = np.eye(model.D_L)
    Mcap = eye + np.swapaxes(BL, -1, -2) @ WBL
    t = np.squeeze(np.swapaxes(WBL, -1, -2) @ resid[:, :, None], -1)
    sol = np.linalg.solve(Mcap, t[:, :, None])
    quad = np.einsum("jp,jp->j", resid, resid @ W_e) - np.einsum(
        "jl,jl->j", t, np.squeeze(sol, -1)
    )
    sign, logdet_cap = np.linalg.slogdet(Mcap)
    if np.any(sign <= 0):
        raise SingularCovariance("per-particle measurement covariance collapsed")
    logdet = logdet_psd(model.C_e) + logdet_cap
    return -0.5 * (model.P * np.log(2.0 * np.pi) + logdet + quad)


def pf_step(particles: ParticleSet, y, linear_marginal: MomentGaussian, model: ClgModel, k: int, rng, diagnostics=None):
    """One measurement-weight / resample / propagate cycle of the particle
    filter over the nonlinear block, with the linear block integrated out
    against the supplied marginal. Returns the particle set for step k+1."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    xN = particles.particles
    logw = np.log(np.maximum(particles.weights, 1e-300)) + _pf_meas_loglik(
        model, xN, linear_marginal.mean, linear_marginal.cov, y, k
    )
    w = _exp_normalize(logw, particles.weights, diagnostics)
    idx = systematic_indices(w, rng)
    xN_next, _, _ = _propagate_particles(
        model, xN[idx], linear_marginal.mean, linear_marginal.cov, k + 1, rng
    )
    return ParticleSet(xN_next, np.full(particles.size, 1.0 / particles.size))


def _propagate_particles(model, xN, eta_L, C_LL, k_next, rng):
    """Draw successors from the transition with the linear block
    marginalized: x' ~ N(A_j eta_L + f_j, A_j C_LL A_j^T + C_w_N)."""
    A = batched_eval(model.eval_AN, xN, k_next, (model.D_N, model.D_L))
    fN = batched_eval(model.eval_fN, xN, k_next, (model.D_N,))
    mu = fN + np.einsum("jnl,l->jn", A, eta_L)
    cov = _batched_spread(A, C_LL) + model.C_w_N
    return _draw_gaussian_batch(mu, cov, rng), A, fN


def forward_pseudo_update_linear(
    fe1: CanonicalGaussian,
    z: np.ndarray,
    A_batch: np.ndarray,
    C_w_N: np.ndarray,
    weights=None,
    D_L=None,
    diagnostics=None,
) -> CanonicalGaussian:
    """Second Gaussian update from the particle transitions.

    Each transition contributes the linear-block evidence
    z_j = x'_j - f_j ~ N(A_j x_L, C_w_N). The per-particle evidence
    Gaussians are projected onto a single moment-matched Gaussian over the
    linear block, which is then multiplied into fe1 in canonical form
    (zero-padded when fe1 covers the full state). A_batch of exact zeros
    carries no evidence and the update is a no-op.
    """
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    z = np.atleast_2d(np.asarray(z, dtype=float))
    J = z.shape[0]
    D_L = int(D_L) if D_L is not None else fe1.dim
    W_wN = inv_psd(np.asarray(C_w_N, dtype=float))
    A = np.asarray(A_batch, dtype=float)
    if A.ndim == 2:
        A = np.broadcast_to(A, (J,) + A.shape)
    At = np.swapaxes(A, -1, -2)
    W_t = At @ (W_wN @ A)
    W_t = 0.5 * (W_t + np.swapaxes(W_t, -1, -2))
    traces = np.trace(W_t, axis1=-2, axis2=-1)
    if np.all(traces <= 0.0):
        return fe1
    if np.any(traces <= 0.0):
        raise SingularPrecision("mixed zero and nonzero transition evidence")
    w_t = np.squeeze(At @ (W_wN @ z[:, :, None]), -1)
    eye = np.eye(D_L)
    try:
        np.linalg.cholesky(W_t)
        C_t = np.linalg.solve(W_t, np.broadcast_to(eye, (J, D_L, D_L)))
    except np.linalg.LinAlgError:
        diagnostics.jitter_applied += 1
        W_j = W_t + (JITTER_REL * traces / D_L)[:, None, None] * eye
        try:
            np.linalg.cholesky(W_j)
        except np.linalg.LinAlgError as exc:
            raise SingularPrecision(f"transition evidence not invertible: {exc}")
        C_t = np.linalg.solve(W_j, np.broadcast_to(eye, (J, D_L, D_L)))
    C_t = 0.5 * (C_t + np.swapaxes(C_t, -1, -2))
    eta_t = np.squeeze(C_t @ w_t[:, :, None], -1)
    if weights is None:
        weights = np.full(J, 1.0 / J)
    pm = mixture_moments(WeightedGaussianMixture(weights, eta_t, C_t), diagnostics)
    try:
        W_pm = inv_psd(pm.cov)
    except SingularCovariance:
        tr = float(np.trace(pm.cov))
        if tr <= 0.0:
            raise
        diagnostics.jitter_applied += 1
        W_pm = inv_psd(pm.cov + (JITTER_REL * tr / D_L) * np.eye(D_L))
    w_pm = W_pm @ pm.mean
    if fe1.dim == D_L:
        return CanonicalGaussian(fe1.precision + W_pm, fe1.transformed_mean + w_pm)
    W_pad = np.zeros((fe1.dim, fe1.dim))
    W_pad[:D_L, :D_L] = W_pm
    w_pad = np.zeros(fe1.dim)
    w_pad[:D_L] = w_pm
    return CanonicalGaussian(fe1.precision + W_pad, fe1.transformed_mean + w_pad)


# ---------------------------------------------------------------------------
# The interconnected filters


def _dual_step(state: FilterState, y, model: ClgModel, rng, diagnostics, W_e, case):
    """One step of the interconnected filters; returns the next state and
    the cache row for step k."""
    k = state.k
    D_L, D_N = model.D_L, model.D_N
    fp = state.gaussian
    xN = state.particles.particles
    w_p = state.particles.weights
    x_fp_N = normalize(w_p) @ xN

    # Gaussian measurement update, linearized (c1) or conditioned (c2) at
    # the predicted means.
    if case == "c1":
        Ht, v = linearize_measurement(model, fp.mean, k)
    else:
        Ht = np.asarray(model.eval_B(x_fp_N, k), dtype=float)
        v = np.asarray(model.eval_g(x_fp_N, k), dtype=float)
    W_ms, w_ms = _measurement_info(y, Ht, v, W_e)
    fp_can = to_canonical(fp)
    fe1 = CanonicalGaussian(fp_can.precision + W_ms, fp_can.transformed_mean + w_ms)
    fe1_m = to_moment(fe1)
    eta_L = fe1_m.mean[:D_L]
    C_LL = fe1_m.cov[:D_L, :D_L]

    # Particle measurement update. The linear block is integrated out
    # against its predicted marginal: the message the particles receive
    # must not already contain y_k, or the measurement counts twice.
    logw_fe = np.log(np.maximum(w_p, 1e-300)) + _pf_meas_loglik(
        model, xN, fp.mean[:D_L], fp.cov[:D_L, :D_L], y, k
    )

    # When both filters cover the nonlinear block, the Gaussian filter's
    # filtered nonlinear marginal reaches the particle filter as a
    # pseudo-measurement and becomes part of the filtered weights. This is
    # the redundancy that anchors the cloud: the same observation reaches
    # the particles twice, once directly and once through the Gaussian
    # filter, so a cloud drifting off the Gaussian track is pulled back
    # instead of starving to a handful of survivors.
    if case == "c1":
        resid = xN - fe1_m.mean[D_L:]
        C_NN = psd_clamp(fe1_m.cov[D_L:, D_L:], diagnostics)
        try:
            log_pseudo = batched_log_density(resid, C_NN)
        except SingularCovariance:
            tr = float(np.trace(C_NN))
            if tr <= 0.0:
                raise
            diagnostics.jitter_applied += 1
            log_pseudo = batched_log_density(
                resid, C_NN + (JITTER_REL * tr / D_N) * np.eye(D_N)
            )
        logw_fe = logw_fe + log_pseudo
    w_fe = _exp_normalize(logw_fe, w_p, diagnostics)
    x_fe_N = w_fe @ xN

    if effective_sample_size(w_fe) < RESAMPLE_ESS_FRAC * xN.shape[0]:
        idx = systematic_indices(w_fe, rng)
        xN_r = xN[idx]
        w_next = np.full(xN.shape[0], 1.0 / xN.shape[0])
    else:
        xN_r = xN
        w_next = w_fe

    # Propagate and feed the transitions back into the Gaussian filter.
    xN_next, A_prop, fN_prop = _propagate_particles(model, xN_r, eta_L, C_LL, k + 1, rng)
    fe2 = forward_pseudo_update_linear(
        fe1, xN_next - fN_prop, A_prop, model.C_w_N, None, D_L, diagnostics
    )
    fe2_m = to_moment(fe2)

    if case == "c1":
        estimate = np.concatenate([fe2_m.mean[:D_L], x_fe_N])
        F, u = linearize_markov(model, estimate, k + 1)
        fp_next = ekf_time_update(fe2_m, F, u, model.C_w)
    else:
        estimate = np.concatenate([fe2_m.mean, x_fe_N])
        F = np.asarray(model.eval_AL(x_fe_N, k + 1), dtype=float)
        u = np.asarray(model.eval_fL(x_fe_N, k + 1), dtype=float)
        fp_next = ekf_time_update(fe2_m, F, u, model.C_w_L)

    row = dict(
        fp_mean=fp.mean,
        fp_cov=fp.cov,
        W_fe1=fe1.precision,
        w_fe1=fe1.transformed_mean,
        particles=xN,
        w_p=np.asarray(w_p, dtype=float),
        w_fe=w_fe,
        F_lin=F,
        u_lin=u,
        W_ms=W_ms,
        w_ms=w_ms,
        y=np.asarray(y, dtype=float),
        x_fp_N=x_fp_N,
        x_fe_N=x_fe_N,
        estimate=estimate,
    )
    next_state = FilterState(fp_next, ParticleSet(xN_next, w_next), k + 1)
    return next_state, row


def dbf_recursion(state: FilterState, y, model: ClgModel, rng, diagnostics=None):
    """One step of the redundant-case filter (Gaussian over the full state)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W_e = inv_psd(model.C_e)
    return _dual_step(state, y, model, rng, diagnostics, W_e, "c1")


def sdbf_recursion(state: FilterState, y, model: ClgModel, rng, diagnostics=None):
    """One step of the disjoint-case filter (Gaussian over the linear block,
    conditioned on the particle point estimates)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W_e = inv_psd(model.C_e)
    return _dual_step(state, y, model, rng, diagnostics, W_e, "c2")


def _initial_state(model: ClgModel, N_p: int, rng, case: str) -> FilterState:
    init = model.initial_density
    D_L = model.D_L
    if case == "c1":
        g0 = init
    else:
        g0 = MomentGaussian(init.mean[:D_L], init.cov[:D_L, :D_L])
    muN = init.mean[D_L:]
    CNN = init.cov[D_L:, D_L:]
    xN0 = _draw_gaussian_batch(np.broadcast_to(muN, (N_p, model.D_N)).copy(), CNN, rng)
    return FilterState(g0, ParticleSet(xN0, np.full(N_p, 1.0 / N_p)), 0)


def _run_dual(model: ClgModel, ys: np.ndarray, N_p: int, seed: int, case: str) -> ForwardCache:
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    T = ys.shape[0]
    if ys.shape[1] != model.P:
        raise DimensionMismatch(f"measurements have {ys.shape[1]} rows, model has P={model.P}")
    rng = RandomStream(seed, FORWARD_STREAM).generator
    diagnostics = Diagnostics()
    W_e = inv_psd(model.C_e)
    state = _initial_state(model, N_p, rng, case)
    rows = []
    for k in range(T):
        state, row = _dual_step(state, ys[k], model, rng, diagnostics, W_e, case)
        rows.append(row)
    stack = lambda key: np.stack([r[key] for r in rows])
    return ForwardCache(
        case=case,
        D_L=model.D_L,
        D_N=model.D_N,
        fp_mean=stack("fp_mean"),
        fp_cov=stack("fp_cov"),
        W_fe1=stack("W_fe1"),
        w_fe1=stack("w_fe1"),
        particles=stack("particles"),
        w_p=stack("w_p"),
        w_fe=stack("w_fe"),
        F_lin=stack("F_lin"),
        u_lin=stack("u_lin"),
        W_ms=stack("W_ms"),
        w_ms=stack("w_ms"),
        ys=stack("y"),
        x_fp_N=stack("x_fp_N"),
        x_fe_N=stack("x_fe_N"),
        estimates=stack("estimate"),
        diagnostics=diagnostics,
    )


def run_dbf(model: ClgModel, ys: np.ndarray, N_p: int, seed: int) -> ForwardCache:
    """Run the redundant-case forward filter over a whole measurement
    record; deterministic in (model, ys, N_p, seed)."""
    return _run_dual(model, ys, N_p, seed, "c1")


def run_sdbf(model: ClgModel, ys: np.ndarray, N_p: int, seed: int) -> ForwardCache:
    """Run the disjoint-case (linear-block Gaussian) forward filter."""
    return _run_dual(model, ys, N_p, seed, "c2")


# ---------------------------------------------------------------------------
# Marginalized particle filter baseline


def _conditional_linear(init: MomentGaussian, D_L: int, xN: np.ndarray):
    """Conditional of the initial density's linear block given each
    particle's nonlinear position: means (J, D_L) and the common cov."""
    C = init.cov
    C_LL, C_LN, C_NN = C[:D_L, :D_L], C[:D_L, D_L:], C[D_L:, D_L:]
    if not np.any(C_LN):
        J = xN.shape[0]
        return np.broadcast_to(init.mean[:D_L], (J, D_L)).copy(), C_LL.copy()
    G = C_LN @ inv_psd(C_NN)
    means = init.mean[:D_L] + (xN - init.mean[D_L:]) @ G.T
    cov = psd_clamp(C_LL - G @ C_LN.T)
    return means, cov


def mpf_recursion(state: MpfState, y, model: ClgModel, rng, diagnostics=None):
    """One step of the marginalized particle filter: per-particle Kalman
    updates of the linear block, particle weighting, resampling, propagation
    from the per-particle predictive, transition evidence update, and the
    linear time update. Returns (next state, point estimate row)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    k = state.k
    D_L, D_N, P = model.D_L, model.D_N, model.P
    xN = state.particles.particles
    w_p = state.particles.weights
    m, C = state.means, state.covs
    J = xN.shape[0]
    eyeL = np.eye(D_L)

    B = batched_eval(model.eval_B, xN, k, (P, D_L))
    g = batched_eval(model.eval_g, xN, k, (P,))
    mu_y = g + np.einsum("jpl,jl->jp", B, m)
    S = _batched_spread(B, C) + model.C_e
    resid = np.asarray(y, dtype=float) - mu_y
    logw = np.log(np.maximum(w_p, 1e-300)) + batched_log_density(resid, S)
    w = _exp_normalize(logw, w_p, diagnostics)

    # Per-particle Kalman measurement update (Joseph form).
    BC = np.einsum("jpl,jlq->jpq", B, C)
    K = np.swapaxes(np.linalg.solve(S, BC), -1, -2)  # (J, D_L, P)
    m_u = m + np.einsum("jlp,jp->jl", K, resid)
    IKB = eyeL - np.einsum("jlp,jpq->jlq", K, B)
    C_u = _batched_spread(IKB, C) + _batched_spread(K, model.C_e)

    estimate = np.concatenate([w @ m_u, w @ xN])

    idx = systematic_indices(w, rng)
    xN_r, m_u, C_u = xN[idx], m_u[idx], C_u[idx]

    # Propagate from the per-particle marginalized predictive.
    A = batched_eval(model.eval_AN, xN_r, k + 1, (D_N, D_L))
    fN = batched_eval(model.eval_fN, xN_r, k + 1, (D_N,))
    mu_p = fN + np.einsum("jnl,jl->jn", A, m_u)
    S2 = _batched_spread(A, C_u) + model.C_w_N
    xN_next = _draw_gaussian_batch(mu_p, S2, rng)

    # Each particle's own transition is evidence about its linear block.
    AC = np.einsum("jnl,jlq->jnq", A, C_u)
    K2 = np.swapaxes(np.linalg.solve(S2, AC), -1, -2)
    innov = xN_next - mu_p
    m_ps = m_u + np.einsum("jln,jn->jl", K2, innov)
    IKA = eyeL - np.einsum("jln,jnq->jlq", K2, A)
    C_ps = _batched_spread(IKA, C_u) + _batched_spread(K2, model.C_w_N)

    A_L = batched_eval(model.eval_AL, xN_r, k + 1, (D_L, D_L))
    f_L = batched_eval(model.eval_fL, xN_r, k + 1, (D_L,))
    m_next = f_L + np.einsum("jlq,jq->jl", A_L, m_ps)
    C_next = _batched_spread(A_L, C_ps) + model.C_w_L

    next_state = MpfState(
        ParticleSet(xN_next, np.full(J, 1.0 / J)), m_next, C_next, k + 1
    )
    return next_state, estimate


def run_mpf(model: ClgModel, ys: np.ndarray, N_p: int, seed: int) -> MpfRun:
    """Run the marginalized particle filter baseline over a measurement
    record; returns per-step point estimates and diagnostics."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    T = ys.shape[0]
    rng = RandomStream(seed, MPF_STREAM).generator
    diagnostics = Diagnostics()
    init = model.initial_density
    muN, CNN = init.mean[model.D_L :], init.cov[model.D_L :, model.D_L :]
    xN0 = _draw_gaussian_batch(
        np.broadcast_to(muN, (N_p, model.D_N)).copy(), CNN, rng
    )
    means, cov0 = _conditional_linear(init, model.D_L, xN0)
    state = MpfState(
        ParticleSet(xN0, np.full(N_p, 1.0 / N_p)),
        means,
        np.broadcast_to(cov0, (N_p, model.D_L, model.D_L)).copy(),
        0,
    )
    estimates = np.empty((T, model.D))
    for k in range(T):
        state, estimates[k] = mpf_recursion(state, ys[k], model, rng, diagnostics)
    return MpfRun(estimates, diagnostics)
