"""Backward smoothing passes over a stored forward run.

A backward pass walks the forward cache from the last step to the first,
carrying a Gaussian backward message and a single backward particle. At
each step it

1. projects the per-particle transition evidence about the linear block
   onto a joint Gaussian pseudo-measurement (mixture moments under the
   current smoothed weights),
2. multiplies that into the backward-predicted Gaussian,
3. multiplies in the forward filtered Gaussian,
4. extracts the linear-block marginal and scores every particle by the
   backward particle's predictive density,
5. scores every particle by the overlap between the implied linear-block
   pseudo-evidence and its own transition,
7. scores every particle by the measurement likelihood (or reuses the
   forward weights),
8. combines all scores into new smoothed weights,

iterating 1..8 a configurable number of times, then finalizes: the
backward particle for the next step is sampled (trajectory mode) or set to
the weighted mean (marginal mode), and the Gaussian backward message is
rebuilt from the final weights plus the measurement information.

Four smoothers share this machinery: DBSA and SDBSA run on a full-state
forward cache (case c1), DDBSA and SDDBSA on a linear-block cache (case
c2) where the nonlinear component is handled by point conditioning.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ConfigMismatch,
    DegenerateWeights,
    Diagnostics,
    DimensionMismatch,
    SingularCovariance,
    UnknownAlgorithm,
)
from .gaussians import (
    JITTER_REL,
    NEG_EIG_REL,
    POS_EIG_REL,
    CanonicalGaussian,
    MomentGaussian,
    batched_log_density,
    inv_psd,
    inv_psd_jitter,
    psd_clamp,
    to_canonical,
    to_moment,
)
from .forward import ForwardCache
from .models import ClgModel
from .particles import ParticleSet, RandomStream, normalize, resample_one

__all__ = [
    "BackwardState",
    "StepWorkspace",
    "PmRecords",
    "SmootherOutput",
    "ALGORITHMS",
    "init_backward",
    "phase1_backward_predict",
    "precompute_pm_linear",
    "step1_pm_whole",
    "step2_be1",
    "step3_smooth_whole",
    "step4_bp_particle_weights",
    "step5_pm_particle_weights",
    "step5_decomposition",
    "step7_ms_particle_weights",
    "step8_combine",
    "phase2_iterate",
    "phase3_finalize",
    "run_smoother",
]

BACKWARD_STREAM = 3

# trajectory-mode smoothers sample the backward particle; marginal-mode
# smoothers collapse to the weighted mean and run a single pass
ALGORITHMS = {
    "dbsa": ("c1", "sample"),
    "sdbsa": ("c1", "mean"),
    "ddbsa": ("c2", "sample"),
    "sddbsa": ("c2", "mean"),
}


@dataclass(frozen=True)
class BackwardState:
    """Backward message entering step k-1: the Gaussian part in both
    parameterizations and the single backward particle, all describing
    step k."""

    be_gaussian: MomentGaussian
    be_canonical: CanonicalGaussian
    be_particle: np.ndarray
    k: int


@dataclass
class PmRecords:
    """Per-particle transition evidence about the linear block.

    z_j is the backward particle's residual against particle j's drift,
    (W_t, w_t) the canonical evidence it implies about the linear block,
    and (C_t, eta_t) the same in moment form. W_t and C_t are (J, .., ..)
    arrays or single matrices shared by all particles; flat marks evidence
    that carried no information and was floored to a proper wide Gaussian.
    """

    z: np.ndarray
    W_t: np.ndarray
    w_t: np.ndarray
    C_t: np.ndarray
    eta_t: np.ndarray
    flat: bool


@dataclass
class StepWorkspace:
    """Scratch state for one backward step: the iteration-independent
    precomputations plus the artifacts of the latest smoothed-weight
    iteration."""

    ctx: "StepContext"
    x_be_next: np.ndarray
    W_be: np.ndarray
    w_be: np.ndarray
    be_lin_mean: np.ndarray
    be_lin_cov: np.ndarray
    m1_W: np.ndarray
    m1_w: np.ndarray
    records: PmRecords
    weights: np.ndarray
    m2: Optional[MomentGaussian] = None
    m3: Optional[MomentGaussian] = None
    m4: Optional[MomentGaussian] = None
    eta1: Optional[np.ndarray] = None
    C1: Optional[np.ndarray] = None
    logw2: Optional[np.ndarray] = None
    logw3: Optional[np.ndarray] = None
    logw5: Optional[np.ndarray] = None
    cond_point: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SmootherOutput:
    """Result of one smoothing run.

    Trajectory mode fills `trajectories` with M backward draws of the full
    state per step; marginal mode fills the per-step particle weights and
    the Gaussian smoothed marginals. `estimates` always holds the point
    estimate per step: the trajectory mean, or the marginal means.
    """

    alg: str
    mode: str
    estimates: np.ndarray
    diagnostics: Diagnostics
    trajectories: Optional[np.ndarray] = None
    marginal_weights: Optional[np.ndarray] = None
    marginal_means: Optional[np.ndarray] = None
    marginal_covs: Optional[np.ndarray] = None


@dataclass
class StepContext:
    """Pass-independent per-step quantities shared by all backward passes:
    model evaluations at the cached particle positions and the canonical
    transition-evidence matrices they imply."""

    k: int
    xN: np.ndarray
    A_N: np.ndarray
    A_N_const: bool
    f_N: np.ndarray
    A_L: np.ndarray
    A_L_const: bool
    f_L: np.ndarray
    B: np.ndarray
    B_const: bool
    g: np.ndarray
    W_t: np.ndarray
    C_t: np.ndarray
    G_t: np.ndarray  # A_N^T W_wN, for the evidence shift
    pm_const: bool
    flat: bool


# ---------------------------------------------------------------------------
# Context construction


def _eval_maybe_const(fn, xN, k, trailing):
    out = np.asarray(fn(xN, k), dtype=float)
    want = (xN.shape[0],) + tuple(trailing)
    if out.shape == tuple(trailing):
        return out, True
    if out.shape == want:
        return out, False
    raise DimensionMismatch(
        f"evaluator returned {out.shape}, expected {want} or {tuple(trailing)}"
    )


def _invert_evidence(W_t, const, W_wN, D_L, diagnostics):
    """Moment form of the canonical transition evidence, flooring
    information-free evidence to a proper, very wide Gaussian."""
    floor = JITTER_REL * float(np.trace(W_wN)) / W_wN.shape[0]
    if const:
        if float(np.trace(W_t)) <= 0.0:
            diagnostics.flat_pseudo += 1
            W_flat = floor * np.eye(D_L)
            return W_flat, inv_psd(W_flat), True
        return W_t, inv_psd_jitter(W_t, diagnostics), False
    traces = np.trace(W_t, axis1=-2, axis2=-1)
    J = W_t.shape[0]
    eye = np.eye(D_L)
    if np.all(traces <= 0.0):
        diagnostics.flat_pseudo += 1
        W_flat = floor * eye
        C_flat = inv_psd(W_flat)
        return (
            np.broadcast_to(W_flat, (J, D_L, D_L)).copy(),
            np.broadcast_to(C_flat, (J, D_L, D_L)).copy(),
            True,
        )
    W_use = W_t
    if np.any(traces <= 0.0):
        diagnostics.flat_pseudo += 1
        W_use = W_t + floor * eye
    try:
        np.linalg.cholesky(W_use)
    except np.linalg.LinAlgError:
        diagnostics.jitter_applied += 1
        W_use = W_use + (JITTER_REL * np.maximum(traces, floor) / D_L)[:, None, None] * eye
    C_t = np.linalg.solve(W_use, np.broadcast_to(eye, (J, D_L, D_L)))
    return W_use, 0.5 * (C_t + np.swapaxes(C_t, -1, -2)), False


def _build_context(model: ClgModel, xN: np.ndarray, k: int, W_wN: np.ndarray, diagnostics: Diagnostics) -> StepContext:
    D_L, D_N, P = model.D_L, model.D_N, model.P
    xN = np.atleast_2d(np.asarray(xN, dtype=float))
    A_N, A_N_const = _eval_maybe_const(model.eval_AN, xN, k + 1, (D_N, D_L))
    f_N, _ = _eval_maybe_const(model.eval_fN, xN, k + 1, (D_N,))
    A_L, A_L_const = _eval_maybe_const(model.eval_AL, xN, k + 1, (D_L, D_L))
    f_L, _ = _eval_maybe_const(model.eval_fL, xN, k + 1, (D_L,))
    B, B_const = _eval_maybe_const(model.eval_B, xN, k, (P, D_L))
    g, _ = _eval_maybe_const(model.eval_g, xN, k, (P,))
    if A_N_const:
        G_t = A_N.T @ W_wN
        W_t = G_t @ A_N
        W_t = 0.5 * (W_t + W_t.T)
    else:
        G_t = np.einsum("jnl,nm->jlm", A_N, W_wN)
        W_t = np.einsum("jlm,jmq->jlq", G_t, A_N)
        W_t = 0.5 * (W_t + np.swapaxes(W_t, -1, -2))
    W_t, C_t, flat = _invert_evidence(W_t, A_N_const, W_wN, D_L, diagnostics)
    return StepContext(
        k=k,
        xN=xN,
        A_N=A_N,
        A_N_const=A_N_const,
        f_N=f_N,
        A_L=A_L,
        A_L_const=A_L_const,
        f_L=f_L,
        B=B,
        B_const=B_const,
        g=g,
        W_t=W_t,
        C_t=C_t,
        G_t=G_t,
        pm_const=A_N_const,
        flat=flat,
    )


def _pm_records(ctx: StepContext, x_be_next: np.ndarray) -> PmRecords:
    """The pass-dependent part of the transition evidence: residuals of the
    backward particle against each particle's drift, and the implied
    linear-block moments."""
    z = np.asarray(x_be_next, dtype=float) - ctx.f_N
    z = np.atleast_2d(z)
    if z.shape[0] == 1 and ctx.xN.shape[0] > 1:
        z = np.broadcast_to(z, (ctx.xN.shape[0], z.shape[1]))
    if ctx.pm_const:
        w_t = z @ ctx.G_t.T
        eta_t = w_t @ ctx.C_t.T
    else:
        w_t = np.einsum("jlm,jm->jl", ctx.G_t, z)
        eta_t = np.einsum("jlq,jq->jl", ctx.C_t, w_t)
    return PmRecords(z, ctx.W_t, w_t, ctx.C_t, eta_t, ctx.flat)


# ---------------------------------------------------------------------------
# Elementary backward operations


def _phase1_canonical(W_be, w_be, F, u, W_w):
    """Backward prediction in information form through x' = F x + u + w.

    Evaluated through the process-noise precision rather than the message
    precision: P = W_w - W_w (W_w + W_be)^-1 W_w equals the textbook
    W_be - W_be (.)^-1 W_be but keeps every intermediate bounded by W_w,
    so a sharply informative message (precision many orders above W_w)
    cannot cancel the result into an indefinite matrix.
    """
    Q = inv_psd(W_w + W_be)
    WQ = W_w @ Q
    P = W_w - WQ @ W_w
    P = 0.5 * (P + P.T)
    W1 = F.T @ P @ F
    w1 = F.T @ (WQ @ w_be - P @ u)
    return 0.5 * (W1 + W1.T), w1


def phase1_backward_predict(be: MomentGaussian, F, u, C_w) -> CanonicalGaussian:
    """Pull a backward message one step earlier through the linearized
    transition. Works in information form, so F need not be invertible;
    total diffusion (huge C_w) flattens the result."""
    can = to_canonical(be)
    W_w = inv_psd(np.asarray(C_w, dtype=float))
    W1, w1 = _phase1_canonical(
        can.precision,
        can.transformed_mean,
        np.asarray(F, dtype=float),
        np.asarray(u, dtype=float),
        W_w,
    )
    return CanonicalGaussian(W1, w1)


def precompute_pm_linear(particles, x_be_next, model: ClgModel, k: int, diagnostics: Optional[Diagnostics] = None) -> PmRecords:
    """Per-particle transition evidence records for step k, given the
    backward particle at step k+1. Rank-deficient evidence is floored by
    policy rather than raising."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W_wN = inv_psd(model.C_w_N)
    ctx = _build_context(model, np.atleast_2d(particles), k, W_wN, diagnostics)
    rec = _pm_records(ctx, x_be_next)
    J = ctx.xN.shape[0]
    if ctx.pm_const:
        rec = PmRecords(
            rec.z,
            np.broadcast_to(rec.W_t, (J,) + rec.W_t.shape).copy(),
            rec.w_t,
            np.broadcast_to(rec.C_t, (J,) + rec.C_t.shape).copy(),
            rec.eta_t,
            rec.flat,
        )
    return rec


def _mix_step1(ctx: StepContext, eta_t: np.ndarray, weights: np.ndarray, case: str, diagnostics: Diagnostics) -> MomentGaussian:
    """Moment-match the weighted per-particle evidence into one Gaussian:
    linear block from the evidence moments, nonlinear block from the
    particle locations (case c1), including the cross term. Weights must
    already be normalized."""
    w = weights
    eta_L = w @ eta_t
    spread_L = np.einsum("j,ja,jb->ab", w, eta_t, eta_t) - np.outer(eta_L, eta_L)
    if ctx.pm_const:
        C_LL = ctx.C_t + spread_L
    else:
        C_LL = np.einsum("j,jab->ab", w, ctx.C_t) + spread_L
    if case == "c2":
        return MomentGaussian(eta_L, psd_clamp(C_LL, diagnostics))
    x = ctx.xN
    eta_N = w @ x
    C_NN = np.einsum("j,ja,jb->ab", w, x, x) - np.outer(eta_N, eta_N)
    C_LN = np.einsum("j,ja,jb->ab", w, eta_t, x) - np.outer(eta_L, eta_N)
    D_L, D_N = eta_L.shape[0], eta_N.shape[0]
    mean = np.concatenate([eta_L, eta_N])
    cov = np.empty((D_L + D_N, D_L + D_N))
    cov[:D_L, :D_L] = C_LL
    cov[:D_L, D_L:] = C_LN
    cov[D_L:, :D_L] = C_LN.T
    cov[D_L:, D_L:] = C_NN
    return MomentGaussian(mean, psd_clamp(cov, diagnostics))


def step1_pm_whole(records: PmRecords, particles, weights, case: str = "c1", diagnostics: Optional[Diagnostics] = None) -> MomentGaussian:
    """Project the weighted transition-evidence mixture onto a single
    Gaussian pseudo-measurement over the state (c1) or the linear block
    (c2)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    xN = np.atleast_2d(np.asarray(particles, dtype=float))
    ctx = StepContext(
        k=-1,
        xN=xN,
        A_N=np.empty(0),
        A_N_const=False,
        f_N=np.empty(0),
        A_L=np.empty(0),
        A_L_const=False,
        f_L=np.empty(0),
        B=np.empty(0),
        B_const=False,
        g=np.empty(0),
        W_t=records.W_t,
        C_t=records.C_t,
        G_t=np.empty(0),
        pm_const=records.C_t.ndim == 2,
        flat=records.flat,
    )
    return _mix_step1(ctx, records.eta_t, normalize(weights), case, diagnostics)


def _step2(m1_W, m1_w, m2: MomentGaussian) -> MomentGaussian:
    """Combine the backward prediction (canonical) with the projected
    pseudo-measurement (moment) without inverting the latter:
    solve (C_2 W_1 + I) on the right-hand sides."""
    d = m2.dim
    lhs = m2.cov @ m1_W
    lhs.flat[:: d + 1] += 1.0
    rhs = np.empty((d, d + 1))
    rhs[:, :d] = m2.cov
    rhs[:, d] = m2.cov @ m1_w + m2.mean
    sol = np.linalg.solve(lhs, rhs)
    C3 = sol[:, :d]
    return MomentGaussian(sol[:, d], 0.5 * (C3 + C3.T))


def step2_be1(m1: CanonicalGaussian, m2: MomentGaussian) -> MomentGaussian:
    """First backward filtered Gaussian: the product of the backward
    prediction and the pseudo-measurement projection. A flat m1 returns
    m2 unchanged."""
    if m1.dim != m2.dim:
        raise DimensionMismatch(f"dims {m1.dim} and {m2.dim}")
    return _step2(m1.precision, m1.transformed_mean, m2)


def _canon_jitter(m: MomentGaussian, diagnostics: Diagnostics):
    W = inv_psd_jitter(m.cov, diagnostics)
    return W, W @ m.mean


def step3_smooth_whole(fe1: CanonicalGaussian, m3: MomentGaussian, diagnostics: Optional[Diagnostics] = None) -> MomentGaussian:
    """Smoothed Gaussian: multiply the forward filtered Gaussian into the
    backward filtered one (precision addition), returned in moment form."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W3, w3 = _canon_jitter(m3, diagnostics)
    W4 = fe1.precision + W3
    w4 = fe1.transformed_mean + w3
    C4 = inv_psd_jitter(W4, diagnostics)
    return MomentGaussian(C4 @ w4, C4)


def _rows(arr, J, trailing):
    out = np.asarray(arr, dtype=float)
    want = (J,) + tuple(trailing)
    if out.shape == want:
        return out
    return np.broadcast_to(out, want)


def _step4(ctx: StepContext, eta1, C1, x_be_next, C_w_N):
    """Log weight of each particle under the backward particle's predictive
    density through that particle's transition."""
    J = ctx.xN.shape[0]
    if ctx.A_N_const:
        mu = eta1 @ ctx.A_N.T + ctx.f_N
        cov = ctx.A_N @ C1 @ ctx.A_N.T + C_w_N
    else:
        mu = np.einsum("jnl,l->jn", ctx.A_N, eta1) + ctx.f_N
        AC = np.einsum("jnl,lq->jnq", ctx.A_N, C1)
        cov = np.einsum("jnq,jmq->jnm", AC, ctx.A_N) + C_w_N
    resid = _rows(np.asarray(x_be_next, dtype=float) - mu, J, (C_w_N.shape[0],))
    return batched_log_density(resid, 0.5 * (cov + np.swapaxes(cov, -1, -2)) if cov.ndim == 3 else 0.5 * (cov + cov.T))


def step4_bp_particle_weights(m4: MomentGaussian, x_be_next, particles, model: ClgModel, k: int, diagnostics: Optional[Diagnostics] = None):
    """Extract the linear-block marginal of the smoothed Gaussian and score
    every particle by the backward particle's predictive density. Returns
    (eta1, C1, log weights)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    D_L = model.D_L
    eta1 = m4.mean[:D_L]
    C1 = m4.cov[:D_L, :D_L]
    W_wN = inv_psd(model.C_w_N)
    ctx = _build_context(model, np.atleast_2d(particles), k, W_wN, diagnostics)
    return eta1, C1, _step4(ctx, eta1, C1, x_be_next, model.C_w_N)


def _psd_clamp_batch(covs, diagnostics):
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    d = sym.shape[-1]
    tr = np.trace(sym, axis1=-2, axis2=-1)
    scale = np.maximum(tr, 0.0) / d
    evals, evecs = np.linalg.eigh(sym)
    lo = NEG_EIG_REL * scale[:, None]
    bad = evals < lo
    if not np.any(bad):
        return sym
    diagnostics.indefinite_clamp += int(np.sum(np.any(bad, axis=-1)))
    clamped = np.where(bad, POS_EIG_REL * scale[:, None], evals)
    out = np.einsum("jab,jb,jcb->jac", evecs, clamped, evecs)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _step5(ctx: StepContext, eta1, C1, be_lin_mean, be_lin_cov, C_w_L, diagnostics):
    """Log overlap between the linear-block evidence implied by the
    backward message and each particle's own linear transition."""
    J = ctx.xN.shape[0]
    D_L = C_w_L.shape[0]
    if ctx.A_L_const:
        eta_z = be_lin_mean - ctx.A_L @ eta1
        C_z = psd_clamp(be_lin_cov - ctx.A_L @ C1 @ ctx.A_L.T, diagnostics)
        resid = _rows(eta_z - ctx.f_L, J, (D_L,))
        return batched_log_density(resid, C_z + C_w_L)
    eta_z = be_lin_mean - np.einsum("jlq,q->jl", ctx.A_L, eta1)
    AC = np.einsum("jlq,qr->jlr", ctx.A_L, C1)
    C_z = be_lin_cov - np.einsum("jlr,jmr->jlm", AC, ctx.A_L)
    C_z = _psd_clamp_batch(C_z, diagnostics)
    resid = _rows(eta_z - ctx.f_L, J, (D_L,))
    return batched_log_density(resid, C_z + C_w_L)


def step5_pm_particle_weights(eta1, C1, be_next_linear: MomentGaussian, particles, model: ClgModel, k: int, diagnostics: Optional[Diagnostics] = None):
    """Score every particle by the overlap of the backward message's
    linear-block residual with the particle's linear drift; equals the
    correlation of the two implied Gaussians. Returns log weights."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W_wN = inv_psd(model.C_w_N)
    ctx = _build_context(model, np.atleast_2d(particles), k, W_wN, diagnostics)
    return _step5(
        ctx,
        np.asarray(eta1, dtype=float),
        np.asarray(C1, dtype=float),
        be_next_linear.mean,
        be_next_linear.cov,
        model.C_w_L,
        diagnostics,
    )


def step5_decomposition(eta_z, C_z, f_L, C_w_L):
    """Normalizer/exponent split of one particle's overlap weight:
    returns (log_D2, Z2) with weight = exp(log_D2 - Z2/2). Test reference
    for the closed-form path."""
    eta_z = np.asarray(eta_z, dtype=float).reshape(-1)
    f_L = np.asarray(f_L, dtype=float).reshape(-1)
    C_z = np.asarray(C_z, dtype=float)
    C_w_L = np.asarray(C_w_L, dtype=float)
    D_L = eta_z.shape[0]
    W_z = inv_psd(C_z)
    W_wL = inv_psd(C_w_L)
    W2 = W_z + W_wL
    w2 = W_z @ eta_z + W_wL @ f_L
    eta2 = inv_psd(W2) @ w2
    Z2 = float(eta_z @ W_z @ eta_z + f_L @ W_wL @ f_L - eta2 @ W2 @ eta2)
    sign_z, logdet_Wz = np.linalg.slogdet(W_z)
    sign_w, logdet_WwL = np.linalg.slogdet(W_wL)
    sign_2, logdet_W2 = np.linalg.slogdet(W2)
    log_D2 = 0.5 * (logdet_Wz + logdet_WwL - logdet_W2) - 0.5 * D_L * np.log(
        2.0 * np.pi
    )
    return float(log_D2), Z2


def _step7(ctx: StepContext, eta1, C1, y, C_e):
    """Log measurement likelihood of each particle with the linear block
    integrated out against the smoothed linear marginal."""
    J = ctx.xN.shape[0]
    P = C_e.shape[0]
    if ctx.B_const:
        mu = eta1 @ ctx.B.T + ctx.g
        cov = ctx.B @ C1 @ ctx.B.T + C_e
        resid = _rows(np.asarray(y, dtype=float) - mu, J, (P,))
        return batched_log_density(resid, 0.5 * (cov + cov.T))
    mu = np.einsum("jpl,l->jp", ctx.B, eta1) + ctx.g
    BC = np.einsum("jpl,lq->jpq", ctx.B, C1)
    cov = np.einsum("jpq,jrq->jpr", BC, ctx.B) + C_e
    resid = _rows(np.asarray(y, dtype=float) - mu, J, (P,))
    return batched_log_density(resid, 0.5 * (cov + np.swapaxes(cov, -1, -2)))


def step7_ms_particle_weights(eta1, C1, y, particles, model: ClgModel, k: int, diagnostics: Optional[Diagnostics] = None):
    """Score every particle by the measurement likelihood under the
    smoothed linear marginal. Returns log weights."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    W_wN = inv_psd(model.C_w_N)
    ctx = _build_context(model, np.atleast_2d(particles), k, W_wN, diagnostics)
    return _step7(ctx, np.asarray(eta1, dtype=float), np.asarray(C1, dtype=float), y, model.C_e)


def _step8(log_w_p, logw2, logw3, logw5, fallback, diagnostics: Diagnostics) -> np.ndarray:
    logw = log_w_p + logw2 + logw3 + logw5
    shift = np.max(logw)
    if np.isfinite(shift):
        w = np.exp(logw - shift)
    else:
        finite = np.isfinite(logw)
        if not np.any(finite):
            diagnostics.backward_collapse += 1
            return normalize(fallback)
        w = np.zeros_like(logw)
        w[finite] = np.exp(logw[finite] - np.max(logw[finite]))
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        diagnostics.backward_collapse += 1
        return normalize(fallback)
    return w / total


def step8_combine(logw2, logw3, logw5, w_p, fallback, diagnostics: Optional[Diagnostics] = None) -> np.ndarray:
    """Combine the per-particle log scores with the predicted weights into
    normalized smoothed weights; on total collapse fall back to the
    supplied weights and count the event."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    log_w_p = np.log(np.maximum(np.asarray(w_p, dtype=float), 1e-300))
    return _step8(
        log_w_p,
        np.asarray(logw2, dtype=float),
        np.asarray(logw3, dtype=float),
        np.asarray(logw5, dtype=float),
        fallback,
        diagnostics,
    )


# ---------------------------------------------------------------------------
# Phases


def init_backward(cache: ForwardCache, rng, mode: str = "sample") -> BackwardState:
    """Backward state at the final step: the Gaussian part is the forward
    measurement-updated Gaussian; the backward particle is drawn by the
    forward weights (trajectory mode) or set to their mean (marginal
    mode)."""
    T = cache.T
    W = cache.W_fe1[T - 1]
    w = cache.w_fe1[T - 1]
    can = CanonicalGaussian(W, w)
    ps = ParticleSet(cache.particles[T - 1], cache.w_fe[T - 1])
    if mode == "sample":
        x_be = ps.particles[resample_one(ps, rng)].copy()
    else:
        x_be = normalize(ps.weights) @ ps.particles
    return BackwardState(to_moment(can), can, x_be, T - 1)


def phase2_iterate(
    model: ClgModel,
    cache: ForwardCache,
    k: int,
    ws: StepWorkspace,
    n_i: int,
    weight_reuse: bool = True,
    diagnostics: Optional[Diagnostics] = None,
) -> StepWorkspace:
    """Run the smoothed-weight iteration n_i times at step k, filling the
    workspace with the final weights and Gaussian artifacts."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    case = cache.case
    fe1 = CanonicalGaussian(cache.W_fe1[k], cache.w_fe1[k])
    w_fe = cache.w_fe[k]
    log_w_p = np.log(np.maximum(cache.w_p[k], 1e-300))
    # Reuse substitutes the forward measurement factor for step 7.  The
    # stored forward weights already include the prior weights, which step 8
    # adds separately, so divide them back out.
    log_w_fe = np.log(np.maximum(w_fe, 1e-300)) - log_w_p
    W_wL = None
    for n in range(n_i):
        if case == "c2" and n > 0:
            # re-condition the backward prediction on the current smoothed
            # nonlinear estimate
            if W_wL is None:
                W_wL = inv_psd(model.C_w_L)
            ws.cond_point = ws.weights @ ws.ctx.xN
            A_L = np.asarray(model.eval_AL(ws.cond_point, k + 1), dtype=float)
            f_L = np.asarray(model.eval_fL(ws.cond_point, k + 1), dtype=float)
            ws.m1_W, ws.m1_w = _phase1_canonical(ws.W_be, ws.w_be, A_L, f_L, W_wL)
        ws.m2 = _mix_step1(ws.ctx, ws.records.eta_t, ws.weights, case, diagnostics)
        ws.m3 = _step2(ws.m1_W, ws.m1_w, ws.m2)
        ws.m4 = step3_smooth_whole(fe1, ws.m3, diagnostics)
        ws.eta1 = ws.m4.mean[: model.D_L]
        ws.C1 = ws.m4.cov[: model.D_L, : model.D_L]
        ws.logw3 = _step4(ws.ctx, ws.eta1, ws.C1, ws.x_be_next, model.C_w_N)
        ws.logw2 = _step5(
            ws.ctx, ws.eta1, ws.C1, ws.be_lin_mean, ws.be_lin_cov, model.C_w_L, diagnostics
        )
        ws.logw5 = log_w_fe if weight_reuse else _step7(
            ws.ctx, ws.eta1, ws.C1, cache.ys[k], model.C_e
        )
        ws.weights = _step8(
            log_w_p, ws.logw2, ws.logw3, ws.logw5, w_fe, diagnostics
        )
    return ws


def phase3_finalize(
    model: ClgModel,
    cache: ForwardCache,
    k: int,
    ws: StepWorkspace,
    rng,
    mode: str = "sample",
    sample_linear: bool = False,
    W_e: Optional[np.ndarray] = None,
    diagnostics: Optional[Diagnostics] = None,
):
    """Close out step k: pick the backward particle, rebuild the Gaussian
    backward message from the final weights plus measurement information,
    and emit the smoothed state. Returns (state at k, x_be_L, x_be_N)."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    case = cache.case
    x_sm = ws.weights @ ws.ctx.xN
    if mode == "sample":
        cum = np.cumsum(ws.weights)
        j = int(
            np.searchsorted(cum, rng.random() * cum[-1], side="right").clip(
                0, ws.weights.shape[0] - 1
            )
        )
        x_be_N = ws.ctx.xN[j].copy()
    else:
        x_be_N = x_sm
    # rebuild the Gaussian chain with the final weights
    if case == "c2":
        A_L = np.asarray(model.eval_AL(x_sm, k + 1), dtype=float)
        f_L = np.asarray(model.eval_fL(x_sm, k + 1), dtype=float)
        m1_W, m1_w = _phase1_canonical(
            ws.W_be, ws.w_be, A_L, f_L, inv_psd(model.C_w_L)
        )
        B = np.asarray(model.eval_B(x_sm, k), dtype=float)
        g = np.asarray(model.eval_g(x_sm, k), dtype=float)
        if W_e is None:
            W_e = inv_psd(model.C_e)
        W_ms = B.T @ W_e @ B
        w_ms = B.T @ (W_e @ (cache.ys[k] - g))
    else:
        m1_W, m1_w = ws.m1_W, ws.m1_w
        W_ms = cache.W_ms[k]
        w_ms = cache.w_ms[k]
    m2f = _mix_step1(ws.ctx, ws.records.eta_t, ws.weights, case, diagnostics)
    m3f = _step2(m1_W, m1_w, m2f)
    W3f, w3f = _canon_jitter(m3f, diagnostics)
    W_be2 = W_ms + W3f
    w_be2 = w_ms + w3f
    C_be = inv_psd_jitter(W_be2, diagnostics)
    be_moment = MomentGaussian(C_be @ w_be2, C_be)
    state = BackwardState(be_moment, CanonicalGaussian(W_be2, w_be2), x_be_N, k)
    if sample_linear:
        L = np.linalg.cholesky(psd_clamp(ws.C1, diagnostics) + 1e-18 * np.eye(model.D_L))
        x_be_L = ws.eta1 + L @ rng.standard_normal(model.D_L)
    else:
        x_be_L = ws.eta1.copy()
    return state, x_be_L, x_be_N


# ---------------------------------------------------------------------------
# The full smoother


def _make_workspace(model, cache, k, ctx, state, case, W_w, diagnostics):
    W_be = state.be_canonical.precision
    w_be = state.be_canonical.transformed_mean
    be_m = state.be_gaussian
    D_L = model.D_L
    m1_W, m1_w = _phase1_canonical(W_be, w_be, cache.F_lin[k], cache.u_lin[k], W_w)
    return StepWorkspace(
        ctx=ctx,
        x_be_next=state.be_particle,
        W_be=W_be,
        w_be=w_be,
        be_lin_mean=be_m.mean[:D_L],
        be_lin_cov=be_m.cov[:D_L, :D_L],
        m1_W=m1_W,
        m1_w=m1_w,
        records=_pm_records(ctx, state.be_particle),
        weights=cache.w_fe[k].copy(),
        cond_point=cache.x_fe_N[k] if case == "c2" else None,
    )


def run_smoother(
    cache: ForwardCache,
    model: ClgModel,
    alg: str,
    M: Optional[int] = None,
    n_i: int = 1,
    weight_reuse: bool = True,
    seed: int = 0,
    sample_linear: bool = False,
) -> SmootherOutput:
    """Run one of the four smoothers over a forward cache.

    Trajectory-mode smoothers (DBSA, DDBSA) run M independent backward
    passes, each drawing one backward trajectory; the point estimate is
    the trajectory mean. Marginal-mode smoothers (SDBSA, SDDBSA) run a
    single deterministic pass that collapses the backward particle to the
    weighted mean and emit per-step weights and Gaussian marginals.
    """
    key = alg.strip().lower()
    if key not in ALGORITHMS:
        raise UnknownAlgorithm(f"no smoother named {alg!r}")
    case, mode = ALGORITHMS[key]
    if cache.case != case:
        raise ConfigMismatch(
            f"{alg} needs a {case} forward cache, got {cache.case}"
        )
    if n_i < 1:
        raise ConfigMismatch("n_i must be >= 1")
    T, N_p, D_L, D_N = cache.T, cache.N_p, model.D_L, model.D_N
    D = D_L + D_N
    if (cache.gauss_dim != (D if case == "c1" else D_L)) or cache.D_N != D_N:
        raise ConfigMismatch("cache dimensions do not match the model")
    passes = (M if M is not None else N_p) if mode == "sample" else 1
    if passes < 1:
        raise ConfigMismatch("M must be >= 1")
    diagnostics = Diagnostics()
    W_w = inv_psd(model.C_w if case == "c1" else model.C_w_L)
    W_wN = inv_psd(model.C_w_N)
    W_e = inv_psd(model.C_e)
    contexts = [
        _build_context(model, cache.particles[k], k, W_wN, diagnostics)
        for k in range(T - 1)
    ]
    fe1_T = to_moment(
        CanonicalGaussian(cache.W_fe1[T - 1], cache.w_fe1[T - 1])
    )

    if mode == "sample":
        trajectories = np.empty((passes, T, D))
        for m in range(passes):
            rng = RandomStream(seed, BACKWARD_STREAM, m).generator
            state = init_backward(cache, rng, "sample")
            trajectories[m, T - 1, :D_L] = fe1_T.mean[:D_L]
            trajectories[m, T - 1, D_L:] = state.be_particle
            for k in range(T - 2, -1, -1):
                ws = _make_workspace(
                    model, cache, k, contexts[k], state, case, W_w, diagnostics
                )
                ws = phase2_iterate(
                    model, cache, k, ws, n_i, weight_reuse, diagnostics
                )
                state, x_be_L, x_be_N = phase3_finalize(
                    model, cache, k, ws, rng, "sample", sample_linear, W_e, diagnostics
                )
                trajectories[m, k, :D_L] = x_be_L
                trajectories[m, k, D_L:] = x_be_N
        estimates = trajectories.mean(axis=0)
        return SmootherOutput(
            alg=key,
            mode="trajectories",
            estimates=estimates,
            diagnostics=diagnostics,
            trajectories=trajectories,
        )

    rng = RandomStream(seed, BACKWARD_STREAM, 0).generator
    dg = cache.gauss_dim
    weights_out = np.empty((T, N_p))
    means_out = np.empty((T, dg))
    covs_out = np.empty((T, dg, dg))
    estimates = np.empty((T, D))
    state = init_backward(cache, rng, "mean")
    weights_out[T - 1] = normalize(cache.w_fe[T - 1])
    means_out[T - 1] = fe1_T.mean
    covs_out[T - 1] = fe1_T.cov
    estimates[T - 1, :D_L] = fe1_T.mean[:D_L]
    estimates[T - 1, D_L:] = state.be_particle
    for k in range(T - 2, -1, -1):
        ws = _make_workspace(model, cache, k, contexts[k], state, case, W_w, diagnostics)
        ws = phase2_iterate(model, cache, k, ws, n_i, weight_reuse, diagnostics)
        state, x_be_L, x_be_N = phase3_finalize(
            model, cache, k, ws, rng, "mean", False, W_e, diagnostics
        )
        weights_out[k] = ws.weights
        means_out[k] = ws.m4.mean
        covs_out[k] = ws.m4.cov
        estimates[k, :D_L] = x_be_L
        estimates[k, D_L:] = x_be_N
    return SmootherOutput(
        alg=key,
        mode="marginals",
        estimates=estimates,
        diagnostics=diagnostics,
        marginal_weights=weights_out,
        marginal_means=means_out,
        marginal_covs=covs_out,
    )
