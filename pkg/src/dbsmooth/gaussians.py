"""Multivariate Gaussian message algebra in moment and canonical form.

Two parameterizations of the same density are used throughout:

- moment form: mean eta and covariance C
- canonical (information) form: precision W = C^-1 and transformed mean
  w = W @ eta

Products of densities are exact componentwise additions in canonical form,
which is why all fusion happens there; moment form is recovered only when
means or covariances are actually needed. Determinants and inversions go
through Cholesky factors throughout.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import (
    Diagnostics,
    DimensionMismatch,
    EmptyMixture,
    IndexOutOfRange,
    SingularCovariance,
    SingularPrecision,
)

__all__ = [
    "MomentGaussian",
    "CanonicalGaussian",
    "WeightedGaussianMixture",
    "to_canonical",
    "to_moment",
    "product",
    "marginalize",
    "gaussian_correlation",
    "log_density",
    "mixture_moments",
    "batched_log_density",
    "psd_clamp",
    "inv_psd",
    "inv_psd_jitter",
    "chol_lower",
    "logdet_psd",
]

# Relative thresholds for the PSD clamp and the jitter fallback. The clamp
# raises eigenvalues below NEG_EIG_REL*trace/D up to POS_EIG_REL*trace/D;
# degenerate particle clouds get JITTER_REL*trace/D added to the diagonal
# so the precision exists.
NEG_EIG_REL = -1e-10
POS_EIG_REL = 1e-12
JITTER_REL = 1e-9


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def _mat(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class MomentGaussian:
    """Gaussian in moment form: mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _vec(self.mean))
        object.__setattr__(self, "cov", _mat(self.cov))
        if self.cov.shape[0] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"mean has dim {self.mean.shape[0]}, cov is {self.cov.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class CanonicalGaussian:
    """Gaussian in canonical form: precision W and transformed mean w = W@eta.

    Rank-deficient precision is legal here; it represents flat directions
    (no information). Such objects cannot be converted to moment form.
    """

    precision: np.ndarray
    transformed_mean: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "precision", _mat(self.precision))
        object.__setattr__(self, "transformed_mean", _vec(self.transformed_mean))
        if self.precision.shape[0] != self.transformed_mean.shape[0]:
            raise DimensionMismatch(
                f"w has dim {self.transformed_mean.shape[0]}, "
                f"W is {self.precision.shape}"
            )

    @property
    def dim(self) -> int:
        return self.transformed_mean.shape[0]

    @classmethod
    def flat(cls, dim: int) -> "CanonicalGaussian":
        return cls(np.zeros((dim, dim)), np.zeros(dim))


@dataclass(frozen=True)
class WeightedGaussianMixture:
    """Finite mixture sum_j weight_j N(mean_j, cov_j), weights normalized."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = _vec(self.weights)
        if w.size == 0:
            raise EmptyMixture("mixture needs at least one component")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise EmptyMixture("mixture weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise EmptyMixture("mixture weights sum to zero")
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None, :, :]
        if means.shape[0] != w.size or covs.shape[0] != w.size:
            raise DimensionMismatch("component count mismatch")
        if covs.shape[1:] != (means.shape[1], means.shape[1]):
            raise DimensionMismatch("component dims differ")
        object.__setattr__(self, "weights", w / total)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @classmethod
    def from_components(
        cls, components: Sequence[Tuple[float, np.ndarray, np.ndarray]]
    ) -> "WeightedGaussianMixture":
        if len(components) == 0:
            raise EmptyMixture("mixture needs at least one component")
        w = [c[0] for c in components]
        mu = [_vec(c[1]) for c in components]
        cc = [_mat(c[2]) for c in components]
        return cls(np.array(w), np.array(mu), np.array(cc))

    @property
    def components(self):
        return list(zip(self.weights, self.means, self.covs))


# ---------------------------------------------------------------------------
# Cholesky plumbing


def chol_lower(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising SingularCovariance when not PD."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"matrix not positive definite: {exc}") from exc


def logdet_psd(mat: np.ndarray) -> float:
    """log det of a PD matrix via the Cholesky diagonal product."""
    L = chol_lower(mat)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@lru_cache(maxsize=64)
def _eye(d: int) -> np.ndarray:
    """Shared read-only identity; callers must never write into it."""
    return np.eye(d)


def inv_psd(mat: np.ndarray) -> np.ndarray:
    """Inverse of a PD matrix through its Cholesky factorization."""
    try:
        c = cho_factor(mat, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularCovariance(f"matrix not positive definite: {exc}") from exc
    inv = cho_solve(c, _eye(mat.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def inv_psd_jitter(
    mat: np.ndarray, diagnostics: Optional[Diagnostics] = None
) -> np.ndarray:
    """Inverse with a jitter retry, then a spectrum rescue, for
    numerically singular input.

    The retry adds JITTER_REL*trace/D to the diagonal, which is the policy
    for degenerate particle clouds. If the matrix stays indefinite beyond
    what the nudge covers, the eigenvalues are floored at a small positive
    fraction of the spectral radius and the inverse is taken on that
    clamped spectrum; a matrix with no positive spectrum at all still
    raises. Both events are counted in diagnostics when supplied.
    """
    try:
        return inv_psd(mat)
    except SingularCovariance:
        d = mat.shape[0]
        tr = float(np.trace(mat))
        if tr <= 0.0:
            raise
        if diagnostics is not None:
            diagnostics.jitter_applied += 1
    try:
        return inv_psd(mat + (JITTER_REL * tr / d) * np.eye(d))
    except SingularCovariance:
        pass
    evals, evecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vmax = float(evals[-1])
    if vmax <= 0.0:
        raise SingularCovariance("matrix has no positive spectrum")
    if diagnostics is not None:
        diagnostics.indefinite_clamp += 1
    floor = POS_EIG_REL * vmax
    inv = (evecs / np.maximum(evals, floor)) @ evecs.T
    return 0.5 * (inv + inv.T)


def psd_clamp(cov: np.ndarray, diagnostics: Optional[Diagnostics] = None) -> np.ndarray:
    """Symmetrize and clamp the spectrum of a would-be covariance.

    Covariance subtractions can go slightly indefinite; eigenvalues below
    NEG_EIG_REL*trace/D are raised to POS_EIG_REL*trace/D. The event is
    counted in diagnostics when supplied.
    """
    sym = 0.5 * (cov + cov.T)
    d = sym.shape[0]
    try:
        # positive definite input needs no spectral work
        np.linalg.cholesky(sym)
        return sym
    except np.linalg.LinAlgError:
        pass
    tr = float(np.trace(sym))
    scale = tr / d if tr > 0.0 else 0.0
    lo = NEG_EIG_REL * scale
    evals, evecs = np.linalg.eigh(sym)
    if evals[0] >= lo:
        return sym
    if diagnostics is not None:
        diagnostics.indefinite_clamp += 1
    clamped = np.where(evals < lo, POS_EIG_REL * scale, evals)
    out = (evecs * clamped) @ evecs.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Conversions and fusion


def to_canonical(g: MomentGaussian) -> CanonicalGaussian:
    """Moment -> canonical: W = C^-1, w = W @ eta."""
    W = inv_psd(g.cov)
    return CanonicalGaussian(W, W @ g.mean)


def to_moment(g: CanonicalGaussian) -> MomentGaussian:
    """Canonical -> moment: C = W^-1, eta = C @ w.

    A flat or rank-deficient precision has no moments; that raises
    SingularPrecision rather than returning an improper density.
    """
    try:
        C = inv_psd(g.precision)
    except SingularCovariance as exc:
        raise SingularPrecision(str(exc)) from exc
    return MomentGaussian(C @ g.transformed_mean, C)


def product(a: CanonicalGaussian, b: CanonicalGaussian) -> CanonicalGaussian:
    """Pointwise product of two Gaussian factors: exact addition of (W, w)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims {a.dim} and {b.dim}")
    return CanonicalGaussian(
        a.precision + b.precision, a.transformed_mean + b.transformed_mean
    )


def marginalize(g: MomentGaussian, keep: Iterable[int]) -> MomentGaussian:
    """Marginal over the kept coordinates: sub-vector and principal submatrix."""
    idx = np.asarray(list(keep), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= g.dim):
        raise IndexOutOfRange(f"keep indices {idx} outside 0..{g.dim - 1}")
    return MomentGaussian(g.mean[idx], g.cov[np.ix_(idx, idx)])


def gaussian_correlation(a: MomentGaussian, b: MomentGaussian) -> float:
    """Correlation of two Gaussian densities, int N_a(z) N_b(z) dz.

    Closed form: N(mu_a; mu_b, C_a + C_b). Symmetric in its arguments.
    Underflows to exactly 0.0 for means many sigma apart.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims {a.dim} and {b.dim}")
    csum = a.cov + b.cov
    L = chol_lower(csum)
    diff = solve_triangular(L, a.mean - b.mean, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    log_val = -0.5 * (
        a.dim * np.log(2.0 * np.pi) + logdet + float(diff @ diff)
    )
    return float(np.exp(log_val))


def log_density(g: MomentGaussian, x: np.ndarray) -> Tuple[float, float]:
    """Split density evaluation: (normalizer, quad).

    normalizer = (2 pi)^(-D/2) det(C)^(-1/2) and quad is the squared
    Mahalanobis norm of x - mean, so the density is normalizer*exp(-quad/2).
    The two pieces are returned separately because the per-particle weight
    formulas consume them separately.
    """
    L = chol_lower(g.cov)
    r = solve_triangular(L, _vec(x) - g.mean, lower=True, check_finite=False)
    quad = float(r @ r)
    normalizer = float(
        np.exp(-0.5 * (g.dim * np.log(2.0 * np.pi)) - np.sum(np.log(np.diag(L))))
    )
    return normalizer, quad


def batched_log_density(resid: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(resid_j; 0, cov_j) for a batch of residuals.

    resid is (J, P); covs is (J, P, P) or a single (P, P) shared by all
    rows. Rows whose covariance is not PD would raise, so callers that can
    see degenerate per-particle covariances clamp first.
    """
    resid = np.atleast_2d(np.asarray(resid, dtype=float))
    J, P = resid.shape
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 2:
        # shared covariance: one factorization serves every row
        try:
            L = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"covariance not positive definite: {exc}")
        half = solve_triangular(L, resid.T, lower=True, check_finite=False)
        quad = np.einsum("pj,pj->j", half, half)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * (P * np.log(2.0 * np.pi) + logdet + quad)
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"batch covariance not positive definite: {exc}")
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    sol = np.linalg.solve(covs, resid[..., None])[..., 0]
    quad = np.einsum("jp,jp->j", resid, sol)
    return -0.5 * (P * np.log(2.0 * np.pi) + logdet + quad)


def mixture_moments(
    m: WeightedGaussianMixture, diagnostics: Optional[Diagnostics] = None
) -> MomentGaussian:
    """Project a mixture onto the single Gaussian with the same moments.

    mean = sum_j w_j mu_j
    cov  = sum_j w_j (C_j + mu_j mu_j^T) - mean mean^T

    The covariance is symmetrized and PSD-clamped. Zero directions from a
    degenerate particle cloud are left in place here; inversion sites use
    inv_psd_jitter, which adds the relative jitter floor so the precision
    exists.
    """
    w = m.weights
    mean = w @ m.means
    second = np.einsum("j,jab->ab", w, m.covs) + np.einsum(
        "j,ja,jb->ab", w, m.means, m.means
    )
    cov = psd_clamp(second - np.outer(mean, mean), diagnostics)
    return MomentGaussian(mean, cov)
