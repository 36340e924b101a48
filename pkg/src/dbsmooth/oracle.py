"""Exact references for verification: a Kalman filter / RTS smoother for
affine-Gaussian models, and low-dimensional adaptive quadrature.

These live in the main tree (not under tests/) so the command line tool can
run them against user-supplied linear models.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DimensionMismatch, SingularCovariance, ToleranceNotMet
from .gaussians import MomentGaussian, chol_lower, inv_psd

__all__ = [
    "LinearModel",
    "kalman_filter",
    "kalman_rts",
    "quadrature_integrate",
    "gaussian_box",
]


@dataclass(frozen=True)
class LinearModel:
    """Time-invariant affine-Gaussian state-space model.

        x' = F x + u + w,  w ~ N(0, C_w)
        y  = Ht x + v + e,  e ~ N(0, C_e)

    `initial` is the prior for the state at row 0, before that row's
    measurement update. Covariances must be positive definite.
    """

    F: np.ndarray
    u: np.ndarray
    Ht: np.ndarray
    v: np.ndarray
    C_w: np.ndarray
    C_e: np.ndarray
    initial: MomentGaussian

    def __post_init__(self):
        for attr in ("F", "u", "Ht", "v", "C_w", "C_e"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        D = self.F.shape[0]
        P = self.Ht.shape[0]
        if self.F.shape != (D, D) or self.u.shape != (D,):
            raise DimensionMismatch("transition shapes")
        if self.Ht.shape != (P, D) or self.v.shape != (P,):
            raise DimensionMismatch("measurement shapes")
        if self.C_w.shape != (D, D) or self.C_e.shape != (P, P):
            raise DimensionMismatch("noise covariance shapes")
        if self.initial.dim != D:
            raise DimensionMismatch("initial density dimension")
        chol_lower(self.C_w)
        chol_lower(self.C_e)

    @property
    def D(self) -> int:
        return self.F.shape[0]

    @property
    def P(self) -> int:
        return self.Ht.shape[0]


def kalman_filter(model: LinearModel, ys: np.ndarray):
    """Forward pass. Returns (predicted, filtered), each a list of
    MomentGaussians per row of ys; predicted[0] is the initial density."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    F, u, Ht, v = model.F, model.u, model.Ht, model.v
    predicted, filtered = [], []
    m, C = model.initial.mean, model.initial.cov
    for k in range(ys.shape[0]):
        if k > 0:
            m = F @ m + u
            C = F @ C @ F.T + model.C_w
        predicted.append(MomentGaussian(m, C))
        S = Ht @ C @ Ht.T + model.C_e
        K = C @ Ht.T @ inv_psd(S)
        m = m + K @ (ys[k] - Ht @ m - v)
        IKH = np.eye(model.D) - K @ Ht
        C = IKH @ C @ IKH.T + K @ model.C_e @ K.T
        filtered.append(MomentGaussian(m, C))
    return predicted, filtered


def kalman_rts(model: LinearModel, ys: np.ndarray):
    """Exact smoothed marginals, one MomentGaussian per row of ys."""
    predicted, filtered = kalman_filter(model, ys)
    T = len(filtered)
    smoothed = [filtered[-1]]
    for k in range(T - 2, -1, -1):
        Pp = predicted[k + 1].cov
        try:
            G = filtered[k].cov @ model.F.T @ inv_psd(Pp)
        except SingularCovariance:
            raise SingularCovariance(f"singular predicted covariance at step {k + 1}")
        m = filtered[k].mean + G @ (smoothed[0].mean - predicted[k + 1].mean)
        C = filtered[k].cov + G @ (smoothed[0].cov - Pp) @ G.T
        smoothed.insert(0, MomentGaussian(m, 0.5 * (C + C.T)))
    return smoothed


def quadrature_integrate(f, region, tol: float = 1e-9) -> float:
    """Adaptive integral of f over a 1-D or 2-D box.

    f maps a point of shape (d,) to a float; region is a sequence of d
    (lo, hi) pairs, d in {1, 2}. Raises ToleranceNotMet when the reported
    error estimate exceeds tol.
    """
    region = [(float(lo), float(hi)) for lo, hi in region]
    if len(region) == 1:
        (a, b), = region
        val, err = integrate.quad(
            lambda x: f(np.array([x])), a, b, epsabs=tol / 10.0, limit=200
        )
    elif len(region) == 2:
        (a, b), (c, d) = region
        val, err = integrate.dblquad(
            lambda y, x: f(np.array([x, y])), a, b, c, d, epsabs=tol / 10.0
        )
    else:
        raise DimensionMismatch("quadrature supports 1 or 2 dimensions")
    if not np.isfinite(val) or err > tol:
        raise ToleranceNotMet(f"quadrature error estimate {err:.3e} exceeds {tol:.3e}")
    return float(val)


def gaussian_box(g: MomentGaussian, nsigma: float = 8.0):
    """Axis-aligned truncation box mean_i +/- nsigma * sqrt(C_ii)."""
    half = nsigma * np.sqrt(np.diag(g.cov))
    return [(m - h, m + h) for m, h in zip(g.mean, half)]
