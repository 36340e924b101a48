"""State-space model abstraction for conditionally linear Gaussian systems.

The state x = [x_L, x_N] concatenates a linear block (dim D_L) and a
nonlinear block (dim D_N). Given the nonlinear block, both the dynamics and
the measurement are affine-Gaussian in the linear block:

    x_N' = A_N(x_N) x_L + f_N(x_N) + w_N
    x_L' = A_L(x_N) x_L + f_L(x_N) + w_L
    y    = g(x_N) + B(x_N) x_L + e

with w_L, w_N, e independent zero-mean Gaussians. The full transition
eval_f and measurement eval_h must agree with the blockwise functions; a
structural self-test verifies that on random states.

Conventions used by every caller:

- the per-particle evaluators (eval_AN, eval_fN, eval_AL, eval_fL, eval_B,
  eval_g) accept a single x_N of shape (D_N,) or a batch (J, D_N); an
  evaluator whose value does not depend on x_N may return the unbatched
  constant for batched input, and callers broadcast;
- step arguments k are 0-based trajectory row indices; transition
  evaluators receive the destination row index. The built-in models are
  time invariant and ignore k.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, NonFiniteJacobian
from .gaussians import MomentGaussian
from .particles import RandomStream

__all__ = [
    "ClgModel",
    "StatePartition",
    "Trajectory",
    "simulate",
    "linearize_markov",
    "linearize_measurement",
    "consistency_residual",
    "finite_difference_jacobian",
    "batched_eval",
]


@dataclass(frozen=True)
class StatePartition:
    """Index bookkeeping for the ordered concatenation [x_L, x_N]."""

    D_L: int
    D_N: int

    @property
    def linear_idx(self) -> np.ndarray:
        return np.arange(self.D_L)

    @property
    def nonlinear_idx(self) -> np.ndarray:
        return np.arange(self.D_L, self.D_L + self.D_N)


@dataclass(frozen=True)
class ClgModel:
    D_L: int
    D_N: int
    P: int
    eval_f: Callable
    eval_h: Callable
    eval_AN: Callable
    eval_fN: Callable
    eval_AL: Callable
    eval_fL: Callable
    eval_B: Callable
    eval_g: Callable
    C_w_L: np.ndarray
    C_w_N: np.ndarray
    C_e: np.ndarray
    initial_density: MomentGaussian
    truth_init: np.ndarray
    # Analytic Jacobians; linearization falls back to central differences
    # when these are None. jac_h returns the (P, D) matrix of dh/dx rows.
    jac_f: Optional[Callable] = None
    jac_h: Optional[Callable] = None
    # Truth-dynamics process noise sampler, for models whose physical noise
    # is correlated across the blocks; None means the estimator covariance
    # blockdiag(C_w_L, C_w_N) is also the truth covariance.
    sample_process_noise: Optional[Callable] = None
    name: str = "clg"

    def __post_init__(self):
        for attr in ("C_w_L", "C_w_N", "C_e"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        object.__setattr__(self, "truth_init", np.asarray(self.truth_init, dtype=float))
        if self.C_w_L.shape != (self.D_L, self.D_L):
            raise DimensionMismatch("C_w_L shape")
        if self.C_w_N.shape != (self.D_N, self.D_N):
            raise DimensionMismatch("C_w_N shape")
        if self.C_e.shape != (self.P, self.P):
            raise DimensionMismatch("C_e shape")
        if self.truth_init.shape != (self.D,):
            raise DimensionMismatch("truth_init shape")
        if self.initial_density.dim != self.D:
            raise DimensionMismatch("initial_density dimension")

    @property
    def D(self) -> int:
        return self.D_L + self.D_N

    @property
    def partition(self) -> StatePartition:
        return StatePartition(self.D_L, self.D_N)

    @property
    def C_w(self) -> np.ndarray:
        """Process covariance assumed by the estimators: blockdiag(C_w_L, C_w_N)."""
        out = np.zeros((self.D, self.D))
        out[: self.D_L, : self.D_L] = self.C_w_L
        out[self.D_L :, self.D_L :] = self.C_w_N
        return out

    def split(self, x: np.ndarray):
        """Split a full state (or batch of states) into (linear, nonlinear)."""
        x = np.asarray(x, dtype=float)
        return x[..., : self.D_L], x[..., self.D_L :]


@dataclass(frozen=True)
class Trajectory:
    """Simulated states and measurements, rows 0..T-1, plus the seed used."""

    states: np.ndarray
    measurements: np.ndarray
    seed: int

    def __post_init__(self):
        if self.states.shape[0] != self.measurements.shape[0]:
            raise DimensionMismatch("states/measurements length mismatch")

    @property
    def T(self) -> int:
        return self.states.shape[0]


def _draw_block_noise(model: ClgModel, rng: np.random.Generator) -> np.ndarray:
    w = np.empty(model.D)
    w[: model.D_L] = _draw_gaussian(model.C_w_L, rng)
    w[model.D_L :] = _draw_gaussian(model.C_w_N, rng)
    return w


def _draw_gaussian(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not np.any(cov):
        return np.zeros(cov.shape[0])
    L = np.linalg.cholesky(cov + 0.0)
    return L @ rng.standard_normal(cov.shape[0])


def simulate(model: ClgModel, T: int, seed: int) -> Trajectory:
    """Draw one trajectory of T states and measurements.

    Row 0 is one stochastic step from the model's known initial point, which
    is exactly the draw from the model's initial density; with all noise
    covariances zero the trajectory is the deterministic flow of eval_f.
    """
    rng = RandomStream(seed, 0).generator
    states = np.empty((T, model.D))
    measurements = np.empty((T, model.P))
    x = model.truth_init
    for k in range(T):
        if model.sample_process_noise is not None:
            w = model.sample_process_noise(rng)
        else:
            w = _draw_block_noise(model, rng)
        x = np.asarray(model.eval_f(x, k), dtype=float) + w
        e = _draw_gaussian(model.C_e, rng)
        states[k] = x
        measurements[k] = np.asarray(model.eval_h(x, k), dtype=float) + e
    return Trajectory(states, measurements, seed)


def finite_difference_jacobian(fn, x: np.ndarray, k: int) -> np.ndarray:
    """Central-difference Jacobian with per-coordinate step max(1e-6, 1e-6|x_i|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x, k), dtype=float)
    jac = np.empty((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        h = max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fn(xp, k)) - np.asarray(fn(xm, k))) / (2.0 * h)
    return jac


def linearize_markov(model: ClgModel, x_fe: np.ndarray, k: int):
    """First-order expansion of the transition about x_fe.

    Returns (F, u) with F the D x D Jacobian of eval_f at x_fe and
    u = f(x_fe) - F x_fe, so the linearized transition mean is F x + u.
    Exact (zero residual) when eval_f is affine.
    """
    x_fe = np.asarray(x_fe, dtype=float)
    if model.jac_f is not None:
        F = np.asarray(model.jac_f(x_fe, k), dtype=float)
    else:
        F = finite_difference_jacobian(model.eval_f, x_fe, k)
    if not np.all(np.isfinite(F)):
        raise NonFiniteJacobian(f"transition Jacobian not finite at step {k}")
    u = np.asarray(model.eval_f(x_fe, k), dtype=float) - F @ x_fe
    return F, u


def linearize_measurement(model: ClgModel, x_fp: np.ndarray, k: int):
    """First-order expansion of the measurement about x_fp.

    Returns (Ht, v): Ht is the (P, D) Jacobian of eval_h at x_fp and
    v = h(x_fp) - Ht x_fp, so the linearized measurement mean is Ht x + v.
    """
    x_fp = np.asarray(x_fp, dtype=float)
    if model.jac_h is not None:
        Ht = np.asarray(model.jac_h(x_fp, k), dtype=float)
    else:
        Ht = finite_difference_jacobian(model.eval_h, x_fp, k)
    if not np.all(np.isfinite(Ht)):
        raise NonFiniteJacobian(f"measurement Jacobian not finite at step {k}")
    v = np.asarray(model.eval_h(x_fp, k), dtype=float) - Ht @ x_fp
    return Ht, v


def batched_eval(fn, xN: np.ndarray, k: int, trailing_shape) -> np.ndarray:
    """Evaluate a per-particle model function over a batch, broadcasting
    constants returned unbatched (see the module docstring convention)."""
    xN = np.asarray(xN, dtype=float)
    J = xN.shape[0]
    out = np.asarray(fn(xN, k), dtype=float)
    want = (J,) + tuple(trailing_shape)
    if out.shape == want:
        return out
    if out.shape == tuple(trailing_shape):
        return np.broadcast_to(out, want)
    raise DimensionMismatch(
        f"evaluator returned shape {out.shape}, expected {want} or {tuple(trailing_shape)}"
    )


def consistency_residual(model: ClgModel, states: np.ndarray, k: int = 0) -> float:
    """Structural self-test residual over a batch of full states.

    Checks that eval_f restricted to the linear/nonlinear rows reproduces
    A_L x_L + f_L and A_N x_L + f_N, and that eval_h equals g + B x_L.
    Returns the max absolute residual.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    xL, xN = model.split(states)
    J = states.shape[0]
    worst = 0.0
    for j in range(J):
        f_full = np.asarray(model.eval_f(states[j], k), dtype=float)
        AN = np.asarray(model.eval_AN(xN[j], k), dtype=float)
        AL = np.asarray(model.eval_AL(xN[j], k), dtype=float)
        fN = np.asarray(model.eval_fN(xN[j], k), dtype=float)
        fL = np.asarray(model.eval_fL(xN[j], k), dtype=float)
        B = np.asarray(model.eval_B(xN[j], k), dtype=float)
        g = np.asarray(model.eval_g(xN[j], k), dtype=float)
        h_full = np.asarray(model.eval_h(states[j], k), dtype=float)
        worst = max(
            worst,
            float(np.max(np.abs(f_full[: model.D_L] - (AL @ xL[j] + fL)))),
            float(np.max(np.abs(f_full[model.D_L :] - (AN @ xL[j] + fN)))),
            float(np.max(np.abs(h_full - (g + B @ xL[j])))),
        )
    return worst
