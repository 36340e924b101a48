"""The two benchmark models: a decelerated 2-D agent and a multi-target
received-signal-strength sensor network.

Model 1 (ssm1_build): an agent with state [v, p] (velocity linear,
position nonlinear). A position-dependent braking acceleration

    a(p) = -a0 * (p / |p|) / (1 + (|p|/d0)^2)

pulls the agent toward the origin; both blocks are observed directly in
noise, y = x + e.

Model 2 (ssm2_build): N independent targets doing a near-constant-velocity
walk on a square arena, observed by P sensors on a regular lattice. Sensor
q reports the summed received signal strength in dB,

    y_q = 10 log10( Psi * sum_i d0^2 / |s_q - p_i|^2 ) + e_q.

Positions and velocities of all targets are stacked as
x = [v_1..v_N, p_1..p_N], so D_L = D_N = 2N and B(x_N) = 0 (measurements
carry no direct velocity information). The physical process noise drives
position and velocity of each target with the same acceleration draw, so
the truth simulation uses that correlated form while the estimator-facing
covariances stay block-diagonal.
"""

import numpy as np

from .errors import InvalidParam
from .gaussians import MomentGaussian
from .models import ClgModel

__all__ = ["ssm1_build", "ssm2_build", "SSM1_DEFAULTS", "SSM2_DEFAULTS"]

LOG10_SCALE = 10.0 / np.log(10.0)

SSM1_DEFAULTS = dict(
    rho=0.995,
    T_s=0.01,
    sigma_p=5e-3,
    sigma_ep=2e-2,
    sigma_ev=2e-2,
    a_0=0.5,
    d_0=5e-3,
    p_0=(0.01, 0.01),
    v_0=(0.01, 0.01),
)

SSM2_DEFAULTS = dict(
    n_targets=3,
    n_sensors=25,
    side=1000.0,
    T_s=1.0,
    sigma_a2=0.1,
    sigma_e2=10.0 ** (-3.5),
    psi=1.0,
    d_0=1.0,
    v_min=0.0,
    v_max=0.1,
    init_pos_std=10.0,
)

# squared-distance floor for the RSS measurement (m^2); keeps the log-sum
# finite if a hypothesized position lands on a sensor
D_MIN_SQ = 1e-6


def ssm1_build(**params) -> ClgModel:
    """Build the 2-D agent model. Unspecified parameters take the defaults."""
    p = dict(SSM1_DEFAULTS)
    unknown = set(params) - set(p)
    if unknown:
        raise InvalidParam(f"unknown ssm1 parameters {sorted(unknown)}")
    p.update(params)
    rho, T_s, d_0, a_0 = p["rho"], p["T_s"], p["d_0"], p["a_0"]
    if T_s <= 0:
        raise InvalidParam("T_s must be positive")
    if d_0 <= 0:
        raise InvalidParam("d_0 must be positive")
    if not (0.0 < rho <= 1.0):
        raise InvalidParam("rho must lie in (0, 1]")

    def accel(pos):
        pos = np.asarray(pos, dtype=float)
        r = np.linalg.norm(pos, axis=-1, keepdims=True)
        r = np.maximum(r, 1e-300)
        return -a_0 * pos / (r * (1.0 + (r / d_0) ** 2))

    def accel_jac(pos):
        r = float(np.linalg.norm(pos))
        s = 1.0 / (r * (1.0 + (r / d_0) ** 2))
        ds = -(1.0 + 3.0 * (r / d_0) ** 2) / (r**2 * (1.0 + (r / d_0) ** 2) ** 2)
        return -a_0 * (s * np.eye(2) + (ds / r) * np.outer(pos, pos))

    def eval_f(x, k):
        x = np.asarray(x, dtype=float)
        v, pos = x[..., :2], x[..., 2:]
        a = accel(pos)
        return np.concatenate(
            [rho * v + T_s * a, pos + T_s * v + 0.5 * T_s**2 * a], axis=-1
        )

    def jac_f(x, k):
        Ja = accel_jac(np.asarray(x, dtype=float)[2:])
        F = np.zeros((4, 4))
        F[:2, :2] = rho * np.eye(2)
        F[:2, 2:] = T_s * Ja
        F[2:, :2] = T_s * np.eye(2)
        F[2:, 2:] = np.eye(2) + 0.5 * T_s**2 * Ja
        return F

    identity4 = np.eye(4)

    def eval_h(x, k):
        return np.asarray(x, dtype=float)

    def eval_g(xN, k):
        xN = np.asarray(xN, dtype=float)
        zeros = np.zeros_like(xN)
        return np.concatenate([zeros, xN], axis=-1)

    B = np.zeros((4, 2))
    B[:2, :2] = np.eye(2)
    AL = rho * np.eye(2)
    AN = T_s * np.eye(2)

    C_w_L = (1.0 - rho) ** 2 * np.eye(2)
    C_w_N = p["sigma_p"] ** 2 * np.eye(2)
    C_e = np.diag(
        [p["sigma_ev"] ** 2, p["sigma_ev"] ** 2, p["sigma_ep"] ** 2, p["sigma_ep"] ** 2]
    )

    x0 = np.concatenate([np.asarray(p["v_0"], float), np.asarray(p["p_0"], float)])
    init_cov = np.zeros((4, 4))
    init_cov[:2, :2] = C_w_L
    init_cov[2:, 2:] = C_w_N
    init_mean = eval_f(x0, 0)

    return ClgModel(
        D_L=2,
        D_N=2,
        P=4,
        eval_f=eval_f,
        eval_h=eval_h,
        eval_AN=lambda xN, k: AN,
        eval_fN=lambda xN, k: np.asarray(xN, float)
        + 0.5 * T_s**2 * accel(np.asarray(xN, float)),
        eval_AL=lambda xN, k: AL,
        eval_fL=lambda xN, k: T_s * accel(np.asarray(xN, float)),
        eval_B=lambda xN, k: B,
        eval_g=eval_g,
        C_w_L=C_w_L,
        C_w_N=C_w_N,
        C_e=C_e,
        initial_density=MomentGaussian(init_mean, init_cov),
        truth_init=x0,
        jac_f=jac_f,
        jac_h=lambda x, k: identity4,
        name="ssm1",
    )


def _sensor_lattice(n_sensors: int, side: float) -> np.ndarray:
    per_side = int(round(np.sqrt(n_sensors)))
    if per_side * per_side != n_sensors:
        raise InvalidParam("n_sensors must be a perfect square")
    coords = np.linspace(0.0, side, per_side)
    gx, gy = np.meshgrid(coords, coords)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _place_targets(n_targets, side, v_min, v_max, rng):
    """Distinct cells of a ceil(sqrt(N))^2 partition, uniform within a cell;
    speed uniform in (v_min, v_max) with uniform heading."""
    per_side = int(np.ceil(np.sqrt(n_targets)))
    cells = rng.choice(per_side * per_side, size=n_targets, replace=False)
    cell = side / per_side
    positions = np.empty((n_targets, 2))
    for i, c in enumerate(cells):
        cx, cy = (c % per_side) * cell, (c // per_side) * cell
        positions[i] = [cx + rng.random() * cell, cy + rng.random() * cell]
    speeds = v_min + (v_max - v_min) * rng.random(n_targets)
    headings = 2.0 * np.pi * rng.random(n_targets)
    velocities = np.column_stack(
        [speeds * np.cos(headings), speeds * np.sin(headings)]
    )
    return positions, velocities


def ssm2_build(seed: int = 0, positions=None, velocities=None, **params) -> ClgModel:
    """Build the multi-target RSS model.

    The initial placement (distinct grid cells, random speeds) is drawn at
    build time from `seed` and baked into the model, so each Monte Carlo run
    constructs its own instance. Explicit `positions`/`velocities` override
    the draw. The estimators' initial density is centered on the true
    initial positions with zero velocity and generous stds; every algorithm
    consumes the same density, so comparisons stay fair.
    """
    p = dict(SSM2_DEFAULTS)
    unknown = set(params) - set(p)
    if unknown:
        raise InvalidParam(f"unknown ssm2 parameters {sorted(unknown)}")
    p.update(params)
    n = int(p["n_targets"])
    if n < 1:
        raise InvalidParam("n_targets must be >= 1")
    if p["v_max"] < p["v_min"] or p["v_min"] < 0:
        raise InvalidParam("need 0 <= v_min <= v_max")
    if p["T_s"] <= 0 or p["d_0"] <= 0 or p["sigma_a2"] <= 0 or p["sigma_e2"] <= 0:
        raise InvalidParam("T_s, d_0, sigma_a2, sigma_e2 must be positive")
    T_s, d_0, psi = p["T_s"], p["d_0"], p["psi"]
    sensors = _sensor_lattice(int(p["n_sensors"]), p["side"])
    P = sensors.shape[0]
    D_half = 2 * n

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2))))
    drawn_pos, drawn_vel = _place_targets(n, p["side"], p["v_min"], p["v_max"], rng)
    if positions is not None:
        drawn_pos = np.asarray(positions, dtype=float).reshape(n, 2)
    if velocities is not None:
        drawn_vel = np.asarray(velocities, dtype=float).reshape(n, 2)

    def rss_sum(pos_flat):
        """sum_i d0^2/|s_q - p_i|^2 for every sensor; pos_flat (..., 2N)."""
        pos = np.asarray(pos_flat, dtype=float)
        pts = pos.reshape(pos.shape[:-1] + (n, 1, 2))
        diff = pts - sensors  # (..., n, P, 2)
        dist_sq = np.maximum(np.sum(diff * diff, axis=-1), D_MIN_SQ)
        return np.sum(d_0**2 / dist_sq, axis=-2)  # (..., P)

    def eval_g(xN, k):
        return 10.0 * np.log10(psi * rss_sum(xN))

    def eval_h(x, k):
        x = np.asarray(x, dtype=float)
        return eval_g(x[..., D_half:], k)

    def eval_f(x, k):
        x = np.asarray(x, dtype=float)
        v, pos = x[..., :D_half], x[..., D_half:]
        return np.concatenate([v, pos + T_s * v], axis=-1)

    def jac_h(x, k):
        pos = np.asarray(x, dtype=float)[D_half:]
        pts = pos.reshape(n, 2)
        diff = pts[:, None, :] - sensors[None, :, :]  # (n, P, 2)
        dist_sq = np.maximum(np.sum(diff * diff, axis=-1), D_MIN_SQ)  # (n, P)
        total = np.sum(d_0**2 / dist_sq, axis=0)  # (P,)
        # d y_q / d p_i = -2 * LOG10_SCALE * d0^2 * (p_i - s_q) / (r^4 * total)
        grad = (
            -2.0
            * LOG10_SCALE
            * d_0**2
            * diff
            / (dist_sq**2 * total[None, :])[:, :, None]
        )  # (n, P, 2)
        H = np.zeros((P, 2 * D_half))
        for i in range(n):
            H[:, D_half + 2 * i : D_half + 2 * i + 2] = grad[i]
        return H

    F_const = np.zeros((2 * D_half, 2 * D_half))
    F_const[:D_half, :D_half] = np.eye(D_half)
    F_const[D_half:, :D_half] = T_s * np.eye(D_half)
    F_const[D_half:, D_half:] = np.eye(D_half)

    AN = T_s * np.eye(D_half)
    AL = np.eye(D_half)
    B = np.zeros((P, D_half))
    fL = np.zeros(D_half)

    sigma_a = np.sqrt(p["sigma_a2"])
    C_w_L = (T_s**2 * p["sigma_a2"]) * np.eye(D_half)
    C_w_N = (T_s**4 / 4.0 * p["sigma_a2"]) * np.eye(D_half)
    C_e = p["sigma_e2"] * np.eye(P)

    def sample_process_noise(noise_rng):
        n_a = sigma_a * noise_rng.standard_normal(D_half)
        return np.concatenate([T_s * n_a, 0.5 * T_s**2 * n_a])

    x0 = np.concatenate([drawn_vel.ravel(), drawn_pos.ravel()])
    init_mean = np.concatenate([np.zeros(D_half), drawn_pos.ravel()])
    init_cov = np.diag(
        np.concatenate(
            [
                np.full(D_half, max(p["v_max"], 1e-3) ** 2),
                np.full(D_half, p["init_pos_std"] ** 2),
            ]
        )
    )

    return ClgModel(
        D_L=D_half,
        D_N=D_half,
        P=P,
        eval_f=eval_f,
        eval_h=eval_h,
        eval_AN=lambda xN, k: AN,
        eval_fN=lambda xN, k: np.asarray(xN, dtype=float),
        eval_AL=lambda xN, k: AL,
        eval_fL=lambda xN, k: fL,
        eval_B=lambda xN, k: B,
        eval_g=eval_g,
        C_w_L=C_w_L,
        C_w_N=C_w_N,
        C_e=C_e,
        initial_density=MomentGaussian(init_mean, init_cov),
        truth_init=x0,
        jac_f=lambda x, k: F_const,
        jac_h=jac_h,
        sample_process_noise=sample_process_noise,
        name="ssm2",
    )
