"""Command-line front end.

Subcommands: `simulate` draws a trajectory from a bundled model and writes
it as CSV; `smooth` runs one estimator over a freshly simulated record and
writes truth next to the estimate; `bench` executes a config-driven Monte
Carlo experiment; `flops` prints the analytic memory/flop model for an
algorithm at given dimensions; `oracle` smooths a plain-text linear model
with the exact Kalman smoother for use as a reference.

Exit codes: 0 on success, 2 on configuration errors (bad flags, bad config
or model files), 3 on numeric failures inside an estimator. All CSV output
is UTF-8 with LF line endings.
"""

import argparse
import csv
import sys
from typing import Optional

import numpy as np

from .backward import run_smoother
from .bench import emit_outputs, load_config, run_experiment
from .benchmarks import ssm1_build, ssm2_build
from .complexity import (
    FLOPS_ALGORITHMS,
    MEMORY_ALGORITHMS,
    Dims,
    appendix_b_breakdown,
    flops_estimate,
    memory_estimate,
)
from .errors import ConfigError, EstimationError
from .forward import run_dbf, run_mpf, run_sdbf
from .models import simulate
from .oracle import LinearModel, kalman_rts
from .gaussians import MomentGaussian, chol_lower
from .particles import RandomStream

_MODEL_DEFAULT_T = {"ssm1": 200, "ssm2": 60}


def _build_model(name: str, seed: int):
    if name == "ssm1":
        return ssm1_build()
    return ssm2_build(seed=seed)


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    model = _build_model(args.model, args.seed)
    traj = simulate(model, args.t, args.seed)
    D, P = model.D_L + model.D_N, model.P
    header = ["k"] + [f"x_{i}" for i in range(D)] + [f"y_{i}" for i in range(P)]
    rows = [
        [k] + [_fmt(v) for v in traj.states[k]] + [_fmt(v) for v in traj.measurements[k]]
        for k in range(args.t)
    ]
    _write_csv(args.out, header, rows)
    print(f"wrote {args.t} steps of {args.model} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# smooth


def _cmd_smooth(args) -> int:
    model = _build_model(args.model, args.seed)
    T = args.t if args.t is not None else _MODEL_DEFAULT_T[args.model]
    traj = simulate(model, T, args.seed)
    if args.alg == "mpf":
        est = run_mpf(model, traj.measurements, args.np, args.seed).estimates
    else:
        forward = run_dbf if args.alg in ("dbsa", "sdbsa") else run_sdbf
        cache = forward(model, traj.measurements, args.np, args.seed)
        est = run_smoother(
            cache,
            model,
            args.alg,
            M=args.m,
            n_i=args.ni,
            weight_reuse=args.reuse_weights == "on",
            seed=args.seed,
        ).estimates
    D = model.D_L + model.D_N
    header = (
        ["k"] + [f"truth_{i}" for i in range(D)] + [f"estimate_{i}" for i in range(D)]
    )
    rows = [
        [k] + [_fmt(v) for v in traj.states[k]] + [_fmt(v) for v in est[k]]
        for k in range(T)
    ]
    _write_csv(args.out, header, rows)
    print(f"wrote {args.alg} estimates over {T} steps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _cmd_bench(args) -> int:
    config = load_config(args.config)
    out_dir = args.out_dir if args.out_dir is not None else config.out_dir
    if out_dir is None:
        raise ConfigError("no output directory: pass --out-dir or set out_dir")
    report = run_experiment(config, progress=lambda msg: print(msg, file=sys.stderr))
    paths = emit_outputs(report, out_dir)
    for p in paths:
        print(f"wrote {p}")
    if report.errors:
        print(f"{len(report.errors)} run(s) failed; see error rows", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# flops


def _cmd_flops(args) -> int:
    dims = Dims(
        D_L=args.dl, D_N=args.dn, P=args.p, N_p=args.np, M=args.m, n_i=args.ni, T=args.t
    )
    print(f"alg = {args.alg}")
    for name in ("D_L", "D_N", "P", "N_p", "M", "n_i", "T"):
        print(f"{name} = {getattr(dims, name)}")
    print(f"memory_reals = {memory_estimate(args.alg, dims)}")
    if args.alg not in FLOPS_ALGORITHMS:
        print("flops_total = n/a (no closed-form flop model for this algorithm)")
        return 0
    print(f"flops_total = {flops_estimate(args.alg, dims)}")
    report = appendix_b_breakdown(dims)
    print(f"recursion_flops = {report.recursion_flops()}")
    print()
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["phase", "task", "flops"])
    for key, value in report.term_flops.items():
        phase, task = key.split(".", 1)
        writer.writerow([phase, task, value])
    return 0


# ---------------------------------------------------------------------------
# oracle


_LINEAR_KEYS = ("version", "d", "p", "f", "u", "ht", "v", "c_w", "c_e",
                "init_mean", "init_cov", "t", "seed")


def parse_linear_model_text(text: str):
    """Parse the plain-text linear-model format: `key = value` lines,
    matrices given row-major as comma-separated floats.

    Keys: version (must be 1), d, p (dimensions), f, u, ht, v, c_w, c_e,
    init_mean, init_cov (model arrays), t, seed (simulation length and
    seed). Returns (LinearModel, t, seed).
    """
    pairs = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    missing = [k for k in _LINEAR_KEYS if k not in pairs]
    if missing:
        raise ConfigError(f"missing linear-model keys {missing}")
    unknown = sorted(set(pairs) - set(_LINEAR_KEYS))
    if unknown:
        raise ConfigError(f"unknown linear-model keys {unknown}")
    if pairs["version"] != "1":
        raise ConfigError(f"unsupported linear-model version {pairs['version']!r}")

    def ints(key):
        try:
            return int(pairs[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer") from None

    d, p, t, seed = ints("d"), ints("p"), ints("t"), ints("seed")
    if d < 1 or p < 1 or t < 1:
        raise ConfigError("d, p and t must be positive")

    def arr(key, shape):
        try:
            flat = np.array([float(s) for s in pairs[key].split(",")])
        except ValueError:
            raise ConfigError(f"{key} must be comma-separated numbers") from None
        if flat.size != int(np.prod(shape)):
            raise ConfigError(
                f"{key} needs {int(np.prod(shape))} entries, got {flat.size}"
            )
        return flat.reshape(shape)

    try:
        model = LinearModel(
            F=arr("f", (d, d)),
            u=arr("u", (d,)),
            Ht=arr("ht", (p, d)),
            v=arr("v", (p,)),
            C_w=arr("c_w", (d, d)),
            C_e=arr("c_e", (p, p)),
            initial=MomentGaussian(arr("init_mean", (d,)), arr("init_cov", (d, d))),
        )
    except EstimationError as exc:
        raise ConfigError(f"bad linear model: {exc}") from None
    return model, t, seed


def simulate_linear(model: LinearModel, T: int, seed: int):
    """Draw (states, measurements) from a LinearModel; row 0 is the draw
    from the initial density. Same stream convention as `models.simulate`."""
    rng = RandomStream(seed, 0).generator
    L_w = chol_lower(model.C_w)
    L_e = chol_lower(model.C_e)
    L_0 = chol_lower(model.initial.cov)
    states = np.empty((T, model.D))
    measurements = np.empty((T, model.P))
    x = model.initial.mean + L_0 @ rng.standard_normal(model.D)
    for k in range(T):
        if k > 0:
            x = model.F @ x + model.u + L_w @ rng.standard_normal(model.D)
        states[k] = x
        measurements[k] = model.Ht @ x + model.v + L_e @ rng.standard_normal(model.P)
    return states, measurements


def _cmd_oracle(args) -> int:
    with open(args.linear_model, "r", encoding="utf-8") as fh:
        model, T, seed = parse_linear_model_text(fh.read())
    states, measurements = simulate_linear(model, T, seed)
    smoothed = kalman_rts(model, measurements)
    D = model.D
    header = (
        ["k"]
        + [f"truth_{i}" for i in range(D)]
        + [f"mean_{i}" for i in range(D)]
        + [f"std_{i}" for i in range(D)]
    )
    rows = []
    for k in range(T):
        stds = np.sqrt(np.diag(smoothed[k].cov))
        rows.append(
            [k]
            + [_fmt(v) for v in states[k]]
            + [_fmt(v) for v in smoothed[k].mean]
            + [_fmt(v) for v in stds]
        )
    _write_csv(args.out, header, rows)
    print(f"wrote exact smoothed marginals over {T} steps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbsmooth",
        description="Double Bayesian smoothing toolkit for conditionally "
        "linear Gaussian state-space models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a trajectory from a bundled model")
    p.add_argument("--model", required=True, choices=("ssm1", "ssm2"))
    p.add_argument("--t", required=True, type=int, help="number of steps")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("smooth", help="simulate, filter and smooth one record")
    p.add_argument("--model", required=True, choices=("ssm1", "ssm2"))
    p.add_argument(
        "--alg", required=True, choices=("dbsa", "sdbsa", "ddbsa", "sddbsa", "mpf")
    )
    p.add_argument("--np", required=True, type=int, help="particle count")
    p.add_argument("--m", type=int, default=None,
                   help="backward trajectories (default: particle count)")
    p.add_argument("--ni", type=int, default=1, help="backward refinement sweeps")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--reuse-weights", choices=("on", "off"), default="on")
    p.add_argument("--t", type=int, default=None,
                   help="steps (default: 200 for ssm1, 60 for ssm2)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_smooth)

    p = sub.add_parser("bench", help="run a config-driven Monte Carlo experiment")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out-dir", default=None,
                   help="output directory (default: out_dir from the config)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("flops", help="print the analytic memory/flop model")
    p.add_argument("--alg", required=True, choices=MEMORY_ALGORITHMS)
    p.add_argument("--dl", required=True, type=int, help="linear state dimension")
    p.add_argument("--dn", required=True, type=int, help="nonlinear state dimension")
    p.add_argument("--p", type=int, default=1, help="measurement dimension")
    p.add_argument("--np", required=True, type=int, help="particle count")
    p.add_argument("--m", type=int, default=1, help="backward trajectories")
    p.add_argument("--ni", type=int, default=1, help="backward refinement sweeps")
    p.add_argument("--t", type=int, default=1, help="steps")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("oracle", help="exact Kalman smoother on a linear model file")
    p.add_argument("--linear-model", required=True, help="model definition file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_oracle)

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
