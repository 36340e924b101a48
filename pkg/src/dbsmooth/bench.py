"""Monte Carlo benchmark harness.

Runs repeated simulate / filter / smooth cycles over a sweep of particle
counts, and reduces them to per-algorithm accuracy and timing rows:

* RMSE_L / RMSE_N  root mean square error over runs, steps and components,
  split into the linear and nonlinear state blocks, computed over the runs
  that did not diverge;
* CTB_ms           median wall-clock time of one full T-step block
  (forward pass plus backward pass where the algorithm has one);
* divergence_rate  fraction of completed runs flagged by the position-error
  test or by a weight collapse.

Experiments are described by a plain-text key-value config (see
`parse_config`) and produce three UTF-8, LF-terminated files: `report.csv`
with the row schema above, `curves.csv` with long-format (figure_id, alg,
N_p, value) rows for plotting, and `manifest.txt` echoing the config, the
per-run seeds and the library versions.

Runs are mutually independent (each gets its own seed-keyed RNG streams)
and are executed sequentially here, reduced in run order; timing columns
aside, the output is a pure function of the config.
"""

import csv
import io
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

import scipy

from .benchmarks import ssm1_build, ssm2_build
from .complexity import Dims, flops_estimate, memory_estimate
from .errors import ConfigError, EstimationError, LengthMismatch
from .forward import run_dbf, run_mpf, run_sdbf
from .backward import run_smoother
from .models import ClgModel, Trajectory, simulate

CONFIG_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1

# Forward-only algorithms report the filter estimate; the rest smooth a
# forward cache of the named case.
FORWARD_ALGS = ("dbf", "sdbf", "mpf")
SMOOTHER_ALGS = ("dbsa", "sdbsa", "ddbsa", "sddbsa")
KNOWN_ALGS = FORWARD_ALGS + SMOOTHER_ALGS

_MODEL_BUILDERS = {"ssm1": ssm1_build, "ssm2": ssm2_build}

# Default position-error divergence thresholds per bundled model. The
# multi-target arena is 1000 m a side, so 100 m (10%) is unambiguous there;
# the agent model lives on a ~0.01 scale, where 1.0 marks a clear blow-up.
_DIVERGENCE_DEFAULTS = {"ssm1": 1.0, "ssm2": 100.0}

REPORT_COLUMNS = (
    "alg",
    "N_p",
    "rmse_L",
    "rmse_N",
    "ctb_ms",
    "divergence_rate",
    "mem_estimate",
    "flops_estimate",
    "runs",
    "seed",
    "error",
)
CURVE_COLUMNS = ("figure_id", "alg", "N_p", "value")
CURVE_FIGURES = ("rmse_n", "rmse_l", "ctb")


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark experiment: model, algorithms, sweep and budgets.

    `m` is the backward trajectory count for the trajectory-mode smoothers;
    None means "match the particle count" at each sweep point.
    `divergence_threshold` None selects the bundled model's default.
    """

    version: int
    model: str
    algorithms: Tuple[str, ...]
    np_sweep: Tuple[int, ...]
    runs: int
    T: int
    seed: int
    m: Optional[int] = None
    n_i: int = 1
    weight_reuse: bool = True
    divergence_threshold: Optional[float] = None
    out_dir: Optional[str] = None
    model_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config schema version {self.version!r}; "
                f"this build reads version {CONFIG_SCHEMA_VERSION}"
            )
        if self.model not in _MODEL_BUILDERS:
            raise ConfigError(f"unknown model {self.model!r}")
        if not self.algorithms:
            raise ConfigError("algorithms list is empty")
        unknown = [a for a in self.algorithms if a not in KNOWN_ALGS]
        if unknown:
            raise ConfigError(f"unknown algorithms {unknown}")
        if not self.np_sweep or any(n < 1 for n in self.np_sweep):
            raise ConfigError("np_sweep must list positive particle counts")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.T < 1:
            raise ConfigError("t must be >= 1")
        if self.n_i < 1:
            raise ConfigError("n_i must be >= 1")
        if self.m is not None and self.m < 1:
            raise ConfigError("m must be >= 1 or auto")
        if self.divergence_threshold is not None and self.divergence_threshold <= 0:
            raise ConfigError("divergence_threshold must be positive")

    def threshold_for_model(self) -> float:
        if self.divergence_threshold is not None:
            return self.divergence_threshold
        return _DIVERGENCE_DEFAULTS[self.model]


@dataclass(frozen=True)
class BenchRow:
    """One (algorithm, particle count) cell of the report.

    Normal rows carry the reduced statistics and `error` is None. When a
    run fails outright it is dropped from the statistics and reported as an
    extra row with the numeric columns None, `runs` holding the failing run
    index and `error` the exception text.
    """

    alg: str
    N_p: int
    rmse_L: Optional[float]
    rmse_N: Optional[float]
    ctb_ms: Optional[float]
    divergence_rate: Optional[float]
    mem_estimate: Optional[int]
    flops_estimate: Optional[int]
    runs: int
    seed: int
    error: Optional[str] = None


@dataclass
class BenchReport:
    """Reduced experiment output: normal rows plus any per-run error rows."""

    config: ExperimentConfig
    rows: list
    errors: list

    def all_rows(self) -> list:
        return list(self.rows) + list(self.errors)


# ---------------------------------------------------------------------------
# Config file format


_REQUIRED_KEYS = ("version", "model", "algorithms", "np_sweep", "runs", "t", "seed")


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse the plain-text experiment config format.

    One `key = value` pair per line; blank lines and lines starting with
    `#` are ignored. Lists are comma-separated. Keys:

      version   (required) config schema version; this build reads 1
      model     (required) ssm1 | ssm2
      algorithms (required) comma list from dbf, sdbf, mpf, dbsa, sdbsa,
                ddbsa, sddbsa
      np_sweep  (required) comma list of particle counts
      runs      (required) Monte Carlo run count
      t         (required) steps per run
      seed      (required) root seed; run r uses seed + r
      m         backward trajectory count, or `auto` for m = N_p (default)
      n_i       backward refinement sweeps (default 1)
      weight_reuse  on | off (default on)
      divergence_threshold  position-error threshold; default per model
      out_dir   output directory (the CLI may override it)
      param.<name>  forwarded to the model builder; numbers, or comma
                lists of numbers for vector-valued parameters
    """
    pairs = {}
    params = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {ln}: empty key or value")
        target = params if key.startswith("param.") else pairs
        name = key[len("param."):] if key.startswith("param.") else key
        if name in target:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        target[name] = value

    missing = [k for k in _REQUIRED_KEYS if k not in pairs]
    if missing:
        raise ConfigError(f"missing required config keys {missing}")

    known = set(_REQUIRED_KEYS) | {
        "m",
        "n_i",
        "weight_reuse",
        "divergence_threshold",
        "out_dir",
    }
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")

    def intval(key):
        try:
            return int(pairs[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {pairs[key]!r}") from None

    def listval(key, conv):
        items = [s.strip() for s in pairs[key].split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{key} must be a non-empty comma list")
        try:
            return tuple(conv(s) for s in items)
        except ValueError:
            raise ConfigError(f"bad {key} entry in {pairs[key]!r}") from None

    m = None
    if "m" in pairs and pairs["m"] != "auto":
        try:
            m = int(pairs["m"])
        except ValueError:
            raise ConfigError(f"m must be an integer or auto, got {pairs['m']!r}") from None

    reuse = True
    if "weight_reuse" in pairs:
        if pairs["weight_reuse"] not in ("on", "off"):
            raise ConfigError("weight_reuse must be on or off")
        reuse = pairs["weight_reuse"] == "on"

    threshold = None
    if "divergence_threshold" in pairs:
        try:
            threshold = float(pairs["divergence_threshold"])
        except ValueError:
            raise ConfigError("divergence_threshold must be a number") from None

    model_params = {}
    for name, value in params.items():
        if "," in value:
            model_params[name] = tuple(
                _parse_scalar(s.strip()) for s in value.split(",") if s.strip()
            )
        else:
            model_params[name] = _parse_scalar(value)

    return ExperimentConfig(
        version=intval("version"),
        model=pairs["model"],
        algorithms=listval("algorithms", str),
        np_sweep=listval("np_sweep", int),
        runs=intval("runs"),
        T=intval("t"),
        seed=intval("seed"),
        m=m,
        n_i=intval("n_i") if "n_i" in pairs else 1,
        weight_reuse=reuse,
        divergence_threshold=threshold,
        out_dir=pairs.get("out_dir"),
        model_params=model_params,
    )


def format_config(config: ExperimentConfig) -> str:
    """Serialize a config back to the key-value text format (round-trips
    through `parse_config`)."""
    lines = [
        f"version = {config.version}",
        f"model = {config.model}",
        "algorithms = " + ", ".join(config.algorithms),
        "np_sweep = " + ", ".join(str(n) for n in config.np_sweep),
        f"runs = {config.runs}",
        f"t = {config.T}",
        f"seed = {config.seed}",
        "m = " + ("auto" if config.m is None else str(config.m)),
        f"n_i = {config.n_i}",
        "weight_reuse = " + ("on" if config.weight_reuse else "off"),
    ]
    if config.divergence_threshold is not None:
        lines.append(f"divergence_threshold = {_fmt_float(config.divergence_threshold)}")
    if config.out_dir is not None:
        lines.append(f"out_dir = {config.out_dir}")
    for name in sorted(config.model_params):
        value = config.model_params[name]
        if isinstance(value, tuple):
            text = ", ".join(_fmt_float(v) for v in value)
        else:
            text = _fmt_float(value)
        lines.append(f"param.{name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Error measures


def _states_of(traj):
    return traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)


def rmse(truths: Sequence, estimates: Sequence, D_L: int) -> Tuple[float, float]:
    """Root mean square errors over runs, steps and components, split into
    the linear block (first D_L state entries) and the nonlinear block.

    `truths` may hold simulated trajectories or plain (T, D) arrays;
    `estimates` holds aligned (T, D) arrays. Raises LengthMismatch when
    the run counts or shapes disagree.
    """
    if len(truths) != len(estimates):
        raise LengthMismatch(
            f"{len(truths)} truth runs vs {len(estimates)} estimate runs"
        )
    if not truths:
        raise LengthMismatch("no runs to reduce")
    sq_L, sq_N = [], []
    for truth, est in zip(truths, estimates):
        t = _states_of(truth)
        e = np.asarray(est, dtype=float)
        if t.shape != e.shape:
            raise LengthMismatch(f"truth shape {t.shape} vs estimate shape {e.shape}")
        err = e - t
        sq_L.append(err[:, :D_L] ** 2)
        sq_N.append(err[:, D_L:] ** 2)
    rmse_L = float(np.sqrt(np.mean(np.concatenate(sq_L, axis=None))))
    rmse_N = float(np.sqrt(np.mean(np.concatenate(sq_N, axis=None))))
    return rmse_L, rmse_N


def detect_divergence(
    truth,
    estimate,
    threshold: float,
    D_L: Optional[int] = None,
    weight_collapse: bool = False,
) -> bool:
    """Flag one run as diverged.

    True when the position error norm exceeds `threshold` at any step, or
    when the caller observed a weight collapse. Positions are the nonlinear
    state block (both bundled models keep them there); pass D_L=None to
    take the norm over the whole state instead. Non-finite estimates count
    as diverged.
    """
    if threshold <= 0:
        raise ConfigError("divergence threshold must be positive")
    if weight_collapse:
        return True
    t = _states_of(truth)
    e = np.asarray(estimate, dtype=float)
    if t.shape != e.shape:
        raise LengthMismatch(f"truth shape {t.shape} vs estimate shape {e.shape}")
    err = e - t if D_L is None else e[:, D_L:] - t[:, D_L:]
    norms = np.linalg.norm(err, axis=1)
    if not np.all(np.isfinite(norms)):
        return True
    return bool(np.max(norms) > threshold)


# ---------------------------------------------------------------------------
# Experiment driver


def _build_model(config: ExperimentConfig, run_seed: int) -> ClgModel:
    builder = _MODEL_BUILDERS[config.model]
    if config.model == "ssm2":
        # fresh target placement per run
        return builder(seed=run_seed, **config.model_params)
    return builder(**config.model_params)


class _RunArtifacts:
    """Forward products of one run, built lazily per requested case."""

    def __init__(self, model, traj, N_p, run_seed):
        self.model = model
        self.traj = traj
        self.N_p = N_p
        self.run_seed = run_seed
        self._cache = {}

    def forward(self, kind):
        if kind not in self._cache:
            runner = {"c1": run_dbf, "c2": run_sdbf, "mpf": run_mpf}[kind]
            t0 = time.perf_counter()
            out = runner(self.model, self.traj.measurements, self.N_p, self.run_seed)
            elapsed = time.perf_counter() - t0
            self._cache[kind] = (out, elapsed)
        return self._cache[kind]


def _run_algorithm(alg, art: _RunArtifacts, config: ExperimentConfig, M: int):
    """One algorithm on one run's data: (estimates, seconds, collapsed)."""
    if alg in ("dbf", "sdbf"):
        cache, t_fwd = art.forward("c1" if alg == "dbf" else "c2")
        collapsed = cache.diagnostics.weight_collapse > 0
        return cache.estimates, t_fwd, collapsed
    if alg == "mpf":
        out, t_fwd = art.forward("mpf")
        collapsed = out.diagnostics.weight_collapse > 0
        return out.estimates, t_fwd, collapsed
    kind = "c1" if alg in ("dbsa", "sdbsa") else "c2"
    cache, t_fwd = art.forward(kind)
    t0 = time.perf_counter()
    out = run_smoother(
        cache,
        art.model,
        alg,
        M=M,
        n_i=config.n_i,
        weight_reuse=config.weight_reuse,
        seed=art.run_seed,
    )
    t_bwd = time.perf_counter() - t0
    collapsed = (
        cache.diagnostics.weight_collapse > 0
        or out.diagnostics.weight_collapse > 0
    )
    return out.estimates, t_fwd + t_bwd, collapsed


def _dims_for(model: ClgModel, config: ExperimentConfig, N_p: int, M: int) -> Dims:
    return Dims(
        D_L=model.D_L,
        D_N=model.D_N,
        P=model.P,
        N_p=N_p,
        M=M,
        n_i=config.n_i,
        T=config.T,
    )


def run_experiment(
    config: ExperimentConfig, progress: Optional[Callable[[str], None]] = None
) -> BenchReport:
    """Run the full sweep and reduce it to a report.

    For every particle count, each Monte Carlo run simulates a fresh
    trajectory (run r seeds every stream off `seed + r`), shares its
    forward passes between the algorithms that consume the same filter,
    and times each algorithm's full T-step block wall-clock. Statistics
    are reduced in run order; a run that raises for some algorithm is
    dropped from that algorithm's statistics and reported as an error row.
    """
    say = progress if progress is not None else (lambda msg: None)
    rows, error_rows = [], []
    threshold = config.threshold_for_model()
    for N_p in config.np_sweep:
        M = config.m if config.m is not None else N_p
        per_alg = {alg: [] for alg in config.algorithms}  # (run, est, secs, collapsed)
        truths = {}
        for run in range(config.runs):
            run_seed = config.seed + run
            model = _build_model(config, run_seed)
            traj = simulate(model, config.T, run_seed)
            truths[run] = traj
            art = _RunArtifacts(model, traj, N_p, run_seed)
            for alg in config.algorithms:
                try:
                    est, secs, collapsed = _run_algorithm(alg, art, config, M)
                except (EstimationError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    error_rows.append(
                        BenchRow(
                            alg=alg,
                            N_p=N_p,
                            rmse_L=None,
                            rmse_N=None,
                            ctb_ms=None,
                            divergence_rate=None,
                            mem_estimate=None,
                            flops_estimate=None,
                            runs=run,
                            seed=config.seed,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
                    continue
                per_alg[alg].append((run, est, secs, collapsed))
            say(f"N_p={N_p} run {run + 1}/{config.runs} done")

        model0 = _build_model(config, config.seed)
        for alg in config.algorithms:
            done = per_alg[alg]
            if not done:
                continue  # every run failed; the error rows carry the story
            diverged = [
                detect_divergence(
                    truths[run], est, threshold, model0.D_L, weight_collapse=collapsed
                )
                for run, est, _, collapsed in done
            ]
            keep_t = [truths[run] for (run, _, _, _), bad in zip(done, diverged) if not bad]
            keep_e = [est for (_, est, _, _), bad in zip(done, diverged) if not bad]
            if keep_t:
                rmse_L, rmse_N = rmse(keep_t, keep_e, model0.D_L)
            else:
                rmse_L = rmse_N = float("nan")
            ctb_ms = float(np.median([secs for _, _, secs, _ in done]) * 1e3)
            dims = _dims_for(model0, config, N_p, M)
            mem = memory_estimate(alg, dims)
            flops = flops_estimate(alg, dims) if alg in SMOOTHER_ALGS else 0
            rows.append(
                BenchRow(
                    alg=alg,
                    N_p=N_p,
                    rmse_L=rmse_L,
                    rmse_N=rmse_N,
                    ctb_ms=ctb_ms,
                    divergence_rate=float(np.mean(diverged)),
                    mem_estimate=mem,
                    flops_estimate=flops,
                    runs=len(done),
                    seed=config.seed,
                )
            )
    return BenchReport(config=config, rows=rows, errors=error_rows)


# ---------------------------------------------------------------------------
# Output files


def _fmt_float(v) -> str:
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".12g")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt_float(v)


def report_csv_text(report: BenchReport) -> str:
    """report.csv content: fixed column order, one row per report row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.all_rows():
        writer.writerow([_cell(getattr(row, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def curves_csv_text(report: BenchReport) -> str:
    """curves.csv content: long-format rows grouped by figure, then the
    configured algorithm order, then the sweep order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    value_of = {
        "rmse_n": lambda r: r.rmse_N,
        "rmse_l": lambda r: r.rmse_L,
        "ctb": lambda r: r.ctb_ms,
    }
    by_alg = {}
    for row in report.rows:
        by_alg.setdefault(row.alg, {})[row.N_p] = row
    for fig in CURVE_FIGURES:
        for alg in report.config.algorithms:
            for N_p in report.config.np_sweep:
                row = by_alg.get(alg, {}).get(N_p)
                if row is None:
                    continue
                writer.writerow([fig, alg, str(N_p), _cell(value_of[fig](row))])
    return buf.getvalue()


def manifest_text(report: BenchReport) -> str:
    """manifest.txt content: key-value lines with the config echoed under
    a `config.` prefix, the explicit per-run seeds, and the versions of
    the numeric stack. Same `key = value` format as the config files."""
    config = report.config
    seeds = ", ".join(str(config.seed + r) for r in range(config.runs))
    lines = [
        f"manifest_version = {MANIFEST_SCHEMA_VERSION}",
        f"library = dbsmooth {_package_version()}",
        f"python = {sys.version.split()[0]}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"run_seeds = {seeds}",
        f"report_rows = {len(report.rows)}",
        f"error_rows = {len(report.errors)}",
    ]
    for line in format_config(config).splitlines():
        lines.append(f"config.{line}")
    return "\n".join(lines) + "\n"


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("dbsmooth")
    except Exception:
        return "unknown"


def emit_outputs(report: BenchReport, out_dir: str) -> Tuple[str, str, str]:
    """Write report.csv, curves.csv and manifest.txt into `out_dir`
    (created if needed); returns the three paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, text in (
        ("report.csv", report_csv_text(report)),
        ("curves.csv", curves_csv_text(report)),
        ("manifest.txt", manifest_text(report)),
    ):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        paths.append(path)
    return tuple(paths)


def parse_report_csv(text: str) -> list:
    """Read report.csv content back into BenchRow objects (round-trip of
    `report_csv_text` up to float formatting)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != list(REPORT_COLUMNS):
        raise ConfigError(f"unexpected report header {header}")
    rows = []
    for rec in reader:
        if len(rec) != len(REPORT_COLUMNS):
            raise ConfigError(f"bad report row {rec}")
        vals = dict(zip(REPORT_COLUMNS, rec))

        def f(key, conv):
            return None if vals[key] == "" else conv(vals[key])

        rows.append(
            BenchRow(
                alg=vals["alg"],
                N_p=int(vals["N_p"]),
                rmse_L=f("rmse_L", float),
                rmse_N=f("rmse_N", float),
                ctb_ms=f("ctb_ms", float),
                divergence_rate=f("divergence_rate", float),
                mem_estimate=f("mem_estimate", int),
                flops_estimate=f("flops_estimate", int),
                runs=int(vals["runs"]),
                seed=int(vals["seed"]),
                error=vals["error"] or None,
            )
        )
    return rows
