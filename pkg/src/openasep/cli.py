"""Command-line experiment runner.

Every subcommand resolves a flat configuration (defaults, then an optional
JSON file, then command-line flags), writes its tables under ``--out`` and
leaves a ``manifest.json`` that is enough to rerun it.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .lattice import (
    BoundaryRates,
    LocalFunction,
    SystemParams,
    compute_boundary_param_A,
    compute_boundary_param_B,
)

OUT_ENV = "OPENASEP_OUT"

COMMON = {"kind": None, "seed": 0, "replicas": 100, "threads": 1, "out": None, "plot": False}

DEFAULTS = {
    "simulate": {"N": 32, "geometry": "interval", "L_trunc": None, "rates": "zero", "initial": "flat",
                 "horizon": 0.1, "times": 10, "first_replica": 0},
    "mean-profile": {"N": 128, "rates": "zero", "initial": "flat", "horizon": 0.1, "replicas": 2000},
    "martingale": {"N": 64, "rates": "zero", "initial": "flat", "horizon": 0.5, "times": 10,
                   "replicas": 2000, "test_variant": 0},
    "rterms": {"N_grid": [32, 64, 128, 256], "rates": "zero", "initial": "flat", "horizon": 0.1, "times": 10},
    "kernel-bounds": {"N_grid": [32, 64, 128, 256], "A": 0.0, "B": 0.0},
    "she-compare": {"M": 64, "A": 0.0, "B": 0.0, "horizon": 0.05, "dt": 1e-5, "noise": True},
    "kv": {"N_grid": [64, 256, 1024, 4096, 16384], "rates": "random", "window": 8, "rho": 0.2,
           "mc_N": 256, "replicas": 20000, "observable": [-1.0, 1.0]},
    "semigroup": {"N_grid": [64, 256, 1024, 4096, 16384], "rates": "random", "window": 8, "rho": 0.2},
    "entropy": {"N_grid": [6, 8, 10, 12], "rates": "random", "T": 1.0},
    "one-block": {"ell_grid": [1, 2, 4, 8, 16, 32], "observable": [1.0, -1.0, -1.0, 1.0], "block": None,
                  "samples": 20000},
    "localization": {"N": 256, "rates": "random", "window": 2, "kappa_grid": [0.0, 0.25, 0.5],
                     "tau": None, "replicas": 10000},
    "cutoff": {"N": 128, "rates": "random", "L_short": None, "L_long": None, "radius": None,
               "horizon": 1.0, "replicas": 10000, "stop_after": None},
    "boundary-params": {"rates": "zero"},
}

SHARED_KEYS = {"rates_seed": 2, "rates_scale": 0.4, "rates_window": 2}


class ConfigError(click.ClickException):
    exit_code = 2


# ------------------------------------------------------------ configuration

def _load_json(path: str) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def resolve_config(kind: str, file_cfg: dict | None, flags: dict) -> dict:
    """Merge defaults, file values and flags; reject unknown fields."""
    allowed = {**COMMON, **SHARED_KEYS, **DEFAULTS[kind]}
    cfg = {**COMMON, **SHARED_KEYS, **DEFAULTS[kind], "kind": kind}
    for source, values in (("config", file_cfg or {}), ("flag", flags)):
        for key, value in values.items():
            if value is None and source == "flag":
                continue
            if key not in allowed:
                raise ConfigError(f"{source} field {key!r} is not valid for kind {kind!r}")
            if key == "kind" and value != kind:
                raise ConfigError(f"config kind {value!r} does not match subcommand {kind!r}")
            cfg[key] = value
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUT_ENV, "openasep-out")
    if int(cfg["replicas"]) < 0:
        raise ConfigError("field 'replicas' must be non-negative")
    if int(cfg["threads"]) < 1:
        raise ConfigError("field 'threads' must be positive")
    return cfg


def build_rates(cfg: dict) -> BoundaryRates:
    choice = cfg["rates"]
    if choice == "zero":
        return BoundaryRates.constant()
    if choice == "random":
        rng = np.random.default_rng(int(cfg["rates_seed"]))
        return BoundaryRates.random(rng, m=int(cfg["rates_window"]), scale=float(cfg["rates_scale"]))
    if isinstance(choice, dict):
        try:
            return BoundaryRates.from_dict(choice)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"field 'rates': {exc}") from None
    raise ConfigError("field 'rates' must be 'zero', 'random' or an object of four tables")


def build_params(cfg: dict, N: int | None = None) -> SystemParams:
    N = int(cfg["N"] if N is None else N)
    geometry = cfg.get("geometry", "interval")
    L = cfg.get("L_trunc")
    if geometry == "half-space" and L is None:
        L = 4 * N
    try:
        return SystemParams(N, build_rates(cfg), geometry, L)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------ output helpers

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def write_plot(path: Path, csv_name: str, xcol: int, ycol: int, logscale: bool = False) -> Path:
    lines = ["set datafile separator ','", "set key autotitle columnhead"]
    if logscale:
        lines.append("set logscale xy")
    lines.append(f"plot '{csv_name}' using {xcol}:{ycol} with linespoints")
    path.write_text("\n".join(lines) + "\n")
    return path


class Run:
    """Output directory, artifact list and manifest of one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.summary: dict = {}
        self.t0 = time.perf_counter()

    def table(self, name, header, rows, plot=None):
        write_table(self.out / name, header, rows)
        self.artifacts.append(name)
        if plot is not None and self.cfg["plot"]:
            script = Path(name).with_suffix(".gp").name
            write_plot(self.out / script, name, *plot)
            self.artifacts.append(script)

    def json(self, name, data):
        write_json(self.out / name, data)
        self.artifacts.append(name)

    def finish(self):
        manifest = {
            "kind": self.cfg["kind"],
            "config": self.cfg,
            "version": __version__,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
        }
        write_json(self.out / "manifest.json", manifest)


# ------------------------------------------------------------ experiments

def _grid(cfg):
    n = int(cfg["times"])
    return np.linspace(cfg["horizon"] / n, cfg["horizon"], n)


def run_simulate(run: Run):
    from .engine import ObservationPlan, simulate

    cfg = run.cfg
    params = build_params(cfg)
    R = int(cfg["replicas"])
    if R == 0:
        return
    grid = _grid(cfg)
    first = int(cfg["first_replica"])
    obs = simulate(cfg["initial"], params, ObservationPlan(grid), seed=int(cfg["seed"]), replicas=R,
                   threads=int(cfg["threads"]), first_replica=first)
    h, Z = obs.h, obs.Z
    L = params.size

    def rows():
        for r in range(R):
            for g, t in enumerate(grid):
                for x in range(L + 1):
                    yield first + r, t, x, int(obs.eta[r, g, x]) if x else 0, h[r, g, x], Z[r, g, x]

    run.table(f"snapshots_{first:06d}_{first + R:06d}.csv", ["replica", "t", "x", "eta", "h", "Z"], rows())
    run.summary = {"events": int(obs.events.sum()) if obs.events is not None else None}


def run_mean_profile(run: Run):
    from .engine import ObservationPlan, simulate
    from .harness import mean_sem
    from .heat import RobinLaplacian, evolve_mean_profile

    cfg = run.cfg
    params = build_params(cfg)
    N, T = params.N, float(cfg["horizon"])
    obs = simulate(cfg["initial"], params, ObservationPlan(np.array([T])), seed=int(cfg["seed"]),
                   replicas=int(cfg["replicas"]), threads=int(cfg["threads"]))
    Z0 = np.exp(-obs.initial_K * N**-0.5).mean(axis=0)
    pred = evolve_mean_profile(Z0, T, RobinLaplacian(N, params.A, params.B))
    m, s = mean_sem(obs.Z[:, 0, :])
    run.table("mean_profile.csv", ["x", "mean_Z", "sem", "predicted"],
              zip(range(N + 1), m, s, pred), plot=(1, 2))
    dev = float(np.abs(m - pred).max() / pred.max())
    run.summary = {"relative_deviation": dev, "pass": dev <= 0.05}
    run.json("mean_profile.json", run.summary)


def run_martingale(run: Run):
    from .engine import ObservationPlan, simulate
    from .harness import make_robin_test_function, martingale_series

    cfg = run.cfg
    params = build_params(cfg)
    phi = make_robin_test_function(params.A, params.B, int(cfg["test_variant"]))
    plan = ObservationPlan(_grid(cfg), snapshots=False, test_function=phi, martingale=True)
    obs = simulate(cfg["initial"], params, plan, seed=int(cfg["seed"]), replicas=int(cfg["replicas"]),
                   threads=int(cfg["threads"]))
    d = martingale_series(obs)
    M, S = d.martingale, d.compensated_square
    R = d.replicas
    rows = zip(d.times, M.mean(0), M.std(0, ddof=1) / math.sqrt(R), S.mean(0), S.std(0, ddof=1) / math.sqrt(R),
               d.z_martingale(), d.z_square())
    run.table("martingale.csv", ["t", "mean_N", "sem_N", "mean_sq_minus_bracket", "sem_sq", "z_N", "z_sq"], rows,
              plot=(1, 6))
    run.summary = {"max_abs_z_N": float(np.abs(d.z_martingale()).max()),
                   "max_abs_z_sq": float(np.abs(d.z_square()).max()), "pass": d.passes()}
    run.json("martingale.json", run.summary)


def run_rterms(run: Run):
    from .harness import scaling_suite

    cfg = run.cfg
    rep = scaling_suite(cfg["N_grid"], build_rates(cfg), cfg["initial"], float(cfg["horizon"]),
                                int(cfg["replicas"]), int(cfg["seed"]), int(cfg["threads"]), int(cfg["times"]))
    rep.write_csv(run.out / "rterms.csv")
    rep.write_json(run.out / "rterms.json")
    run.artifacts += ["rterms.csv", "rterms.json"]
    run.summary = rep.summary


def run_kernel_bounds(run: Run):
    from .heat import KernelBoundReport, verify_kernel_bounds

    cfg = run.cfg
    rep = verify_kernel_bounds(cfg["N_grid"], float(cfg["A"]), float(cfg["B"]))
    rows = []
    for family, got, want in (
        ("sup", rep.sup_exponents, KernelBoundReport.TARGET_SUP),
        ("spatial", rep.spatial_exponents, KernelBoundReport.TARGET_SPATIAL),
        ("time", rep.time_exponents, KernelBoundReport.TARGET_TIME),
    ):
        names = ("N", "t", "gap") if family == "spatial" else ("N", "t", "increment")
        for name, g, w in zip(names, got, want):
            rows.append((family, name, g, w))
    run.table("kernel_bounds.csv", ["family", "variable", "fitted", "target"], rows)
    run.json("kernel_bounds.json", rep.to_dict())
    run.summary = rep.checks()


def run_she_compare(run: Run):
    from .harness import mean_sem
    from .heat import RobinLaplacian, evolve_mean_profile, integrate_she
    from .seeding import generator

    cfg = run.cfg
    M = int(cfg["M"])
    lap = RobinLaplacian(M, float(cfg["A"]), float(cfg["B"]))
    dt, T = float(cfg["dt"]), float(cfg["horizon"])
    steps = max(1, int(round(T / dt)))
    Z0 = np.ones(M + 1)
    R = int(cfg["replicas"])
    finals = np.array([
        integrate_she(Z0, lap, dt, steps, generator(int(cfg["seed"]), r), noise=bool(cfg["noise"]),
                      record_every=steps).Z[-1]
        for r in range(R)
    ])
    m, s = mean_sem(finals)
    pred = evolve_mean_profile(Z0, steps * dt, lap)
    run.table("she_compare.csv", ["x", "she_mean", "sem", "heat"], zip(np.arange(M + 1) / M, m, s, pred), plot=(1, 2))
    z = np.abs(m - pred) / np.where(s > 0, s, np.inf)
    run.summary = {"max_abs_z": float(z.max()), "relative_deviation": float(np.abs(m - pred).max() / pred.max())}
    run.json("she_compare.json", run.summary)


def _left_observable(cfg) -> LocalFunction:
    vals = np.asarray(cfg["observable"], dtype=float)
    return LocalFunction(vals, "left")


def run_kv(run: Run):
    from .exact import kv_second_moment
    from .harness import loglog_slope

    cfg = run.cfg
    d = _left_observable(cfg)
    rates = build_rates(cfg)
    rho, L = float(cfg["rho"]), int(cfg["window"])
    rows, vals = [], []
    for N in cfg["N_grid"]:
        tau = N ** (-2 + rho)
        res = kv_second_moment(d, tau, SystemParams(int(N), rates), L, "exact")
        rows.append((N, tau, "exact", res.value, 0.0, res.nodes))
        vals.append(res.value)
    run.summary = {"slope": loglog_slope(cfg["N_grid"], vals), "target_slope": -min(rho, 1 / 3) + 0.05}
    if cfg["mc_N"] and int(cfg["replicas"]) > 0:
        N = int(cfg["mc_N"])
        tau = N ** (-2 + rho)
        p = SystemParams(N, rates)
        ex = kv_second_moment(d, tau, p, L, "exact")
        mc = kv_second_moment(d, tau, p, L, "mc", replicas=int(cfg["replicas"]), seed=int(cfg["seed"]),
                              threads=int(cfg["threads"]))
        rows.append((N, tau, "mc", mc.value, mc.sem, mc.replicas))
        run.summary["mc_z"] = (mc.value - ex.value) / mc.sem
    run.table("kv.csv", ["N", "tau", "mode", "value", "sem", "nodes_or_replicas"], rows)
    run.json("kv.json", run.summary)


def run_semigroup(run: Run):
    from .exact import semigroup_distance
    from .harness import loglog_slope

    cfg = run.cfg
    rates = build_rates(cfg)
    rows, vals = [], []
    for N in cfg["N_grid"]:
        s = N ** (-2 + float(cfg["rho"]))
        v = semigroup_distance(s, SystemParams(int(N), rates), int(cfg["window"]))
        rows.append((N, s, v))
        vals.append(v)
    run.table("semigroup.csv", ["N", "s", "value"], rows, plot=(1, 3, True))
    run.summary = {"slope": loglog_slope(cfg["N_grid"], vals)}
    run.json("semigroup.json", run.summary)


def run_entropy(run: Run):
    from .exact import entropy_production_experiment

    cfg = run.cfg
    rates = build_rates(cfg)
    rows = entropy_production_experiment(cfg["N_grid"], float(cfg["T"]), lambda N: SystemParams(N, rates))
    run.table("entropy.csv", ["N", "T", "initial_state", "H0", "integral", "bound", "ratio"],
              [(r.N, r.T, r.initial_state, r.H0, r.integral, r.bound, r.ratio) for r in rows])
    ratios = [r.ratio for r in rows]
    run.summary = {"max_over_min": max(ratios) / min(ratios)}
    run.json("entropy.json", run.summary)


def run_one_block(run: Run):
    from .exact import one_block_gap

    cfg = run.cfg
    a = LocalFunction(np.asarray(cfg["observable"], dtype=float), "bulk")
    rows = one_block_gap(a, cfg["ell_grid"], cfg["block"], int(cfg["samples"]), int(cfg["seed"]))
    run.table("one_block.csv", ["ell", "block", "sites", "gap", "worst_plus_count", "exact"],
              [(r.ell, r.block, r.sites, r.gap, r.worst_plus_count, r.exact) for r in rows], plot=(1, 4, True))
    run.summary = {"gaps": [r.gap for r in rows]}


def run_localization(run: Run):
    from .coupling import CouplingReport, localization_experiment

    cfg = run.cfg
    params = build_params(cfg)
    rep = CouplingReport()
    for kappa in cfg["kappa_grid"]:
        rep.rows.append(localization_experiment(params, int(cfg["window"]), float(kappa), cfg["tau"],
                                                int(cfg["replicas"]), int(cfg["seed"]), int(cfg["threads"])))
    rep.write_csv(run.out / "localization.csv")
    run.artifacts.append("localization.csv")
    run.summary = {"wilson_upper": [r.wilson_upper for r in rep.rows]}


def run_cutoff(run: Run):
    from .coupling import CouplingReport, cutoff_experiment

    cfg = run.cfg
    N = int(cfg["N"])
    L_short = int(cfg["L_short"] or 4 * N)
    L_long = int(cfg["L_long"] or 8 * N)
    params = build_params({**cfg, "geometry": "half-space", "L_trunc": L_short})
    row = cutoff_experiment(params, L_short, L_long, cfg["radius"], float(cfg["horizon"]), int(cfg["replicas"]),
                            int(cfg["seed"]), int(cfg["threads"]), cfg["stop_after"])
    rep = CouplingReport([row])
    rep.write_csv(run.out / "cutoff.csv")
    run.artifacts.append("cutoff.csv")
    run.summary = {"p_hat": row.p_hat, "wilson_upper": row.wilson_upper, "replicas": row.replicas}


def printed_boundary_params(rates: BoundaryRates) -> dict:
    """The alternative closed forms: ``(alpha - gamma)`` inside the spin-weighted
    term for A, and ``(delta + beta)`` in both terms for B.  Neither makes the
    boundary drift mean zero for general tables; reported for comparison."""
    def mean(f):
        return float(f.values.mean())

    def spin_mean(f, right):
        m = f.window_size
        bit = (np.arange(1 << m) >> (m - 1 if right else 0)) & 1
        return float(np.mean(f.values * (2 * bit - 1)))

    al, ga, de, be = rates.alpha, rates.gamma, rates.delta, rates.beta
    A = 1.5 + 2 * (mean(al) - mean(ga)) - 2 * (spin_mean(al, False) - spin_mean(ga, False))
    B = -1.5 + 2 * (mean(de) + mean(be)) - 2 * (spin_mean(de, True) + spin_mean(be, True))
    return {"A_alternative": A, "B_alternative": B}


def run_boundary_params(run: Run):
    rates = build_rates(run.cfg)
    A = compute_boundary_param_A(rates.alpha, rates.gamma)
    B = compute_boundary_param_B(rates.delta, rates.beta)
    click.echo(f"A={float(A)!r}")
    click.echo(f"B={float(B)!r}")
    run.summary = {"A": A, "B": B, **printed_boundary_params(rates)}
    run.json("boundary_params.json", run.summary)


RUNNERS = {
    "simulate": run_simulate,
    "mean-profile": run_mean_profile,
    "martingale": run_martingale,
    "rterms": run_rterms,
    "kernel-bounds": run_kernel_bounds,
    "she-compare": run_she_compare,
    "kv": run_kv,
    "semigroup": run_semigroup,
    "entropy": run_entropy,
    "one-block": run_one_block,
    "localization": run_localization,
    "cutoff": run_cutoff,
    "boundary-params": run_boundary_params,
}


def execute(kind: str, file_cfg: dict | None = None, flags: dict | None = None) -> dict:
    """Resolve, run and write the manifest; return the resolved config."""
    cfg = resolve_config(kind, file_cfg, flags or {})
    run = Run(cfg)
    try:
        RUNNERS[kind](run)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{kind}: {exc}") from None
    run.finish()
    return cfg


# ------------------------------------------------------------ click wiring

@click.group()
@click.version_option(__version__)
def main():
    """Open ASEP simulator and verification experiments."""


def _subcommand(kind: str):
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Flat JSON config.")
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master seed.")
    @click.option("--replicas", type=click.IntRange(0), help="Number of replicas.")
    @click.option("--threads", type=click.IntRange(1), help="Worker threads.")
    @click.option("--out", type=click.Path(file_okay=False), help=f"Output directory (default ${OUT_ENV}).")
    @click.option("--plot/--no-plot", default=None, help="Emit gnuplot scripts next to the CSVs.")
    def command(config_path, **flags):
        file_cfg = _load_json(config_path) if config_path else None
        execute(kind, file_cfg, flags)

    command.__doc__ = f"Run the {kind} experiment."
    main.command(kind)(command)


for _kind in RUNNERS:
    _subcommand(_kind)


if __name__ == "__main__":
    main()
