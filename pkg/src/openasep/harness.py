"""Robin test functions, the discrete pairing, martingale-problem diagnostics,
R-term monitors and the multi-N scaling suite."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K_
from .engine import EVENT_KINDS, ObservationPlan, Observations, initial_heights, simulate
from .heat import RobinLaplacian, evolve_mean_profile
from .lattice import (
    LocalFunction,
    SpinConfiguration,
    SystemParams,
    boundary_drift_left,
    boundary_drift_right,
    eval_local_function,
)

# ------------------------------------------------------------ test functions


def _smoothstep(y):
    """C^2 step from 1 (y <= 0) to 0 (y >= 1)."""
    y = np.clip(y, 0.0, 1.0)
    return 1 - y**3 * (10 - 15 * y + 6 * y**2)


def _smoothstep_d1(y):
    inside = (y > 0) & (y < 1)
    return np.where(inside, -30 * y**2 * (1 - y) ** 2, 0.0)


def _smoothstep_d2(y):
    inside = (y > 0) & (y < 1)
    return np.where(inside, -60 * y * (1 - y) * (1 - 2 * y), 0.0)


@dataclass(frozen=True)
class RobinTestFunction:
    """Polynomial ``sum coeffs[k] x^k`` obeying Robin conditions at the ends.

    On the half-space the polynomial is linear and multiplied by a C^2 cutoff
    equal to 1 on ``[0, x_max/2]`` and 0 beyond ``x_max``.
    """

    coeffs: tuple[float, ...]
    A: float
    B: float | None
    family: str
    x_max: float | None = None

    def _poly(self, x, order=0):
        p = np.polynomial.polynomial.Polynomial(self.coeffs)
        for _ in range(order):
            p = p.deriv()
        return p(np.asarray(x, dtype=np.float64))

    def _cut(self, x, order=0):
        half = self.x_max / 2
        y = (np.asarray(x, dtype=np.float64) - half) / half
        if order == 0:
            return _smoothstep(y)
        if order == 1:
            return _smoothstep_d1(y) / half
        return _smoothstep_d2(y) / half**2

    def __call__(self, x):
        if self.x_max is None:
            return self._poly(x)
        return self._poly(x) * self._cut(x)

    def derivative(self, x):
        if self.x_max is None:
            return self._poly(x, 1)
        return self._poly(x, 1) * self._cut(x) + self._poly(x) * self._cut(x, 1)

    def second_derivative(self, x):
        if self.x_max is None:
            return self._poly(x, 2)
        return (
            self._poly(x, 2) * self._cut(x)
            + 2 * self._poly(x, 1) * self._cut(x, 1)
            + self._poly(x) * self._cut(x, 2)
        )

    def constraint_residuals(self) -> tuple[float, float]:
        left = float(self.derivative(0.0) + self.A * self(0.0))
        right = 0.0 if self.B is None else float(self.derivative(1.0) + self.B * self(1.0))
        return left, right

    def satisfies_constraints(self, tol: float = 1e-12) -> bool:
        return all(abs(r) <= tol for r in self.constraint_residuals())


def make_robin_test_function(
    A: float, B: float | None = None, variant: int = 0, x_max: float | None = None
) -> RobinTestFunction:
    """Cubic ``c0 + c1 x + c3 x^3`` with ``phi'(0) = -A phi(0)`` and
    ``phi'(1) = -B phi(1)``.

    ``variant`` shifts the constant term to ``1 + variant / 4``.  At ``B = -3``
    the cubic family is singular and a quartic ``c0 + c1 x + c4 x^4`` is used.
    ``B=None`` builds the half-space variant supported in ``[0, x_max]``.
    """
    c0 = 1.0 + variant / 4
    c1 = -A * c0
    if B is None:
        if x_max is None or x_max <= 0:
            raise ValueError("half-space test functions need x_max > 0")
        return RobinTestFunction((c0, c1), A, None, "linear-cutoff", float(x_max))
    if B == -3:
        c4 = c0 * (A * (1 + B) - B) / (4 + B)
        return RobinTestFunction((c0, c1, 0.0, 0.0, c4), A, B, "quartic")
    c3 = c0 * (A * (1 + B) - B) / (3 + B)
    return RobinTestFunction((c0, c1, 0.0, c3), A, B, "cubic")


def pairing(psi, phi, N: int | None = None) -> float:
    """``N^{-1} sum_x psi[x] phi(x/N)`` over ``x = 0..len(psi)-1``."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 1 or psi.size < 2:
        raise ValueError("psi must be a vector on 0..N")
    N = psi.size - 1 if N is None else int(N)
    xs = np.arange(psi.size) / N
    vals = phi(xs) if callable(phi) else np.asarray(phi, dtype=np.float64)
    if np.shape(vals) != psi.shape:
        raise ValueError("length mismatch between psi and phi")
    return float(psi @ vals) / N


# -------------------------------------------------------------- statistics


def mean_sem(a, axis=0):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[axis]
    sd = a.std(axis=axis, ddof=1) if n > 1 else np.zeros_like(a.mean(axis=axis))
    return a.mean(axis=axis), sd / math.sqrt(max(n, 1))


def zscores(a, axis=0):
    m, s = mean_sem(a, axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, m / np.where(s > 0, s, 1), np.where(m == 0, 0.0, np.inf))


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# ------------------------------------------------------------- diagnostics


@dataclass
class MartingaleDiagnostic:
    """Per-replica series of the compensated pairing and its square."""

    times: np.ndarray
    martingale: np.ndarray
    bracket: np.ndarray

    @property
    def compensated_square(self) -> np.ndarray:
        return self.martingale**2 - self.bracket

    @property
    def replicas(self) -> int:
        return self.martingale.shape[0]

    def z_martingale(self) -> np.ndarray:
        return zscores(self.martingale)

    def z_square(self) -> np.ndarray:
        return zscores(self.compensated_square)

    def passes(self, k: float = 4.0) -> bool:
        return bool(np.all(np.abs(self.z_martingale()) <= k) and np.all(np.abs(self.z_square()) <= k))


def martingale_series(obs: Observations) -> MartingaleDiagnostic:
    """``N_t = (Z_t, phi) - (Z_0, phi) - int exact drift``, plus its bracket."""
    if obs.mart is None:
        raise ValueError("trajectory was recorded without martingale hooks")
    F, comp, brak = obs.mart[..., 0], obs.mart[..., 1], obs.mart[..., 2]
    return MartingaleDiagnostic(obs.grid, F - obs.initial_pairing[:, None] - comp, brak)


@dataclass
class RTermMonitor:
    times: np.ndarray
    series: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.series[name]

    def sup(self, name: str) -> np.ndarray:
        """Per-replica ``sup_t |R(t)|`` over the grid."""
        return np.abs(self.series[name]).max(axis=1)


RTERM_NAMES = ("R0", "R1", "R2", "R3", "R4", "R5")


def rterm_series(obs: Observations, k: int) -> np.ndarray:
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= 5:
        raise ValueError("R-term index must be in 0..5")
    if obs.rterms is None:
        raise ValueError("trajectory was recorded without R-term hooks")
    return obs.rterm(RTERM_NAMES[k])


def rterm_monitor(obs: Observations) -> RTermMonitor:
    if obs.rterms is None:
        raise ValueError("trajectory was recorded without R-term hooks")
    return RTermMonitor(obs.grid, {name: obs.rterm(name) for name in K_.R_COLS})


def identity_residual(obs: Observations) -> np.ndarray:
    """``N_t - [F_t - F_0 - int (Z, phi''/2) - R0 - R1 - R2 - R3 - R4 - Rbulk]``;
    zero up to rounding when the drift decomposition is consistent."""
    mart = martingale_series(obs).martingale
    F = obs.mart[..., 0] - obs.initial_pairing[:, None]
    r = obs.rterm
    rest = r("heat") + r("R0") + r("R1") + r("R2") + r("R3") + r("R4") + r("Rbulk")
    return mart - (F - rest)


def r3_r4_envelopes(obs: Observations, params: SystemParams, phi) -> tuple[np.ndarray, np.ndarray]:
    """Pathwise bounds ``N^{-1/2} sup|b| |phi(end)| int Z_end ds`` for R3 and R4."""
    from .engine import boundary_tables

    tabs = boundary_tables(params, max(params.rates.m, 1))
    u = params.N**-0.5
    env3 = u * np.abs(tabs[1]).max() * abs(float(phi(0.0))) * obs.rterm("Z0int")
    if params.has_right_reservoir:
        env4 = u * np.abs(tabs[3]).max() * abs(float(phi(1.0))) * obs.rterm("ZLint")
    else:
        env4 = np.zeros_like(env3)
    return env3, env4


# ------------------------------------------------------ python replay oracle


def _site_rates(eta: np.ndarray, conf: SpinConfiguration, params: SystemParams):
    """Every active transition as ``(height index, rate, Z factor - 1)``."""
    N, L = params.N, params.size
    up, dn = math.expm1(2 / math.sqrt(N)), math.expm1(-2 / math.sqrt(N))
    out = []
    for x in range(1, L):
        if eta[x] == 1 and eta[x + 1] == -1:
            out.append((x, params.swap_right_rate, up))
        elif eta[x] == -1 and eta[x + 1] == 1:
            out.append((x, params.swap_left_rate, dn))
    r = params.rates
    if eta[1] == -1:
        out.append((0, params.flip_rate(eval_local_function(r.alpha, conf)), up))
    else:
        out.append((0, params.flip_rate(eval_local_function(r.gamma, conf)), dn))
    if params.has_right_reservoir:
        if eta[L] == -1:
            out.append((L, params.flip_rate(eval_local_function(r.delta, conf)), dn))
        else:
            out.append((L, params.flip_rate(eval_local_function(r.beta, conf)), up))
    return out


def replay_integrals(log, initial: SpinConfiguration, params: SystemParams, phi, grid) -> dict[str, np.ndarray]:
    """Rebuild the pairing, compensator, bracket and R-terms from an event
    log by direct evaluation on each holding interval.

    Independent of the compiled running sums: the Laplacian term is applied
    to ``Z`` directly rather than through summation by parts.
    """
    N, L = params.N, params.size
    u, nu = N**-0.5, params.nu
    xs = np.arange(L + 1) / N
    w = np.asarray(phi(xs), dtype=np.float64) / N
    half_phi2 = np.asarray(phi.second_derivative(xs), dtype=np.float64) / 2
    lap = RobinLaplacian(N, params.A, params.B) if params.has_right_reservoir else RobinLaplacian(N, params.A, None, L)
    phi0 = float(phi(0.0))
    phi1 = float(phi(1.0)) if params.has_right_reservoir else 0.0

    eta = initial.spins.astype(np.int64).copy()
    K = initial_heights(initial)
    grid = np.asarray(grid, dtype=np.float64)
    names = ("F", "comp", "brak", "R0", "R1", "R2", "R3", "R4", "heat")
    out = {k: np.zeros(grid.size) for k in names}
    acc = dict.fromkeys(names[1:], 0.0)

    def integrate(t0, t1):
        if t1 <= t0:
            return
        g1 = math.exp(nu * t0) * math.expm1(nu * (t1 - t0)) / nu
        g2 = math.exp(2 * nu * t0) * math.expm1(2 * nu * (t1 - t0)) / (2 * nu)
        base = np.exp(-K * u)
        conf = SpinConfiguration(eta.astype(np.int8))
        drift = nu * float(w @ base)
        brak = 0.0
        for x, rate, g in _site_rates(eta, conf, params):
            drift += rate * g * w[x] * base[x]
            brak += rate * (g * w[x] * base[x]) ** 2
        acc["comp"] += drift * g1
        acc["brak"] += brak * g2
        lap_pair = N * N / 2 * float(lap.apply(base) @ w)
        heat = float(base @ half_phi2) / N
        acc["R0"] += (lap_pair - heat) * g1
        acc["heat"] += heat * g1
        fl, bl = boundary_drift_left(conf, params)
        acc["R1"] += fl * base[0] * phi0 * g1
        acc["R3"] += u * bl * base[0] * phi0 * g1
        if params.has_right_reservoir:
            fr, br = boundary_drift_right(conf, params)
            acc["R2"] += fr * base[L] * phi1 * g1
            acc["R4"] += u * br * base[L] * phi1 * g1

    def record(i, t):
        out["F"][i] = float(w @ np.exp(-K * u + nu * t))
        for k, v in acc.items():
            out[k][i] = v

    t, gi = 0.0, 0
    for ev in np.asarray(log):
        te = float(ev["t"])
        while gi < grid.size and grid[gi] < te:
            integrate(t, grid[gi])
            t = grid[gi]
            record(gi, t)
            gi += 1
        integrate(t, te)
        t = te
        _apply_logged(eta, K, L, int(ev["site"]), EVENT_KINDS[int(ev["kind"])])
    while gi < grid.size:
        integrate(t, grid[gi])
        t = grid[gi]
        record(gi, t)
        gi += 1
    return out


def _apply_logged(eta, K, L, site, kind):
    if kind == "right_swap":
        eta[site], eta[site + 1] = -1, 1
        K[site] -= 2
    elif kind == "left_swap":
        eta[site], eta[site + 1] = 1, -1
        K[site] += 2
    elif kind == "create_left":
        eta[1] = 1
        K[0] -= 2
    elif kind == "remove_left":
        eta[1] = -1
        K[0] += 2
    elif kind == "create_right":
        eta[L] = 1
        K[L] += 2
    else:
        eta[L] = -1
        K[L] -= 2


# ---------------------------------------------------------- scaling suite


@dataclass
class ScalingReport:
    rows: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, N, statistic, time, value, sem, replicas):
        self.rows.append((int(N), statistic, float(time), float(value), float(sem), int(replicas)))

    def values(self, statistic: str, time: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        sel = [r for r in self.rows if r[1] == statistic and (time is None or r[2] == time)]
        return np.array([r[0] for r in sel]), np.array([r[3] for r in sel])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "statistic", "time", "value", "sem", "replicas"])
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), r[5]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def scaling_suite(
    N_grid,
    rates,
    initial="flat",
    horizon: float = 0.1,
    replicas: int = 100,
    seed: int = 0,
    threads: int = 1,
    times: int = 10,
    stoch_a: LocalFunction | None = None,
    test_variant: int = 0,
) -> ScalingReport:
    """Mean-profile deviation, R-term sups and the block-fluctuation
    statistic for each ``N``; slopes across ``N`` go in the summary."""
    report = ScalingReport()
    stoch_a = stoch_a if stoch_a is not None else LocalFunction(np.array([1.0, -1.0, -1.0, 1.0]), "bulk")
    grid = np.linspace(horizon / times, horizon, times)
    med = {"R1": [], "stochII": [], "R2": []}
    envelope_ok = True
    for N in N_grid:
        params = SystemParams(int(N), rates)
        phi = make_robin_test_function(params.A, params.B, test_variant)
        plan = ObservationPlan(
            grid, snapshots=True, test_function=phi, rterms=True, stoch_a=stoch_a, stoch_weight=lambda x: np.ones_like(x)
        )
        obs = simulate(initial, params, plan, seed=seed, replicas=replicas, threads=threads)
        Z0 = np.exp(-obs.initial_K * N**-0.5)
        lap = RobinLaplacian(N, params.A, params.B)
        Zmean, Zsem = mean_sem(obs.Z[:, -1, :])
        pred = evolve_mean_profile(Z0.mean(axis=0), horizon, lap)
        dev = np.abs(Zmean - pred).max() / pred.max()
        report.add(N, "mean_profile_rel_dev", horizon, dev, Zsem.max() / pred.max(), replicas)
        mon = rterm_monitor(obs)
        for name in ("R1", "R2", "R3", "R4", "R5", "stochII"):
            sups = mon.sup(name)
            report.add(N, f"sup_{name}_median", horizon, np.median(sups), sups.std(ddof=1) / math.sqrt(replicas), replicas)
            if name in med:
                med[name].append(np.median(sups))
        env3, env4 = r3_r4_envelopes(obs, params, phi)
        envelope_ok &= bool(np.all(np.abs(mon["R3"]) <= env3 * (1 + 1e-12)))
        envelope_ok &= bool(np.all(np.abs(mon["R4"]) <= env4 * (1 + 1e-12)))
        for i, t in enumerate(grid):
            m, s = mean_sem(mon["R1"][:, i])
            report.add(N, "R1_mean", t, m, s, replicas)
    Ns = [int(n) for n in N_grid]
    # a statistic that vanishes at every N has no slope and counts as decaying
    vanishing = {k: not np.any(v) for k, v in med.items()}
    slopes = {k: None if vanishing[k] else loglog_slope(Ns, v) for k, v in med.items()}
    decays = {k: vanishing[k] or slopes[k] < 0 for k in med}
    report.summary = {
        "N_grid": Ns,
        "horizon": horizon,
        "replicas": replicas,
        "slopes": slopes,
        "R3_R4_envelopes_hold": envelope_ok,
        "pass": {
            "R1_decreasing": decays["R1"],
            "stochII_decreasing": decays["stochII"],
            "R3_R4_envelopes": envelope_ok,
        },
    }
    return report
