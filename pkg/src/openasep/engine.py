"""Exact continuous-time simulation of open ASEP with its height field,
Gärtner transform, per-site jump ledger and exact compensators.

The heavy lifting happens in :mod:`openasep._kernels`; this module packs
parameters into flat arrays, derives per-replica seeds and unpacks results.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K_
from .fenwick import fen_prefix, fen_top_bit
from .lattice import (
    LocalFunction,
    ProductMeasureSpec,
    SpinConfiguration,
    SystemParams,
    _broadcast,
    boundary_drift_left,
    boundary_drift_right,
    flat_configuration,
    sample_product,
)
from .seeding import replica_generators, replica_seeds

EVENT_KINDS = ("right_swap", "left_swap", "create_left", "remove_left", "create_right", "remove_right")
EVENT_DTYPE = np.dtype([("t", "<f8"), ("site", "<u4"), ("kind", "<u4")])


class ConfigurationError(ValueError):
    pass


class AbsorbingState(RuntimeError):
    pass


# ---------------------------------------------------------------- packing

@dataclass(frozen=True)
class _Packed:
    L: int
    has_right: bool
    m: int
    tabs: np.ndarray
    fp: np.ndarray


def _pack(params: SystemParams, extra_left: LocalFunction | None = None) -> _Packed:
    r = params.rates
    m = max(r.m, extra_left.window_size if extra_left is not None else 0, 1)
    if m > params.size:
        raise ConfigurationError("window longer than the lattice")
    tabs = np.vstack(
        [
            _broadcast(r.alpha, m),
            _broadcast(r.gamma, m),
            _broadcast(r.delta, m, right=True),
            _broadcast(r.beta, m, right=True),
        ]
    )
    N = params.N
    fp = np.zeros(K_.N_FPARAMS)
    fp[K_.F_RR] = params.swap_right_rate
    fp[K_.F_RL] = params.swap_left_rate
    fp[K_.F_FBASE] = N * N / 4
    fp[K_.F_FSCALE] = N**1.5
    fp[K_.F_NU] = params.nu
    fp[K_.F_U] = N**-0.5
    return _Packed(params.size, params.has_right_reservoir, m, np.ascontiguousarray(tabs), fp)


# ------------------------------------------------------------ event table

@dataclass
class EventTable:
    """Per-slot transition rates and their prefix-sum tree.

    ``rates[x]`` for ``x = 1..L-1`` is the rate of the active swap across
    bond ``(x, x+1)``; ``rates[L]`` and ``rates[L+1]`` are the reservoir
    flips at the two ends.
    """

    rates: np.ndarray
    tree: np.ndarray

    @property
    def size(self) -> int:
        return self.rates.size - 2

    @property
    def bond_rates(self) -> np.ndarray:
        return self.rates[1 : self.size]

    @property
    def left_flip(self) -> float:
        return float(self.rates[self.size])

    @property
    def right_flip(self) -> float:
        return float(self.rates[self.size + 1])

    @property
    def total(self) -> float:
        return fen_prefix(self.tree, self.rates.size - 1)


def build_event_table(eta: SpinConfiguration, params: SystemParams) -> EventTable:
    if eta.size != params.size:
        raise ConfigurationError("configuration does not match the lattice size")
    p = _pack(params)
    rates = np.zeros(p.L + 2)
    tree = np.zeros(p.L + 2)
    K_.build_rates(_padded(eta), p.L, p.has_right, p.m, p.tabs, p.fp, rates, tree)
    return EventTable(rates, tree)


def _padded(eta: SpinConfiguration) -> np.ndarray:
    out = np.zeros(eta.size + 2, dtype=np.int8)
    out[: eta.size + 1] = eta.spins
    return out


def initial_heights(eta: SpinConfiguration) -> np.ndarray:
    """Integer heights ``K`` at time 0 (boundary counter zero)."""
    K = np.zeros(eta.size + 1, dtype=np.int64)
    K[1:] = np.cumsum(eta.spins[1:].astype(np.int64))
    return K


# ------------------------------------------------------- single trajectory

@dataclass
class Event:
    slot: int
    site: int
    kind: str


@dataclass
class EngineState:
    """Mutable state of one trajectory, for step-by-step use."""

    params: SystemParams
    eta: np.ndarray
    K: np.ndarray
    t: float
    table: EventTable
    _packed: _Packed = field(repr=False)

    @classmethod
    def start(cls, eta: SpinConfiguration, params: SystemParams) -> "EngineState":
        table = build_event_table(eta, params)
        return cls(params, _padded(eta), initial_heights(eta), 0.0, table, _pack(params))

    @property
    def configuration(self) -> SpinConfiguration:
        return SpinConfiguration(self.eta[: self.params.size + 1].copy())

    def field(self) -> "GartnerField":
        return GartnerField(self.params.N, self.t, self.K.copy())


def step(state: EngineState, rng: np.random.Generator) -> tuple[Event, float]:
    """Advance one Gillespie event in place; returns the event and holding time."""
    tab = state.table
    total = tab.total
    if total <= 0:
        raise AbsorbingState("no transition has positive rate")
    u1, u2 = rng.random(2)
    dt = -math.log1p(-u1) / total
    p = state._packed
    nslots = p.L + 1
    slot = K_.choose_slot(tab.tree, tab.rates, fen_top_bit(nslots), nslots, u2)
    site, kind = K_.apply_event(state.eta, state.K, p.L, slot)
    K_.refresh_slots(state.eta, p.L, slot, p.has_right, p.m, p.tabs, p.fp, tab.rates, tab.tree)
    state.t += dt
    return Event(int(slot), int(site), EVENT_KINDS[kind]), dt


# ------------------------------------------------------------ Gärtner field

@dataclass(frozen=True)
class GartnerField:
    """Height field and transform at one time, stored through integer heights."""

    N: int
    t: float
    K: np.ndarray

    @property
    def counter(self) -> float:
        """``h[0]``: 2/sqrt(N) times (removals - creations) at site 1."""
        return self.K[0] / math.sqrt(self.N)

    @property
    def h(self) -> np.ndarray:
        return self.K / math.sqrt(self.N)

    @property
    def log_Z(self) -> np.ndarray:
        return -self.h + (self.N / 2 - 1 / 24) * self.t

    @property
    def Z(self) -> np.ndarray:
        return np.exp(self.log_Z)


def gartner_snapshot(state: EngineState) -> np.ndarray:
    return state.field().Z


# ------------------------------------------------------------- drift oracle

def exact_pairing_drift(state: EngineState, phi, params: SystemParams | None = None) -> float:
    """Exact infinitesimal drift of ``(Z, phi)_N``: sum over active events of
    rate times the change in the pairing, plus the ``nu`` term.

    ``phi`` is either a callable on ``[0, L/N]`` or the array ``phi(x/N)``.
    Written independently of the compiled running sums so it can check them.
    """
    params = params or state.params
    N, L = params.N, params.size
    eta = state.eta[1 : L + 1].astype(int)
    Z = gartner_snapshot(state)
    ph = _phi_values(phi, N, L)
    w = ph / N
    up, dn = math.expm1(2 / math.sqrt(N)), math.expm1(-2 / math.sqrt(N))
    drift = params.nu * float(w @ Z)
    a, b = eta[:-1], eta[1:]
    bulk = np.where((a == 1) & (b == -1), params.swap_right_rate * up, 0.0)
    bulk += np.where((a == -1) & (b == 1), params.swap_left_rate * dn, 0.0)
    drift += float(bulk @ (w[1:L] * Z[1:L]))
    conf = state.configuration
    r = params.rates
    from .lattice import eval_local_function as ev

    if eta[0] == -1:
        drift += params.flip_rate(ev(r.alpha, conf)) * up * w[0] * Z[0]
    else:
        drift += params.flip_rate(ev(r.gamma, conf)) * dn * w[0] * Z[0]
    if params.has_right_reservoir:
        if eta[-1] == -1:
            drift += params.flip_rate(ev(r.delta, conf)) * dn * w[L] * Z[L]
        else:
            drift += params.flip_rate(ev(r.beta, conf)) * up * w[L] * Z[L]
    return drift


def _phi_values(phi, N: int, L: int) -> np.ndarray:
    if callable(phi):
        return np.asarray(phi(np.arange(L + 1) / N), dtype=np.float64)
    ph = np.asarray(phi, dtype=np.float64)
    if ph.shape != (L + 1,):
        raise ValueError(f"phi must have {L + 1} entries")
    return ph


# ------------------------------------------------------ half-space cutoff

def truncate_halfspace(params: SystemParams, L_trunc: int | None = None, delta: float | None = None) -> SystemParams:
    """Half-space chain truncated to sites ``1..L_trunc`` with a closed far end.

    Give either an explicit length or a cutoff exponent ``delta`` for
    ``ceil(N**(3/2 + delta))`` sites.
    """
    if params.geometry != "half-space":
        raise ConfigurationError("truncation applies to half-space geometry")
    if delta is not None:
        L_trunc = math.ceil(params.N ** (1.5 + delta))
    L_trunc = L_trunc or params.L_trunc
    if L_trunc < 4 * params.N:
        raise ConfigurationError(f"L_trunc={L_trunc} < 4N={4 * params.N}")
    return SystemParams(params.N, params.rates, "half-space", int(L_trunc), params.A_override)


# -------------------------------------------------------------- simulate

@dataclass
class ObservationPlan:
    """What to record along each trajectory.

    ``test_function`` must be callable on ``x/N`` and, for R-terms, provide
    ``second_derivative``.  ``stoch_a`` is a bulk local function summed with
    weight ``stoch_weight(x/N)``; ``plain`` is a left-anchored function whose
    bare time integral is recorded.
    """

    grid: np.ndarray
    snapshots: bool = True
    test_function: Callable | None = None
    martingale: bool = False
    rterms: bool = False
    ledger: bool = False
    event_log: int = 0
    stoch_a: LocalFunction | None = None
    stoch_weight: Callable | None = None
    plain: LocalFunction | None = None

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.grid, dtype=np.float64))
        if g.size == 0 or g[0] < 0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be non-negative and strictly increasing")
        self.grid = g
        if (self.martingale or self.rterms) and self.test_function is None:
            raise ValueError("martingale and R-term series need a test function")

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])


@dataclass
class Observations:
    params: SystemParams
    grid: np.ndarray
    eta: np.ndarray | None
    K: np.ndarray | None
    mart: np.ndarray | None
    rterms: np.ndarray | None
    ledger: np.ndarray | None
    events: np.ndarray
    event_logs: list[np.ndarray] | None
    wall_seconds: float
    initial_K: np.ndarray
    initial_pairing: np.ndarray

    @property
    def replicas(self) -> int:
        return self.events.size

    @property
    def h(self) -> np.ndarray:
        return self.K / math.sqrt(self.params.N)

    @property
    def Z(self) -> np.ndarray:
        """``(replicas, times, sites)`` array of the transform."""
        return np.exp(-self.h + self.params.nu * self.grid[None, :, None])

    def rterm(self, name: str) -> np.ndarray:
        return self.rterms[:, :, K_.R_COLS.index(name)]


InitialData = SpinConfiguration | Callable[[np.random.Generator], SpinConfiguration] | str


def resolve_initial(initial: InitialData, size: int) -> Callable[[np.random.Generator], SpinConfiguration]:
    if isinstance(initial, SpinConfiguration):
        if initial.size != size:
            raise ConfigurationError("initial configuration has the wrong size")
        return lambda rng: initial
    if isinstance(initial, str):
        if initial == "flat":
            conf = flat_configuration(size)
            return lambda rng: conf
        if initial.startswith("product"):
            sigma = float(initial.split(":", 1)[1]) if ":" in initial else 0.0
            spec = ProductMeasureSpec(sigma, size)
            return lambda rng: sample_product(spec, rng)
        raise ConfigurationError(f"unknown initial data {initial!r}")
    return initial


def bulk_remainder_table(params: SystemParams) -> np.ndarray:
    """Exact drift of ``Z[x]`` per unit ``Z[x]`` minus ``(N^2/2)`` times its
    discrete Laplacian, for each pattern ``2*[eta_x=+1] + [eta_{x+1}=+1]``."""
    N = params.N
    u = N**-0.5
    out = np.zeros(4)
    for pat in range(4):
        a = 1 if pat & 2 else -1
        b = 1 if pat & 1 else -1
        c = params.nu
        if a == 1 and b == -1:
            c += params.swap_right_rate * math.expm1(2 * u)
        elif a == -1 and b == 1:
            c += params.swap_left_rate * math.expm1(-2 * u)
        out[pat] = c - N * N / 2 * (math.expm1(u * a) + math.expm1(-u * b))
    return out


def _observable_arrays(params: SystemParams, plan: ObservationPlan, m: int):
    """Weight rows (pairing, R0, R5, stochII, heat term) and boundary tables."""
    N, L = params.N, params.size
    xs = np.arange(L + 1) / N
    wts = np.zeros((K_.N_WEIGHTS, L + 1))
    phi0 = phi1 = 0.0
    fb = np.zeros((4, 1 << m))
    if plan.test_function is not None:
        phi = plan.test_function
        ph = np.asarray(phi(xs), dtype=np.float64)
        wts[K_.W_PAIR] = ph / N
        wts[K_.W_R5] = ph**2 / N
        phi0 = float(ph[0])
        phi1 = float(ph[N]) if params.has_right_reservoir else 0.0
        if plan.rterms:
            lap = _laplacian(params)
            half_phi2 = np.asarray(phi.second_derivative(xs), dtype=np.float64) / (2 * N)
            wts[K_.W_R0] = N * N / 2 * lap.apply(wts[K_.W_PAIR]) - half_phi2
            wts[K_.W_HEAT] = half_phi2
            fb = boundary_tables(params, m)
    a = plan.stoch_a or LocalFunction(np.zeros(2), "bulk")
    if plan.stoch_weight is not None:
        wts[K_.W_STOCH] = np.asarray(plan.stoch_weight(xs), dtype=np.float64) / N
    g = _broadcast(plan.plain, m) if plan.plain is not None else np.zeros(1 << m)
    return wts, a.values.astype(np.float64), a.window_size, fb, g, phi0, phi1


def _laplacian(params: SystemParams):
    from .heat import RobinLaplacian

    if params.has_right_reservoir:
        return RobinLaplacian(params.N, params.A, params.B)
    return RobinLaplacian(params.N, params.A, None, params.size)


def boundary_tables(params: SystemParams, m: int) -> np.ndarray:
    """``f_left, b_left, f_right, b_right`` for every boundary-window index."""
    L = params.size
    out = np.zeros((4, 1 << m))
    base = np.ones(L, dtype=np.int8)
    for idx in range(1 << m):
        bits = np.array([1 if (idx >> k) & 1 else -1 for k in range(m)], dtype=np.int8)
        s = base.copy()
        s[:m] = bits
        out[0, idx], out[1, idx] = boundary_drift_left(SpinConfiguration.from_sites(s), params)
        if params.has_right_reservoir:
            s = base.copy()
            s[L - m :] = bits
            out[2, idx], out[3, idx] = boundary_drift_right(SpinConfiguration.from_sites(s), params)
    return out


def simulate(
    initial: InitialData,
    params: SystemParams,
    plan: ObservationPlan,
    seed: int = 0,
    replicas: int = 1,
    threads: int = 1,
    first_replica: int = 0,
) -> Observations:
    """Run ``replicas`` independent trajectories.

    Replica ``i`` draws its initial data and its event stream from seeds
    derived from ``(seed, first_replica + i)`` alone, so output does not
    depend on ``threads`` or on how a run is split into batches.
    """
    p = _pack(params, plan.plain)
    L, R, G = p.L, replicas, plan.grid.size
    init = resolve_initial(initial, L)
    seeds = replica_seeds(seed, first_replica, R)
    eta0 = np.zeros((R, L + 2), dtype=np.int8)
    K0 = np.zeros((R, L + 1), dtype=np.int64)
    for i, rng in enumerate(replica_generators(seed, first_replica, R)):
        conf = init(rng)
        eta0[i, : L + 1] = conf.spins
        K0[i] = initial_heights(conf)

    flags = 0
    flags |= K_.OBS_SNAPSHOT if plan.snapshots else 0
    flags |= K_.OBS_MARTINGALE if plan.martingale else 0
    flags |= K_.OBS_RTERMS if (plan.rterms or plan.plain is not None or plan.stoch_a is not None) else 0
    flags |= K_.OBS_LEDGER if plan.ledger else 0
    flags |= K_.OBS_EVENTLOG if plan.event_log else 0
    wts, at, ma, fb, g, phi0, phi1 = _observable_arrays(params, plan, p.m)
    fp = p.fp.copy()
    fp[K_.F_PHI0] = phi0
    fp[K_.F_PHI1] = phi1
    fp[K_.F_RBULK : K_.F_RBULK + 4] = bulk_remainder_table(params)
    initial_pairing = np.exp(-K0 * params.N**-0.5) @ wts[K_.W_PAIR]

    def alloc(shape, dtype, on):
        return np.zeros(shape if on else (R,) + (0,) * (len(shape) - 1), dtype=dtype)

    snap_eta = alloc((R, G, L + 1), np.int8, plan.snapshots)
    snap_K = alloc((R, G, L + 1), np.int64, plan.snapshots)
    mart = alloc((R, G, 3), np.float64, plan.martingale)
    rterm = alloc((R, G, len(K_.R_COLS)), np.float64, bool(flags & K_.OBS_RTERMS))
    ledger = np.zeros((R, G, L + 1, 4) if plan.ledger else (R, 0, 0, 4))
    cap = int(plan.event_log)
    elog_t = np.zeros((R, cap))
    elog_site = np.zeros((R, cap), dtype=np.uint32)
    elog_kind = np.zeros((R, cap), dtype=np.uint32)
    counts = np.zeros((R, 3), dtype=np.int64)

    def work(lo, hi):
        K_.run_batch(
            seeds[lo:hi], eta0[lo:hi], K0[lo:hi], L, p.has_right, p.m, p.tabs, fp, plan.grid, flags,
            wts, at, ma, fb, g,
            snap_eta[lo:hi], snap_K[lo:hi], mart[lo:hi], rterm[lo:hi], ledger[lo:hi],
            elog_t[lo:hi], elog_site[lo:hi], elog_kind[lo:hi], counts[lo:hi],
        )

    t0 = time.perf_counter()
    threads = max(1, int(threads))
    if threads == 1 or R < 2:
        work(0, R)
    else:
        bounds = np.linspace(0, R, min(threads, R) + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda ab: work(*ab), zip(bounds[:-1], bounds[1:])))
    wall = time.perf_counter() - t0

    if counts[:, 2].any():
        raise ConfigurationError("event log capacity exceeded")
    logs = None
    if cap:
        logs = []
        for i in range(R):
            n = counts[i, 1]
            rec = np.zeros(n, dtype=EVENT_DTYPE)
            rec["t"], rec["site"], rec["kind"] = elog_t[i, :n], elog_site[i, :n], elog_kind[i, :n]
            logs.append(rec)
    return Observations(
        params,
        plan.grid,
        snap_eta if plan.snapshots else None,
        snap_K if plan.snapshots else None,
        mart if plan.martingale else None,
        rterm if flags & K_.OBS_RTERMS else None,
        ledger if plan.ledger else None,
        counts[:, 0].copy(),
        logs,
        wall,
        K0,
        initial_pairing,
    )


def write_event_log(path, log: np.ndarray) -> None:
    """16-byte little-endian records: f64 time, u32 site, u32 kind."""
    np.asarray(log, dtype=EVENT_DTYPE).tofile(path)


def read_event_log(path) -> np.ndarray:
    return np.fromfile(path, dtype=EVENT_DTYPE)
