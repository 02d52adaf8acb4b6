"""Basic coupling of a chain with a shorter copy of itself.

Both chains share site 1 and the left reservoir.  The longer chain (``full``)
may carry a right reservoir; the shorter one (``local``) ends in a closed
site.  A move is one transition of one slot in the full chain's layout:
a swap across bond ``x`` or a flip at a reservoir.  When the move has the
same kind and the same rate in both chains it fires in both from one
clock; otherwise each chain runs it on its own independent clock.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.stats
from numba import njit

from . import _kernels as K_
from .engine import ObservationPlan, _pack, simulate
from .fenwick import fen_add, fen_build, fen_prefix, fen_top_bit
from .lattice import SpinConfiguration, SystemParams
from .seeding import replica_generators, replica_seeds

BOTH, FULL_ONLY, LOCAL_ONLY = 3, 1, 2
CHAIN_NAMES = {BOTH: "both", FULL_ONLY: "full", LOCAL_ONLY: "local"}


# ------------------------------------------------------------ compiled core

@njit(cache=True, nogil=True, inline="always")
def _move(eta, L, slot, has_right, m, tabs, fp):
    """Rate and kind of ``slot`` in one chain; kind is the spin that moves."""
    if slot >= L + 1 and not has_right:
        return 0.0, 0
    if slot < L:
        if eta[slot] == eta[slot + 1]:
            return 0.0, 0
        return K_.slot_rate(eta, L, slot, has_right, m, tabs, fp), int(eta[slot])
    site = 1 if slot == L else L
    return K_.slot_rate(eta, L, slot, has_right, m, tabs, fp), int(eta[site])


@njit(cache=True, nogil=True, inline="always")
def _local_slot(s, LA, LB):
    """Slot of the local chain for coupled slot ``s``, or 0 if absent."""
    if s < LB:
        return s
    if s == LA:
        return LB
    return 0


@njit(cache=True, nogil=True, _nrt=False)
def _pair_rates(s, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, out):
    rA, kA = _move(ea, LA, s, ra_right, m, ta, fa)
    sb = _local_slot(s, LA, LB)
    rB, kB = 0.0, 0
    if sb > 0:
        rB, kB = _move(eb, LB, sb, False, m, tb, fb)
    out[0] = rA
    out[1] = rB
    if rA > 0.0 and rA == rB and kA == kB:
        out[2] = rA
    else:
        out[2] = rA + rB


@njit(cache=True, nogil=True, _nrt=False)
def _refresh_pair(s, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, rA, rB, c, tree, buf):
    _pair_rates(s, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, buf)
    rA[s] = buf[0]
    rB[s] = buf[1]
    if buf[2] != c[s]:
        fen_add(tree, s, buf[2] - c[s])
        c[s] = buf[2]


@njit(cache=True, nogil=True, _nrt=False)
def _differs(ea, eb, x, LB):
    return x <= LB and ea[x] != eb[x]


@njit(cache=True, nogil=True)
def coupled_trajectory(ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, target, horizon, log_t, log_slot, log_who, info):
    """Run the pair until ``horizon`` or until a discrepancy sits at a site
    ``<= target``.  ``info`` receives (hit time or -1, events, discrepancies,
    logged events, log overflow)."""
    n = LA + 1
    rA = np.zeros(n + 1)
    rB = np.zeros(n + 1)
    c = np.zeros(n + 1)
    tree = np.zeros(n + 1)
    buf = np.zeros(3)
    KA = np.zeros(LA + 1, dtype=np.int64)
    KB = np.zeros(LB + 1, dtype=np.int64)
    for s in range(1, n + 1):
        _pair_rates(s, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, buf)
        rA[s] = buf[0]
        rB[s] = buf[1]
        c[s] = buf[2]
    fen_build(c, tree)
    top = fen_top_bit(n)
    ndisc = 0
    for x in range(1, LB + 1):
        if ea[x] != eb[x]:
            ndisc += 1
    cap = log_t.size
    info[0] = -1.0
    info[4] = 0.0
    for x in range(1, min(target, LB) + 1):
        if ea[x] != eb[x]:
            info[0] = 0.0
    t = 0.0
    events = 0
    logged = 0
    while info[0] < 0:
        total = fen_prefix(tree, n)
        if total <= 0.0:
            break
        t += -math.log(1.0 - np.random.random()) / total
        if t > horizon:
            break
        s = K_.choose_slot(tree, c, top, n, np.random.random())
        u = np.random.random() * c[s]
        shared = rA[s] > 0.0 and c[s] == rA[s] and rA[s] == rB[s]
        if shared:
            who = BOTH
        elif u < rA[s]:
            who = FULL_ONLY
        else:
            who = LOCAL_ONLY
        a, b = K_.changed_sites(LA, s)
        for x in range(a, b + 1):
            if _differs(ea, eb, x, LB):
                ndisc -= 1
        if who & FULL_ONLY:
            K_.apply_event(ea, KA, LA, s)
        if who & LOCAL_ONLY:
            K_.apply_event(eb, KB, LB, _local_slot(s, LA, LB))
        for x in range(a, b + 1):
            if _differs(ea, eb, x, LB):
                ndisc += 1
                if x <= target:
                    info[0] = t
        events += 1
        if logged < cap:
            log_t[logged] = t
            log_slot[logged] = s
            log_who[logged] = who
            logged += 1
        elif cap > 0:
            info[4] = 1.0
        for q in range(max(1, a - 1), min(LA - 1, b) + 1):
            _refresh_pair(q, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, rA, rB, c, tree, buf)
        if a <= m:
            _refresh_pair(LA, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, rA, rB, c, tree, buf)
        if ra_right and b >= LA - m + 1:
            _refresh_pair(LA + 1, ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, rA, rB, c, tree, buf)
    info[1] = events
    info[2] = ndisc
    info[3] = logged


@njit(cache=True, nogil=True)
def coupled_batch(seeds, ea0, eb0, LA, ra_right, LB, m, ta, fa, tb, fb, target, horizon, hits, final_a, final_b):
    for r in range(seeds.size):
        np.random.seed(seeds[r])
        ea = ea0[r].copy()
        eb = eb0[r].copy()
        info = np.zeros(5)
        empty_t = np.zeros(0)
        empty_i = np.zeros(0, dtype=np.int64)
        coupled_trajectory(ea, LA, ra_right, eb, LB, m, ta, fa, tb, fb, target, horizon, empty_t, empty_i, empty_i, info)
        hits[r] = info[0]
        final_a[r] = ea
        final_b[r] = eb


# ------------------------------------------------------------ coupled pair

def _check_pair(full: SystemParams, local: SystemParams):
    if local.has_right_reservoir:
        raise ValueError("the local chain must end in a closed site")
    if local.size > full.size:
        raise ValueError("the local chain must be the shorter one")
    if local.N != full.N or local.rates.to_dict() != full.rates.to_dict():
        raise ValueError("both chains need the same N and reservoir rates")
    if local.size == full.size and full.has_right_reservoir:
        raise ValueError("equal lengths need the same right end")


@dataclass
class CoupledEvent:
    dt: float
    slot: int
    chains: str


@dataclass
class CoupledState:
    """Two configurations agreeing on the shared reservoir at site 1."""

    full_params: SystemParams
    local_params: SystemParams
    full: SpinConfiguration
    local: SpinConfiguration
    t: float = 0.0
    discrepancies: set[int] = field(default_factory=set)

    def __post_init__(self):
        _check_pair(self.full_params, self.local_params)
        if self.full.size != self.full_params.size or self.local.size != self.local_params.size:
            raise ValueError("configuration sizes do not match the parameters")
        self.discrepancies = self.difference_set()
        p = _pack(self.full_params)
        q = _pack(self.local_params)
        self._packs = (p, q)

    @classmethod
    def from_full(cls, full_params: SystemParams, local_params: SystemParams, eta: SpinConfiguration):
        """Start the local chain from the restriction of ``eta``."""
        local = SpinConfiguration(eta.spins[: local_params.size + 1].copy())
        return cls(full_params, local_params, eta, local)

    def difference_set(self) -> set[int]:
        LB = self.local.size
        diff = np.nonzero(self.full.spins[1 : LB + 1] != self.local.spins[1 : LB + 1])[0] + 1
        return set(int(x) for x in diff)

    def padded(self):
        ea = np.zeros(self.full.size + 2, dtype=np.int8)
        eb = np.zeros(self.local.size + 2, dtype=np.int8)
        ea[: self.full.size + 1] = self.full.spins
        eb[: self.local.size + 1] = self.local.spins
        return ea, eb


def coupled_step(state: CoupledState, rng: np.random.Generator) -> CoupledEvent:
    """Advance the pair by one coupled move, in plain Python."""
    p, q = state._packs
    ea, eb = state.padded()
    LA, LB = p.L, q.L
    m = p.m
    slots = np.arange(1, LA + 2)
    rA = np.zeros(LA + 2)
    rB = np.zeros(LA + 2)
    shared = np.zeros(LA + 2, dtype=bool)
    for s in slots:
        a, ka = _move(ea, LA, s, p.has_right, m, p.tabs, p.fp)
        sb = _local_slot(s, LA, LB)
        b, kb = _move(eb, LB, sb, False, m, q.tabs, q.fp) if sb else (0.0, 0)
        rA[s], rB[s] = a, b
        shared[s] = a > 0 and a == b and ka == kb
    c = np.where(shared, rA, rA + rB)
    total = c.sum()
    if total <= 0:
        raise ValueError("both chains are frozen")
    dt = rng.exponential(1 / total)
    s = int(rng.choice(LA + 2, p=c / total))
    if shared[s]:
        who = BOTH
    elif rng.random() * c[s] < rA[s]:
        who = FULL_ONLY
    else:
        who = LOCAL_ONLY
    if who & FULL_ONLY:
        K_.apply_event(ea, np.zeros(LA + 1, dtype=np.int64), LA, s)
    if who & LOCAL_ONLY:
        K_.apply_event(eb, np.zeros(LB + 1, dtype=np.int64), LB, _local_slot(s, LA, LB))
    state.full = SpinConfiguration(ea[: LA + 1].copy())
    state.local = SpinConfiguration(eb[: LB + 1].copy())
    a, b = K_.changed_sites(LA, s)
    for x in range(a, b + 1):
        if x <= LB:
            if state.full.spins[x] != state.local.spins[x]:
                state.discrepancies.add(x)
            else:
                state.discrepancies.discard(x)
    state.t += dt
    return CoupledEvent(float(dt), s, CHAIN_NAMES[who])


# ------------------------------------------------------------ batch runs

@dataclass
class CoupledRun:
    hit_times: np.ndarray
    full: np.ndarray
    local: np.ndarray

    @property
    def hits(self) -> int:
        return int(np.count_nonzero(self.hit_times >= 0))


def run_coupled(
    full_params: SystemParams,
    local_params: SystemParams,
    target: int,
    horizon: float,
    replicas: int,
    seed: int = 0,
    threads: int = 1,
    first_replica: int = 0,
    initial=None,
) -> CoupledRun:
    """Coupled replicas from product mean-zero initial data (or ``initial``,
    a callable taking a generator and returning the full configuration)."""
    _check_pair(full_params, local_params)
    p, q = _pack(full_params), _pack(local_params)
    if p.m != q.m:
        raise ValueError("rate windows differ between the chains")
    LA, LB = p.L, q.L
    R = int(replicas)
    ea0 = np.zeros((R, LA + 2), dtype=np.int8)
    eb0 = np.zeros((R, LB + 2), dtype=np.int8)
    for i, rng in enumerate(replica_generators(seed, first_replica, R)):
        if initial is None:
            spins = rng.choice(np.array([-1, 1], dtype=np.int8), size=LA)
        else:
            spins = np.asarray(initial(rng).spins[1:], dtype=np.int8)
        ea0[i, 1 : LA + 1] = spins
        eb0[i, 1 : LB + 1] = spins[:LB]
    seeds = replica_seeds(seed, first_replica, R)
    hits = np.zeros(R)
    final_a = np.zeros_like(ea0)
    final_b = np.zeros_like(eb0)

    def work(lo, hi):
        coupled_batch(
            seeds[lo:hi], ea0[lo:hi], eb0[lo:hi], LA, p.has_right, LB, p.m,
            p.tabs, p.fp, q.tabs, q.fp, int(target), float(horizon),
            hits[lo:hi], final_a[lo:hi], final_b[lo:hi],
        )

    threads = max(1, int(threads))
    if threads == 1 or R < 2:
        work(0, R)
    else:
        bounds = np.linspace(0, R, min(threads, R) + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda ab: work(*ab), zip(bounds[:-1], bounds[1:])))
    return CoupledRun(hits, final_a[:, : LA + 1], final_b[:, : LB + 1])


# ------------------------------------------------------------ reports

def wilson_upper(hits: int, n: int, confidence: float = 0.95) -> float:
    """Upper end of the two-sided Wilson score interval."""
    if n <= 0:
        return 1.0
    z = scipy.stats.norm.ppf(0.5 + confidence / 2)
    p = hits / n
    centre = p + z * z / (2 * n)
    spread = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return float(min(1.0, (centre + spread) / (1 + z * z / n)))


def max_hits_for_bound(n: int, bound: float, confidence: float = 0.95) -> int:
    """Largest hit count whose Wilson upper bound at ``n`` trials stays ``<= bound``."""
    k = -1
    while wilson_upper(k + 1, n, confidence) <= bound:
        k += 1
    return k


@dataclass
class PassageRow:
    N: int
    kappa_or_L: float
    tau_or_horizon: float
    p_hat: float
    replicas: int
    wilson_upper: float


@dataclass
class CouplingReport:
    rows: list[PassageRow] = field(default_factory=list)

    COLUMNS = ("N", "kappa_or_L", "tau_or_horizon", "p_hat", "replicas", "wilson_upper")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.N, repr(float(r.kappa_or_L)), repr(float(r.tau_or_horizon)),
                            repr(float(r.p_hat)), r.replicas, repr(float(r.wilson_upper))])


def fattened_length(window: int, N: int, kappa: float) -> int:
    return int(window + math.ceil(N**kappa))


def localization_experiment(
    params: SystemParams,
    window: int,
    kappa: float,
    tau: float | None = None,
    replicas: int = 10_000,
    seed: int = 0,
    threads: int = 1,
) -> PassageRow:
    """Frequency with which a discrepancy between the chain and its localized
    copy on ``window + ceil(N**kappa)`` sites reaches ``1..window`` by ``tau``."""
    N = params.N
    if window < params.rates.m:
        raise ValueError("window must cover the reservoir rate window")
    tau = N ** -1.8 if tau is None else float(tau)
    L_fat = fattened_length(window, N, kappa)
    if L_fat > params.size:
        raise ValueError("fattened window longer than the lattice")
    local = SystemParams(N, params.rates, "window", L_fat)
    run = run_coupled(params, local, window, tau, replicas, seed, threads)
    k = run.hits
    return PassageRow(N, float(kappa), tau, k / replicas, int(replicas), wilson_upper(k, replicas))


def cutoff_experiment(
    params: SystemParams,
    L_short: int,
    L_long: int,
    radius: int | None = None,
    horizon: float = 1.0,
    replicas: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    stop_after: int | None = None,
    batch: int = 250,
) -> PassageRow:
    """Frequency of a spin difference at a site ``<= radius`` by ``horizon``
    between half-space truncations of lengths ``L_short`` and ``L_long``.

    ``stop_after`` ends the run once that many replicas have hit; the row
    then reports the replicas actually run.
    """
    if params.geometry != "half-space":
        raise ValueError("cutoff comparison needs half-space parameters")
    N = params.N
    if radius is None:
        radius = int(0.5 * N * math.log(N))
    if not 1 <= radius < L_short <= L_long:
        raise ValueError("need 1 <= radius < L_short <= L_long")
    short = SystemParams(N, params.rates, "window", L_short)
    long_ = SystemParams(N, params.rates, "window", L_long)
    hits = done = 0
    while done < replicas:
        n = min(batch, replicas - done)
        run = run_coupled(long_, short, radius, horizon, n, seed, threads, first_replica=done)
        hits += run.hits
        done += n
        if stop_after is not None and hits >= stop_after:
            break
    return PassageRow(N, float(L_short), float(horizon), hits / done, done, wilson_upper(hits, done))


@dataclass
class KSResult:
    site: int
    statistic: float
    pvalue: float
    samples: tuple[int, int]


def truncation_ks_test(
    params: SystemParams,
    L_short: int,
    L_long: int,
    site: int,
    horizon: float = 1.0,
    replicas: int = 2000,
    seed: int = 0,
    threads: int = 1,
) -> KSResult:
    """Two-sample KS test on ``Z`` at ``site`` for two independent ensembles of
    half-space chains truncated at ``L_short`` and ``L_long``."""
    if not 0 <= site <= L_short <= L_long:
        raise ValueError("need 0 <= site <= L_short <= L_long")
    plan = ObservationPlan(np.array([float(horizon)]))
    samples = []
    for k, L in enumerate((L_short, L_long)):
        p = SystemParams(params.N, params.rates, "half-space", L)
        obs = simulate("product", p, plan, seed=seed, replicas=replicas, threads=threads,
                       first_replica=k * replicas)
        samples.append(obs.Z[:, 0, site])
    res = scipy.stats.ks_2samp(samples[0], samples[1])
    return KSResult(site, float(res.statistic), float(res.pvalue), (replicas, replicas))
