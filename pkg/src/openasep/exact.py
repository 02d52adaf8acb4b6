"""Exact finite-state analyses on windows of at most 12 sites.

States are integers whose bit ``k`` is set when site ``k+1`` carries +1.
The reference measure is uniform on all ``2^L`` states, so densities with
respect to it evolve under the transposed generator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .lattice import (
    CanonicalMeasureSpec,
    LocalFunction,
    SpinConfiguration,
    SystemParams,
    _broadcast,
    canonical_expectation,
    product_expectation,
)

MAX_SITES = 12

Kind = Literal["full", "localized-left", "localized-right", "symmetric", "symmetric-right", "symmetric-full"]
KINDS = ("full", "localized-left", "localized-right", "symmetric", "symmetric-right", "symmetric-full")


class WindowTooLarge(ValueError):
    pass


def state_spins(L: int) -> np.ndarray:
    """``(2^L, L)`` array of spins; row ``i`` is the configuration with index ``i``."""
    idx = np.arange(1 << L)
    return np.where((idx[:, None] >> np.arange(L)) & 1, 1, -1).astype(np.int8)


def state_index(eta: SpinConfiguration) -> int:
    return int(sum(1 << k for k, s in enumerate(eta.spins[1:]) if s == 1))


@dataclass(frozen=True)
class GeneratorMatrix:
    L: int
    kind: str
    N: int
    Q: scipy.sparse.csr_matrix

    @property
    def states(self) -> int:
        return 1 << self.L

    def dense(self) -> np.ndarray:
        return self.Q.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.Q.sum(axis=1)).ravel()

    def is_metzler(self) -> bool:
        off = self.Q - scipy.sparse.diags(self.Q.diagonal())
        return bool(off.min() >= 0) if off.nnz else True

    def inf_norm(self) -> float:
        """Operator norm on bounded functions: max absolute row sum."""
        return float(np.abs(self.dense()).sum(axis=1).max())


def build_generator(params: SystemParams, L: int | None = None, kind: Kind = "full") -> GeneratorMatrix:
    """Exact rate matrix of the chain on sites ``1..L`` with rates at scale ``params.N``.

    ``full`` has both reservoirs; ``localized-left`` keeps only the left one
    and closes the right end; ``localized-right`` mirrors it.  The symmetric
    kinds keep speed ``N^2/2`` swaps and speed ``N^2/4`` flips at the left end,
    right end, or both.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown generator kind {kind!r}")
    L = params.size if L is None else int(L)
    if L < 1 or L > MAX_SITES:
        raise WindowTooLarge(f"exact mode supports 1..{MAX_SITES} sites, got {L}")
    N = params.N
    n = 1 << L
    idx = np.arange(n)
    bit = lambda k: (idx >> k) & 1
    rows, cols, vals = [], [], []

    def add(mask, target, rate):
        r = idx[mask]
        rate = np.broadcast_to(rate, idx.shape)[mask]
        keep = rate != 0
        rows.append(r[keep])
        cols.append(target[mask][keep])
        vals.append(rate[keep])

    symmetric = kind.startswith("symmetric")
    rr = N * N / 2 if symmetric else params.swap_right_rate
    rl = N * N / 2 if symmetric else params.swap_left_rate
    for k in range(L - 1):
        b0, b1 = bit(k), bit(k + 1)
        swapped = idx ^ ((1 << k) | (1 << (k + 1)))
        add((b0 == 1) & (b1 == 0), swapped, rr)
        add((b0 == 0) & (b1 == 1), swapped, rl)

    left = kind in ("full", "localized-left", "symmetric", "symmetric-full")
    right = kind in ("full", "localized-right", "symmetric-right", "symmetric-full")
    r = params.rates
    m = r.m
    if (left or right) and not symmetric and m > L:
        raise ValueError("rate window longer than the exact window")
    if left:
        if symmetric:
            rate = np.full(n, N * N / 4)
        else:
            w = idx & ((1 << m) - 1)
            v = np.where(bit(0) == 0, r.alpha.values[w], r.gamma.values[w])
            rate = N * N / 4 + N**1.5 * v
        add(np.ones(n, bool), idx ^ 1, rate)
    if right:
        last = 1 << (L - 1)
        if symmetric:
            rate = np.full(n, N * N / 4)
        else:
            w = (idx >> (L - m)) & ((1 << m) - 1)
            v = np.where(bit(L - 1) == 0, r.delta.values[w], r.beta.values[w])
            rate = N * N / 4 + N**1.5 * v
        add(np.ones(n, bool), idx ^ last, rate)

    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    if np.any(vals < 0):
        raise ValueError("negative transition rate")
    off = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out = np.asarray(off.sum(axis=1)).ravel()
    Q = (off - scipy.sparse.diags(out)).tocsr()
    return GeneratorMatrix(L, kind, N, Q)


# ------------------------------------------------------------ densities


def uniform_density(L: int) -> np.ndarray:
    return np.ones(1 << L)


def point_mass_density(L: int, state: int) -> np.ndarray:
    P = np.zeros(1 << L)
    P[state] = float(1 << L)
    return P


def forward_density(P0, G: GeneratorMatrix, t: float) -> np.ndarray:
    """Density at time ``t`` with respect to the uniform measure."""
    P0 = np.asarray(P0, dtype=np.float64)
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return P0.copy()
    return scipy.sparse.linalg.expm_multiply(t * G.Q.T.tocsc(), P0)


def forward_path(P0, G: GeneratorMatrix, times) -> np.ndarray:
    """Densities at increasing ``times`` by chained exact steps."""
    P = np.asarray(P0, dtype=np.float64).copy()
    QT = G.Q.T.tocsc()
    out, t = [], 0.0
    for s in np.asarray(times, dtype=np.float64):
        if s < t:
            raise ValueError("times must be non-decreasing")
        if s > t:
            P = scipy.sparse.linalg.expm_multiply((s - t) * QT, P)
            t = s
        out.append(P.copy())
    return np.array(out)


def law_from_density(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return P / P.size


def _check_density(P, tol=1e-10):
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < -tol * max(1.0, float(np.abs(P).max()))):
        raise ValueError("density has negative entries")
    return np.clip(P, 0.0, None)


def relative_entropy(P) -> float:
    """``E0[P log P]`` with ``0 log 0 = 0``."""
    P = _check_density(P)
    pos = P > 0
    return float(np.sum(P[pos] * np.log(P[pos])) / P.size)


def fisher_information(P, L: int | None = None, flips: str = "both") -> float:
    """Speed-one Dirichlet form of ``sqrt(P)``: swaps on every bond plus
    flips at site 1 and site L.  ``flips`` picks ``both``, ``left``,
    ``right`` or ``none`` (the canonical variant has no flips)."""
    P = _check_density(P)
    n = P.size
    L = int(round(math.log2(n))) if L is None else L
    if 1 << L != n:
        raise ValueError("density length is not a power of two")
    r = np.sqrt(P)
    idx = np.arange(n)
    D = 0.0
    for k in range(L - 1):
        differ = ((idx >> k) ^ (idx >> (k + 1))) & 1
        swapped = np.where(differ == 1, idx ^ (3 << k), idx)
        D += np.mean((r[swapped] - r) ** 2)
    if flips in ("both", "left"):
        D += np.mean((r[idx ^ 1] - r) ** 2)
    if flips in ("both", "right"):
        D += np.mean((r[idx ^ (1 << (L - 1))] - r) ** 2)
    elif flips not in ("left", "none"):
        raise ValueError(f"unknown flip set {flips!r}")
    return float(D)


# ---------------------------------------------------------- experiments


@dataclass
class EntropyRow:
    N: int
    T: float
    initial_state: int
    H0: float
    integral: float
    bound: float
    ratio: float
    min_entropy: float


def _time_nodes(T: float, N: int, nodes: int) -> np.ndarray:
    first = min(T, 1e-3 / N**2)
    return np.concatenate([[0.0], np.geomspace(first, T, nodes)])


def entropy_production_experiment(
    N_grid=(6, 8, 10, 12),
    T: float = 1.0,
    rates_for=None,
    initial_states=None,
    nodes: int = 400,
) -> list[EntropyRow]:
    """``int_0^T D0[P_s] ds`` for point-mass starts on the chain with ``L = N``,
    normalised by ``N^{-2} H[P_0] + N^{-1/2} T``.  The worst start (largest
    ratio) among ``initial_states`` is reported for each ``N``."""
    rows = []
    for N in N_grid:
        params = rates_for(N) if rates_for is not None else SystemParams(N)
        G = build_generator(params, N, "full")
        starts = initial_states(N) if initial_states is not None else _default_starts(N)
        ts = _time_nodes(T, N, nodes)
        best = None
        for st in starts:
            P0 = point_mass_density(N, st)
            path = forward_path(P0, G, ts)
            D = np.array([fisher_information(P, N) for P in path])
            integral = float(np.trapezoid(D, ts))
            H0 = relative_entropy(P0)
            bound = N**-2 * H0 + N**-0.5 * T
            row = EntropyRow(N, T, st, H0, integral, bound, integral / bound, min(relative_entropy(P) for P in path))
            if best is None or row.ratio > best.ratio:
                best = row
        rows.append(best)
    return rows


def _default_starts(L: int) -> list[int]:
    full = (1 << L) - 1
    alt = sum(1 << k for k in range(0, L, 2))
    return [0, full, alt, full ^ alt]


def semigroup_distance(s: float, params: SystemParams, L: int, kinds=("localized-left", "symmetric")) -> float:
    """``max_i sum_j |exp(s G1) - exp(s G2)|_ij``."""
    if s < 0:
        raise ValueError("s must be non-negative")
    if s == 0:
        return 0.0
    G1 = build_generator(params, L, kinds[0]).dense()
    G2 = build_generator(params, L, kinds[1]).dense()
    diff = scipy.linalg.expm(s * G1) - scipy.linalg.expm(s * G2)
    return float(np.abs(diff).sum(axis=1).max())


def duhamel_envelope(s: float, params: SystemParams, L: int, kinds=("localized-left", "symmetric")) -> float:
    """``s * ||G1 - G2||``, the integrated perturbation norm bounding the distance."""
    G1 = build_generator(params, L, kinds[0]).dense()
    G2 = build_generator(params, L, kinds[1]).dense()
    return s * float(np.abs(G1 - G2).sum(axis=1).max())


# ----------------------------------------------------- Kipnis-Varadhan


def _left_table(d: LocalFunction, L: int) -> np.ndarray:
    """Values of a left-anchored ``d`` on every state of the ``L``-site window."""
    if d.anchor != "left":
        raise ValueError("the additive functional must be left-anchored")
    if d.window_size > L:
        raise ValueError("functional window longer than the exact window")
    return _broadcast(d, L)


def _check_mean_zero(d: LocalFunction, tol: float = 1e-12):
    if abs(product_expectation(d, 0.0)) > tol:
        raise ValueError("additive functional must have mean zero under the uniform measure")


def symmetric_geometric_nodes(tau: float, nodes: int, ratio: float = 1e-6) -> np.ndarray:
    """Nodes on ``[0, tau]`` clustered geometrically at both ends and
    symmetric under ``s -> tau - s``."""
    half = nodes // 2
    g = np.geomspace(tau * ratio, tau / 2, half)
    left = np.concatenate([[0.0], g[:-1]])
    return np.concatenate([left, [tau / 2], (tau - left)[::-1]])


def _kv_quadrature(Q: np.ndarray, dvec: np.ndarray, tau: float, nodes: int) -> float:
    s = symmetric_geometric_nodes(tau, nodes)
    n = dvec.size
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = Q
    aug[:n, n] = dvec
    K = s.size
    pis = np.zeros((K, n))
    vs = np.zeros((K, n))
    pis[0] = 1.0 / n
    for k in range(K - 1):
        E = scipy.linalg.expm((s[k + 1] - s[k]) * aug)
        T, inc = E[:n, :n], E[:n, n]
        pis[k + 1] = pis[k] @ T
        # v(s + h) = int_0^h T_r d dr + T_h v(s)
        vs[k + 1] = inc + T @ vs[k]
    # v(tau - s_k) sits at the mirrored node by symmetry of the grid
    g = np.einsum("ki,i,ki->k", pis, dvec, vs[::-1])
    return 2 * float(np.trapezoid(g, s))


def kv_second_moment_vanloan(d: LocalFunction, tau: float, params: SystemParams, L: int) -> float:
    """Block-matrix exponential oracle for ``E[(tau^{-1} int_0^tau d)^2]``."""
    _check_mean_zero(d)
    Q = build_generator(params, L, "localized-left").dense()
    dvec = _left_table(d, L)
    n = dvec.size
    M = np.zeros((2 * n + 1, 2 * n + 1))
    M[:n, :n] = Q
    M[:n, n : 2 * n] = np.diag(dvec)
    M[n : 2 * n, n : 2 * n] = Q
    M[n : 2 * n, 2 * n] = dvec
    E = scipy.linalg.expm(tau * M)
    second = 2 * float(np.full(n, 1.0 / n) @ E[:n, 2 * n])
    return second / tau**2


@dataclass
class KVResult:
    value: float
    sem: float = 0.0
    nodes: int = 0
    replicas: int = 0


def kv_second_moment(
    d: LocalFunction,
    tau: float,
    params: SystemParams,
    L: int,
    mode: Literal["exact", "mc"] = "exact",
    nodes: int = 64,
    rel_tol: float = 1e-3,
    replicas: int = 20000,
    seed: int = 0,
    threads: int = 1,
) -> KVResult:
    """``E0[(tau^{-1} int_0^tau d(eta_s) ds)^2]`` for the localized-left chain
    on ``L`` sites started from the uniform measure."""
    _check_mean_zero(d)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode == "exact":
        Q = build_generator(params, L, "localized-left").dense()
        dvec = _left_table(d, L)
        if not np.any(dvec):
            return KVResult(0.0, nodes=nodes)
        val = _kv_quadrature(Q, dvec, tau, nodes)
        while True:
            finer = _kv_quadrature(Q, dvec, tau, 2 * nodes)
            if abs(finer - val) <= rel_tol * abs(finer) or nodes >= 4096:
                return KVResult(finer / tau**2, nodes=2 * nodes)
            nodes *= 2
            val = finer
    if mode == "mc":
        from .engine import ObservationPlan, simulate

        window = SystemParams(params.N, params.rates, "window", L)
        plan = ObservationPlan(np.array([tau]), snapshots=False, plain=d)
        obs = simulate("product", window, plan, seed=seed, replicas=replicas, threads=threads)
        avg = obs.rterm("plain")[:, 0] / tau
        sq = avg**2
        return KVResult(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(replicas)), replicas=replicas)
    raise ValueError(f"unknown mode {mode!r}")


# ----------------------------------------------------- canonical ensembles


def canonical_ensemble_Psi(a: LocalFunction, block: tuple[int, int], eta: SpinConfiguration) -> float:
    """Canonical expectation of ``a`` at the empirical density of ``eta`` on
    ``block = (first_site, length)``."""
    start, length = block
    if a.window_size > length:
        raise ValueError("local function window exceeds the block")
    sites = eta.spins[start : start + length]
    if sites.size != length or start < 1:
        raise IndexError("block outside the lattice")
    spec = CanonicalMeasureSpec(length, int(sites.sum()))
    return canonical_expectation(a, spec)


def _psi_table(a: LocalFunction, b: int) -> np.ndarray:
    """Canonical expectation of ``a`` on a ``b``-block for each plus-count."""
    out = np.zeros(b + 1)
    for p in range(b + 1):
        out[p] = canonical_expectation(a, CanonicalMeasureSpec(b, 2 * p - b))
    return out


def _hyperplane(n: int, p: int) -> np.ndarray:
    confs = []
    for plus in itertools.combinations(range(n), p):
        row = -np.ones(n, dtype=np.int8)
        row[list(plus)] = 1
        confs.append(row)
    return np.array(confs)


@dataclass
class OneBlockRow:
    ell: int
    block: int
    sites: int
    gap: float
    worst_plus_count: int
    exact: bool


def one_block_gap(
    a: LocalFunction,
    ells,
    block: int | None = None,
    samples: int = 20000,
    seed: int = 0,
) -> list[OneBlockRow]:
    """``sup_sigma E^{sigma, L_x} | ell^{-1} sum_{w=1..ell} (a_{x+w} - Psi_{x+w}) |``.

    ``Psi_y`` conditions on the empirical density of ``block`` sites starting
    at ``y``, so ``L_x`` spans ``ell + block - 1`` sites.  Exact enumeration of
    every hyperplane up to 12 sites; uniform sampling on the hyperplane above.
    """
    if a.anchor != "bulk":
        raise ValueError("one-block statistics use bulk local functions")
    if abs(product_expectation(a, 0.0)) > 1e-12:
        raise ValueError("local function must have mean zero under the uniform measure")
    m = a.window_size
    b = block if block is not None else max(2 * m, 4)
    if b < m:
        raise ValueError("block must contain the window")
    psi = _psi_table(a, b)
    rng = np.random.default_rng(seed)
    rows = []
    for ell in ells:
        n = ell + b - 1
        exact = n <= MAX_SITES
        best, arg = -1.0, 0
        for p in range(n + 1):
            if exact:
                confs = _hyperplane(n, p)
            else:
                base = np.array([1] * p + [-1] * (n - p), dtype=np.int8)
                confs = np.array([rng.permutation(base) for _ in range(samples)])
            plus = (confs == 1).astype(np.int64)
            total = np.zeros(confs.shape[0])
            weights = 1 << np.arange(m)
            for w in range(ell):
                idx = plus[:, w : w + m] @ weights
                cnt = plus[:, w : w + b].sum(axis=1)
                total += a.values[idx] - psi[cnt]
            val = float(np.abs(total / ell).mean())
            if val > best:
                best, arg = val, p
        rows.append(OneBlockRow(int(ell), b, n, best, arg, exact))
    return rows


def psi_lipschitz_constant(a: LocalFunction, blocks=range(4, 13)) -> float:
    """Smallest ``C`` with ``|Psi| <= |E^sigma a| + C / |block|`` over all
    admissible densities and the given block sizes."""
    C = 0.0
    for b in blocks:
        if b < a.window_size:
            continue
        psi = _psi_table(a, b)
        for p in range(b + 1):
            sigma = (2 * p - b) / b
            excess = abs(psi[p]) - abs(product_expectation(a, sigma))
            C = max(C, excess * b)
    return C
