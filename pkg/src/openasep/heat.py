"""Discrete Robin Laplacians, their heat kernels, kernel-bound verification,
the mean-profile predictor and an exponential-Euler open SHE integrator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

DENSE_LIMIT = 512


@dataclass(frozen=True)
class RobinLaplacian:
    """Second difference on sites ``0..size`` with Robin rows at the ends.

    Row 0 is ``phi[1] - phi[0] + (A/N) phi[0]``.  On the interval row ``N``
    is ``phi[N-1] - phi[N] - (B/N) phi[N]``.  With ``B is None`` (half-space)
    the lattice runs to ``L`` and the far row is reflecting.
    """

    N: int
    A: float
    B: float | None = None
    L: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.B is None and self.L is None:
            raise ValueError("half-space Laplacian needs a truncation length")
        if self.B is not None and self.L not in (None, self.N):
            raise ValueError("interval Laplacian lives on 0..N")

    @property
    def size(self) -> int:
        """Index of the last site."""
        return self.N if self.B is not None else int(self.L)

    @property
    def half_space(self) -> bool:
        return self.B is None

    def apply(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        n = self.size
        if phi.shape[0] != n + 1:
            raise ValueError(f"expected {n + 1} entries, got {phi.shape[0]}")
        out = np.empty_like(phi)
        out[1:n] = phi[2:] + phi[:-2] - 2 * phi[1:n]
        out[0] = phi[1] - phi[0] + self.A / self.N * phi[0]
        far = -self.B / self.N if self.B is not None else 0.0
        out[n] = phi[n - 1] - phi[n] + far * phi[n]
        return out

    @cached_property
    def sparse(self) -> scipy.sparse.csr_matrix:
        n = self.size + 1
        main = np.full(n, -2.0)
        main[0] = -1 + self.A / self.N
        main[-1] = -1 - (self.B / self.N if self.B is not None else 0.0)
        off = np.ones(n - 1)
        return scipy.sparse.diags([off, main, off], [-1, 0, 1], format="csr")

    def matrix(self) -> np.ndarray:
        return self.sparse.toarray()

    def generator(self) -> np.ndarray:
        """``(N^2/2) * Laplacian``: the heat-flow generator in macroscopic time."""
        return self.N * self.N / 2 * self.matrix()


def apply_robin_laplacian(phi, lap: RobinLaplacian) -> np.ndarray:
    return lap.apply(phi)


@dataclass(frozen=True)
class RobinHeatKernel:
    elapsed: float
    matrix: np.ndarray
    lap: RobinLaplacian

    def __matmul__(self, other):
        return self.matrix @ (other.matrix if isinstance(other, RobinHeatKernel) else other)

    def to_csv(self, path) -> None:
        """Rows ``x, y, value`` under a header comment with N, A, B and elapsed."""
        lap = self.lap
        with open(path, "w", newline="") as fh:
            fh.write(f"# N={lap.N} A={lap.A!r} B={lap.B!r} L={lap.size} elapsed={self.elapsed!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "value"])
            n = self.matrix.shape[0]
            for x in range(n):
                for y in range(n):
                    w.writerow([x, y, repr(float(self.matrix[x, y]))])


def heat_kernel(elapsed: float, lap: RobinLaplacian) -> RobinHeatKernel:
    """``expm(elapsed * (N^2/2) * Laplacian)`` by scaling and squaring."""
    if elapsed < 0:
        raise ValueError("elapsed time must be non-negative")
    n = lap.size + 1
    if elapsed == 0:
        return RobinHeatKernel(0.0, np.eye(n), lap)
    if n <= DENSE_LIMIT + 1:
        mat = scipy.linalg.expm(elapsed * lap.generator())
    else:
        gen = (lap.N * lap.N / 2) * lap.sparse.tocsc()
        mat = scipy.sparse.linalg.expm_multiply(elapsed * gen, np.eye(n))
    # clip roundoff below zero; exact kernels are entrywise non-negative
    np.maximum(mat, 0.0, out=mat)
    return RobinHeatKernel(float(elapsed), mat, lap)


def evolve_mean_profile(Z0, elapsed: float, lap: RobinLaplacian) -> np.ndarray:
    Z0 = np.asarray(Z0, dtype=np.float64)
    if Z0.shape[0] != lap.size + 1:
        raise ValueError("profile length does not match the Laplacian")
    if elapsed == 0:
        return Z0.copy()
    gen = (lap.N * lap.N / 2) * lap.sparse.tocsc()
    return scipy.sparse.linalg.expm_multiply(elapsed * gen, Z0)


# -------------------------------------------------------------- SHE

@dataclass
class SheSolution:
    x: np.ndarray
    dt: float
    times: np.ndarray
    Z: np.ndarray


def integrate_she(
    Z0,
    lap: RobinLaplacian,
    dt: float,
    steps: int,
    rng: np.random.Generator,
    noise: bool = True,
    explicit: bool = False,
    record_every: int = 1,
) -> SheSolution:
    """Multiplicative-noise heat equation on ``M = lap.N`` cells.

    Default scheme: ``Z <- H(dt) Z - Z * dW`` with ``dW`` i.i.d. normal of
    variance ``dt * M`` per cell.  ``explicit`` swaps the semigroup step for
    forward Euler and enforces its stability limit.
    """
    M = lap.N
    Z = np.array(Z0, dtype=np.float64)
    if Z.shape[0] != lap.size + 1:
        raise ValueError("initial profile length does not match the Laplacian")
    if explicit:
        if dt * M * M * 2 >= 1:
            raise ValueError("explicit step violates dt * N^2 * 2 < 1")
        gen = lap.N * lap.N / 2 * lap.sparse
        advance = lambda z: z + dt * (gen @ z)
    else:
        H = heat_kernel(dt, lap).matrix
        advance = lambda z: H @ z
    sd = math.sqrt(dt * M)
    times, path = [0.0], [Z.copy()]
    for k in range(1, steps + 1):
        Zn = advance(Z)
        if noise:
            Zn -= Z * rng.normal(0.0, sd, size=Z.shape)
        Z = Zn
        if k % record_every == 0 or k == steps:
            times.append(k * dt)
            path.append(Z.copy())
    return SheSolution(np.arange(lap.size + 1) / M, dt, np.array(times), np.array(path))


# -------------------------------------------------- kernel bound verification

def _slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass
class KernelBoundReport:
    """Fitted exponents of the three kernel envelopes.

    Each bound ``|quantity| <= C N^a t^b g^c`` is tested by dividing out the
    claimed powers of all variables but one, taking the sup over the others,
    and regressing log-sup on the remaining variable.
    """

    N_grid: list[int]
    t_grid: list[float]
    sup_exponents: tuple[float, float]
    spatial_exponents: tuple[float, float, float]
    time_exponents: tuple[float, float, float]
    sup_constant: float
    spatial_constant: float
    time_constant: float

    TARGET_SUP = (-1.0, -0.5)
    TARGET_SPATIAL = (-1.5, -0.75, 0.5)
    TARGET_TIME = (-1.0, -0.75, 0.25)

    def checks(self, sup_tol: float = 0.1, inc_tol: float = 0.15) -> dict[str, bool]:
        def within(got, want, tol):
            return all(abs(g - w) <= tol for g, w in zip(got, want))

        return {
            "sup": within(self.sup_exponents, self.TARGET_SUP, sup_tol),
            "spatial": within(self.spatial_exponents, self.TARGET_SPATIAL, inc_tol),
            # the time-increment pair is (elapsed, increment); N enters as the sup bound
            "time": within(self.time_exponents[1:], self.TARGET_TIME[1:], inc_tol),
        }

    def to_dict(self) -> dict:
        return {
            "N_grid": self.N_grid,
            "t_grid": self.t_grid,
            "sup_exponents": list(self.sup_exponents),
            "spatial_exponents": list(self.spatial_exponents),
            "time_exponents": list(self.time_exponents),
            "sup_constant": self.sup_constant,
            "spatial_constant": self.spatial_constant,
            "time_constant": self.time_constant,
            "checks": self.checks(),
        }


def verify_kernel_bounds(
    N_grid=(32, 64, 128, 256),
    A: float = 0.0,
    B: float = 0.0,
    t_grid=None,
    gaps=None,
    increments=None,
) -> KernelBoundReport:
    N_grid = [int(n) for n in N_grid]
    if len(N_grid) < 4 or len(set(N_grid)) != len(N_grid):
        raise ValueError("need at least four distinct N values")
    ts = np.asarray(t_grid if t_grid is not None else np.geomspace(0.004, 0.04, 10), dtype=float)
    if ts.size < 3 or np.any(ts <= 0):
        raise ValueError("need at least three positive times")
    gaps = np.asarray(gaps if gaps is not None else np.unique(np.geomspace(2, 64, 9).astype(int)))
    # gaps beyond every N/2 carry no data
    gaps = gaps[gaps <= max(N_grid) // 2]
    if gaps.size < 3:
        raise ValueError("need at least three spatial gaps within N/2")
    ds = np.asarray(increments if increments is not None else np.geomspace(0.032, 0.32, 8), dtype=float)
    Ns = np.array(N_grid, dtype=float)

    sup = np.zeros((Ns.size, ts.size))
    grad = np.full((Ns.size, ts.size, gaps.size), np.nan)
    tinc = np.zeros((Ns.size, ts.size, ds.size))
    for i, N in enumerate(N_grid):
        lap = RobinLaplacian(N, A, B)
        gen = lap.generator()
        H = [scipy.linalg.expm(t * gen) for t in ts]
        shifts = [scipy.linalg.expm(d * gen) - np.eye(N + 1) for d in ds]
        for j, h in enumerate(H):
            sup[i, j] = h.max()
            for k, g in enumerate(gaps):
                if g <= N // 2:
                    grad[i, j, k] = np.abs(h[g:, :] - h[:-g, :]).max()
            for k, E in enumerate(shifts):
                tinc[i, j, k] = np.abs(E @ h).max()

    Nn, tt, gg, dd = Ns[:, None, None], ts[None, :, None], gaps[None, None, :], ds[None, None, :]
    sup_exp = (
        _slope(Ns, (sup * np.sqrt(ts)[None, :]).max(1)),
        _slope(ts, (sup * Ns[:, None]).max(0)),
    )
    grad_exp = (
        _slope(Ns, np.nanmax(grad * tt**0.75 / gg**0.5, (1, 2))),
        _slope(ts, np.nanmax(grad * Nn**1.5 / gg**0.5, (0, 2))),
        _slope(gaps, np.nanmax(grad * Nn**1.5 * tt**0.75, (0, 1))),
    )
    time_exp = (
        _slope(Ns, (tinc * tt**0.75 / dd**0.25).max((1, 2))),
        _slope(ts, (tinc * Nn / dd**0.25).max((0, 2))),
        _slope(ds, (tinc * Nn * tt**0.75).max((0, 1))),
    )
    return KernelBoundReport(
        N_grid,
        ts.tolist(),
        sup_exp,
        grad_exp,
        time_exp,
        float((sup * Ns[:, None] * np.sqrt(ts)[None, :]).max()),
        float(np.nanmax(grad * Nn**1.5 * tt**0.75 / gg**0.5)),
        float((tinc * Nn * tt**0.75 / dd**0.25).max()),
    )
