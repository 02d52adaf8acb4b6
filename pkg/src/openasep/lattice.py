"""Spin configurations, local functions, reference measures and the
boundary-parameter calculus for open ASEP.

Spins live on sites ``1..L`` and are stored 1-indexed in an ``int8`` array of
length ``L + 1`` whose slot 0 is unused.  Local functions are dense tables over
the ``2**m`` configurations of an ``m``-site window; table index bit ``k`` is
set when the spin at window position ``k + 1`` equals ``+1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

MAX_WINDOW = 8

Anchor = Literal["left", "right", "bulk"]


class RateError(ValueError):
    """A boundary rate N^2/4 + N^{3/2} v would be negative."""


class DegenerateConditioning(ValueError):
    """The fixed-density hyperplane is empty."""


@dataclass(frozen=True)
class SpinConfiguration:
    """Spins on sites ``1..L``; ``spins[0]`` is padding."""

    spins: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.spins, dtype=np.int8)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("need at least one site")
        if not np.all(np.abs(s[1:]) == 1):
            raise ValueError("spins must be exactly -1 or +1")
        s = s.copy()
        s[0] = 0
        s.setflags(write=False)
        object.__setattr__(self, "spins", s)

    @classmethod
    def from_sites(cls, values) -> "SpinConfiguration":
        """Build from a plain sequence of the spins at sites 1..L."""
        v = np.asarray(values, dtype=np.int8)
        return cls(np.concatenate([[0], v]).astype(np.int8))

    @property
    def size(self) -> int:
        return self.spins.size - 1

    @property
    def sites(self) -> range:
        return range(1, self.size + 1)

    def __getitem__(self, x: int) -> int:
        if not 1 <= x <= self.size:
            raise IndexError(f"site {x} outside 1..{self.size}")
        return int(self.spins[x])


def flat_configuration(size: int) -> SpinConfiguration:
    """Alternating ``+,-,+,-,...``: the height profile stays within one step of flat."""
    s = np.where(np.arange(1, size + 1) % 2 == 1, 1, -1)
    return SpinConfiguration.from_sites(s)


@dataclass(frozen=True)
class LocalFunction:
    """Dense table of a function of the spins in an ``m``-site window.

    ``anchor="left"`` puts the window on sites ``1..m``, ``"right"`` on
    ``L-m+1..L`` and ``"bulk"`` on ``x..x+m-1`` for an evaluation site ``x``.
    """

    values: np.ndarray
    anchor: Anchor = "left"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).copy()
        m = int(round(math.log2(v.size))) if v.size else -1
        if v.ndim != 1 or m < 0 or (1 << m) != v.size:
            raise ValueError("table length must be a power of two")
        if m > MAX_WINDOW:
            raise ValueError(f"window size {m} exceeds {MAX_WINDOW}")
        if self.anchor not in ("left", "right", "bulk"):
            raise ValueError(f"unknown anchor {self.anchor!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def window_size(self) -> int:
        return self.values.size.bit_length() - 1

    @property
    def bound(self) -> float:
        return float(np.max(np.abs(self.values)))

    @classmethod
    def constant(cls, c: float, m: int = 1, anchor: Anchor = "left") -> "LocalFunction":
        return cls(np.full(1 << m, float(c)), anchor)

    @classmethod
    def from_callable(cls, fn, m: int, anchor: Anchor = "left") -> "LocalFunction":
        """Tabulate ``fn(window_spins)`` where ``window_spins`` is a tuple of +-1."""
        return cls(np.array([fn(window_spins(i, m)) for i in range(1 << m)]), anchor)

    def window(self, size: int, at: int | None = None) -> np.ndarray:
        """Sites covered by the window on a lattice ``1..size``."""
        m = self.window_size
        if self.anchor == "left":
            start = 1
        elif self.anchor == "right":
            start = size - m + 1
        else:
            if at is None:
                raise ValueError("bulk local functions need an evaluation site")
            start = at
        sites = np.arange(start, start + m)
        if m and (sites[0] < 1 or sites[-1] > size):
            raise IndexError(f"window {sites[0]}..{sites[-1]} outside 1..{size}")
        return sites

    def to_json(self) -> str:
        return json.dumps(
            {"window_size": self.window_size, "anchor": self.anchor, "values": self.values.tolist()}
        )

    @classmethod
    def from_json(cls, text: str | dict) -> "LocalFunction":
        d = json.loads(text) if isinstance(text, str) else text
        f = cls(np.asarray(d["values"], dtype=np.float64), d.get("anchor", "left"))
        if f.window_size != int(d["window_size"]):
            raise ValueError("window_size does not match the number of values")
        return f


def window_spins(index: int, m: int) -> tuple[int, ...]:
    return tuple(1 if (index >> k) & 1 else -1 for k in range(m))


def window_index(spins) -> int:
    return sum(1 << k for k, s in enumerate(spins) if s == 1)


def spin_table(m: int) -> np.ndarray:
    """``(2**m, m)`` array of the window spins for every table index."""
    idx = np.arange(1 << m)[:, None]
    return np.where((idx >> np.arange(m)[None, :]) & 1, 1, -1).astype(np.int8)


def eval_local_function(f: LocalFunction, eta: SpinConfiguration, at: int | None = None) -> float:
    sites = f.window(eta.size, at)
    return float(f.values[window_index(eta.spins[sites])])


def product_expectation(f: LocalFunction, sigma: float) -> float:
    """Exact mean of ``f`` under i.i.d. spins with mean ``sigma``."""
    if not -1.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [-1, 1]")
    m = f.window_size
    plus = spin_table(m) == 1
    w = np.where(plus, (1 + sigma) / 2, (1 - sigma) / 2).prod(axis=1)
    return float(w @ f.values)


@dataclass(frozen=True)
class ProductMeasureSpec:
    sigma: float
    size: int

    def __post_init__(self):
        if not -1.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [-1, 1]")


def sample_product(spec: ProductMeasureSpec, rng: np.random.Generator) -> SpinConfiguration:
    p = (1 + spec.sigma) / 2
    s = np.where(rng.random(spec.size) < p, 1, -1)
    return SpinConfiguration.from_sites(s)


@dataclass(frozen=True)
class CanonicalMeasureSpec:
    """Uniform law on block configurations with a fixed spin sum.

    The density is stored as the integer ``spin_sum`` so that parity is exact.
    """

    size: int
    spin_sum: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("block must contain a site")
        if abs(self.spin_sum) > self.size or (self.spin_sum + self.size) % 2:
            raise DegenerateConditioning(
                f"no configuration of {self.size} spins sums to {self.spin_sum}"
            )

    @property
    def sigma(self) -> float:
        return self.spin_sum / self.size

    @property
    def plus_count(self) -> int:
        return (self.spin_sum + self.size) // 2

    @classmethod
    def from_sigma(cls, sigma: float, size: int) -> "CanonicalMeasureSpec":
        s = sigma * size
        k = round(s)
        if abs(s - k) > 1e-9:
            raise DegenerateConditioning(f"sigma*size = {s} is not an integer")
        return cls(size, int(k))


def canonical_expectation(f: LocalFunction, spec: CanonicalMeasureSpec) -> float:
    """Exact mean of ``f`` under the canonical measure on a block.

    By exchangeability only the window's plus-count matters, so the window
    marginal is hypergeometric and no enumeration of the block is needed.
    """
    m = f.window_size
    if m > spec.size:
        raise ValueError("window does not fit in the block")
    n, p = spec.size, spec.plus_count
    k = (spin_table(m) == 1).sum(axis=1)
    w = np.array([_comb(n - m, p - j) for j in k], dtype=np.float64) / math.comb(n, p)
    return float(w @ f.values)


def _comb(n: int, k: int) -> int:
    return math.comb(n, k) if 0 <= k <= n else 0


@dataclass(frozen=True)
class BoundaryRates:
    """Reservoir rate functions: creation/removal at site 1 (alpha/gamma)
    and at site L (delta/beta).  The left pair is anchored at site 1 and the
    right pair at the last site."""

    alpha: LocalFunction
    gamma: LocalFunction
    delta: LocalFunction
    beta: LocalFunction

    def __post_init__(self):
        for name in ("alpha", "gamma"):
            if getattr(self, name).anchor != "left":
                raise ValueError(f"{name} must be left-anchored")
        for name in ("delta", "beta"):
            if getattr(self, name).anchor != "right":
                raise ValueError(f"{name} must be right-anchored")
        ms = {f.window_size for f in (self.alpha, self.gamma, self.delta, self.beta)}
        if len(ms) != 1:
            raise ValueError("all four rate functions must share one window size")

    @property
    def m(self) -> int:
        return self.alpha.window_size

    @classmethod
    def constant(cls, alpha=0.0, gamma=0.0, delta=0.0, beta=0.0, m: int = 1) -> "BoundaryRates":
        return cls(
            LocalFunction.constant(alpha, m, "left"),
            LocalFunction.constant(gamma, m, "left"),
            LocalFunction.constant(delta, m, "right"),
            LocalFunction.constant(beta, m, "right"),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, m: int = 2, scale: float = 0.5) -> "BoundaryRates":
        """Uniform tables on ``[-scale, scale]``; handy for property tests."""
        t = [rng.uniform(-scale, scale, 1 << m) for _ in range(4)]
        return cls(
            LocalFunction(t[0], "left"),
            LocalFunction(t[1], "left"),
            LocalFunction(t[2], "right"),
            LocalFunction(t[3], "right"),
        )

    def min_value(self) -> float:
        return float(min(f.values.min() for f in (self.alpha, self.gamma, self.delta, self.beta)))

    def check_positive(self, N: int) -> None:
        v = self.min_value()
        if N * N / 4 + N**1.5 * v < 0:
            raise RateError(f"N={N}: boundary rate N^2/4 + N^1.5*({v}) is negative")

    def to_dict(self) -> dict:
        return {k: json.loads(getattr(self, k).to_json()) for k in ("alpha", "gamma", "delta", "beta")}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryRates":
        return cls(*(LocalFunction.from_json(d[k]) for k in ("alpha", "gamma", "delta", "beta")))


def compute_boundary_param_A(alpha: LocalFunction, gamma: LocalFunction) -> float:
    """Left Robin parameter: the unique A with zero mean left drift coefficient
    under the fair product measure."""
    m = max(alpha.window_size, gamma.window_size, 1)
    s = spin_table(m)
    a = _broadcast(alpha, m)
    g = _broadcast(gamma, m)
    eta1 = s[:, 0]
    return 1.5 + 2 * np.mean(a - g) - 2 * np.mean(eta1 * (a + g))


def compute_boundary_param_B(delta: LocalFunction, beta: LocalFunction) -> float:
    """Right Robin parameter, normalising the site-L drift coefficient to mean zero."""
    m = max(delta.window_size, beta.window_size, 1)
    s = spin_table(m)
    d = _broadcast(delta, m, right=True)
    b = _broadcast(beta, m, right=True)
    etaN = s[:, m - 1]
    return -1.5 + 2 * np.mean(d - b) - 2 * np.mean(etaN * (d + b))


def _broadcast(f: LocalFunction, m: int, right: bool = False) -> np.ndarray:
    """Values of ``f`` on every configuration of a larger ``m``-site window
    sharing its anchor end."""
    k = f.window_size
    idx = np.arange(1 << m)
    sub = (idx >> (m - k)) if right else (idx & ((1 << k) - 1))
    return f.values[sub]


@dataclass(frozen=True)
class SystemParams:
    """Scaling parameter, geometry and reservoir rates of one open ASEP.

    ``size`` is N on the interval and the truncation length on the half-space.
    The ``window`` geometry is a short chain with the left reservoir and a
    closed right end, used for localized processes; its length is free.
    Robin parameters default to the mean-zero normalisers of the rate tables.
    """

    N: int
    rates: BoundaryRates = field(default_factory=BoundaryRates.constant)
    geometry: Literal["interval", "half-space", "window"] = "interval"
    L_trunc: int | None = None
    A_override: float | None = None
    B_override: float | None = None

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need sqrt(N) > 1 for positive bulk rates")
        if self.geometry not in ("interval", "half-space", "window"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.geometry == "half-space":
            if self.L_trunc is None or self.L_trunc < 4 * self.N:
                raise ValueError("half-space truncation must be at least 4N sites")
        if self.geometry == "window" and (self.L_trunc is None or self.L_trunc < 1):
            raise ValueError("window geometry needs a positive length")
        self.rates.check_positive(self.N)
        if self.rates.m > self.size:
            raise ValueError("rate window longer than the lattice")

    @property
    def size(self) -> int:
        return self.N if self.geometry == "interval" else int(self.L_trunc)

    @property
    def has_right_reservoir(self) -> bool:
        return self.geometry == "interval"

    @cached_property
    def A(self) -> float:
        if self.A_override is not None:
            return float(self.A_override)
        return compute_boundary_param_A(self.rates.alpha, self.rates.gamma)

    @cached_property
    def B(self) -> float:
        if self.B_override is not None:
            return float(self.B_override)
        return compute_boundary_param_B(self.rates.delta, self.rates.beta)

    @property
    def nu(self) -> float:
        return self.N / 2 - 1 / 24

    @property
    def swap_right_rate(self) -> float:
        """Rate of ``(+,-) -> (-,+)`` across a bond."""
        return (self.N**2 - self.N**1.5) / 2

    @property
    def swap_left_rate(self) -> float:
        return (self.N**2 + self.N**1.5) / 2

    def flip_rate(self, fn_value: float) -> float:
        return self.N**2 / 4 + self.N**1.5 * fn_value


def _left_values(params: SystemParams, eta: SpinConfiguration):
    r = params.rates
    return eval_local_function(r.alpha, eta), eval_local_function(r.gamma, eta)


def _right_values(params: SystemParams, eta: SpinConfiguration):
    r = params.rates
    return eval_local_function(r.delta, eta), eval_local_function(r.beta, eta)


def boundary_drift_left(eta: SpinConfiguration, params: SystemParams) -> tuple[float, float]:
    """Order-N drift coefficient ``f_left`` of Z at site 0 and the bounded remainder ``b_left``."""
    N, A = params.N, params.A
    a, g = _left_values(params, eta)
    s = eta[1]
    f = 0.75 + a - g - s * (a + g) - A / 2
    u = N**-0.5
    if s == -1:
        exact = params.flip_rate(a) * math.expm1(2 * u)
    else:
        exact = params.flip_rate(g) * math.expm1(-2 * u)
    exact += params.nu
    laplacian = N * N / 2 * math.expm1(-s * u) + N * A / 2
    return f, u * (exact - laplacian - N * f)


def boundary_drift_right(eta: SpinConfiguration, params: SystemParams) -> tuple[float, float]:
    """Mirror of :func:`boundary_drift_left` at the last site."""
    if not params.has_right_reservoir:
        raise ValueError("half-space geometry has no right reservoir")
    N, B = params.N, params.B
    d, b = _right_values(params, eta)
    s = eta[eta.size]
    f = 0.75 - d + b + s * (d + b) + B / 2
    u = N**-0.5
    # a creation at the last site raises the last height by 2/sqrt(N)
    if s == -1:
        exact = params.flip_rate(d) * math.expm1(-2 * u)
    else:
        exact = params.flip_rate(b) * math.expm1(2 * u)
    exact += params.nu
    laplacian = N * N / 2 * math.expm1(s * u) - N * B / 2
    return f, u * (exact - laplacian - N * f)
