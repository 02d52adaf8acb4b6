"""Binary indexed (Fenwick) tree over non-negative float weights, compiled with numba.

Slots are 1-indexed; ``tree`` has length ``n + 1``.  ``find`` returns the
smallest slot whose prefix sum exceeds ``u``, so zero-weight slots are never
selected.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, _nrt=False)
def fen_build(weights, tree):
    n = tree.size - 1
    for i in range(n + 1):
        tree[i] = 0.0
    for i in range(1, n + 1):
        tree[i] += weights[i]
        j = i + (i & -i)
        if j <= n:
            tree[j] += tree[i]


@njit(cache=True, nogil=True, _nrt=False)
def fen_add(tree, i, delta):
    n = tree.size - 1
    while i <= n:
        tree[i] += delta
        i += i & -i


@njit(cache=True, nogil=True, inline="always")
def fen_prefix(tree, i):
    s = 0.0
    while i > 0:
        s += tree[i]
        i -= i & -i
    return s


@njit(cache=True, nogil=True, inline="always")
def fen_top_bit(n):
    b = 1
    while b * 2 <= n:
        b *= 2
    return b


@njit(cache=True, nogil=True, _nrt=False)
def fen_find(tree, u, top):
    """Smallest ``i`` with ``prefix(i) > u``; returns ``n + 1`` if none."""
    n = tree.size - 1
    pos = 0
    step = top
    while step > 0:
        nxt = pos + step
        if nxt <= n:
            v = tree[nxt]
            # arithmetic select keeps the descent free of data-dependent branches
            take = v <= u
            pos += step * take
            u -= v * take
        step >>= 1
    return pos + 1


class FenwickTree:
    """Thin Python wrapper, mostly for tests and interactive use."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        self.weights = np.concatenate([[0.0], w])
        self.tree = np.zeros(w.size + 1)
        fen_build(self.weights, self.tree)
        self._top = fen_top_bit(max(w.size, 1))

    def __len__(self):
        return self.weights.size - 1

    def total(self) -> float:
        return fen_prefix(self.tree, len(self))

    def prefix(self, i: int) -> float:
        return fen_prefix(self.tree, i)

    def set(self, i: int, value: float) -> None:
        fen_add(self.tree, i, value - self.weights[i])
        self.weights[i] = value

    def find(self, u: float) -> int:
        return fen_find(self.tree, u, self._top)
