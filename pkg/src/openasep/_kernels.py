"""Compiled inner loops of the event-driven simulator.

Slot layout for a lattice of ``L`` sites: slots ``1..L-1`` are the bonds
``(x, x+1)``, slot ``L`` is the reservoir at site 1 and slot ``L+1`` the
reservoir at site ``L`` (rate 0 on the half-space).

Heights are kept as integers ``K[x] = 2*(removals - creations) + sum_{y<=x} eta_y``
so that ``h[x] = K[x] / sqrt(N)`` and every event changes exactly one ``K``
entry by 2.
"""

import math

import numpy as np
from numba import njit

from .fenwick import fen_add, fen_build, fen_find, fen_prefix, fen_top_bit

# event kinds
RIGHT_SWAP, LEFT_SWAP, CREATE_LEFT, REMOVE_LEFT, CREATE_RIGHT, REMOVE_RIGHT = range(6)

# observation flags
OBS_SNAPSHOT = 1
OBS_MARTINGALE = 2
OBS_RTERMS = 4
OBS_LEDGER = 8
OBS_EVENTLOG = 16

# fparams layout
F_RR, F_RL, F_FBASE, F_FSCALE, F_NU, F_U, F_PHI0, F_PHI1 = range(8)
# bulk remainder per (eta_x, eta_{x+1}) pattern index 2*[eta_x=+1] + [eta_{x+1}=+1]
F_RBULK = 8
N_FPARAMS = 12

# rows of the weight matrix
W_PAIR, W_R0, W_R5, W_STOCH, W_HEAT = range(5)
N_WEIGHTS = 5

# rterm output columns
R_COLS = ("R0", "R1", "R2", "R3", "R4", "R5", "stochII", "plain", "Rbulk", "heat", "Z0int", "ZLint")
N_RCOLS = 12
N_CONTRIB = 7


@njit(cache=True, nogil=True, inline="always")
def left_index(eta, m):
    idx = 0
    for k in range(m):
        if eta[1 + k] == 1:
            idx |= 1 << k
    return idx


@njit(cache=True, nogil=True, inline="always")
def right_index(eta, L, m):
    idx = 0
    start = L - m + 1
    for k in range(m):
        if eta[start + k] == 1:
            idx |= 1 << k
    return idx


@njit(cache=True, nogil=True, inline="always")
def bulk_index(eta, x, m):
    idx = 0
    for k in range(m):
        if eta[x + k] == 1:
            idx |= 1 << k
    return idx


@njit(cache=True, nogil=True, inline="always")
def slot_rate(eta, L, slot, has_right, m, tabs, fp):
    if slot < L:
        a = eta[slot]
        b = eta[slot + 1]
        if a == 1 and b == -1:
            return fp[F_RR]
        if a == -1 and b == 1:
            return fp[F_RL]
        return 0.0
    if slot == L:
        idx = left_index(eta, m)
        v = tabs[0, idx] if eta[1] == -1 else tabs[1, idx]
        return fp[F_FBASE] + fp[F_FSCALE] * v
    if has_right:
        idx = right_index(eta, L, m)
        v = tabs[2, idx] if eta[L] == -1 else tabs[3, idx]
        return fp[F_FBASE] + fp[F_FSCALE] * v
    return 0.0


@njit(cache=True, nogil=True, _nrt=False)
def build_rates(eta, L, has_right, m, tabs, fp, rates, tree):
    rates[0] = 0.0
    for s in range(1, L + 2):
        rates[s] = slot_rate(eta, L, s, has_right, m, tabs, fp)
    fen_build(rates, tree)


@njit(cache=True, nogil=True, _nrt=False)
def apply_event(eta, K, L, slot):
    """Flip or swap the spins of ``slot``; return ``(site, kind)``."""
    if slot < L:
        x = slot
        if eta[x] == 1:
            K[x] -= 2
            kind = RIGHT_SWAP
        else:
            K[x] += 2
            kind = LEFT_SWAP
        tmp = eta[x]
        eta[x] = eta[x + 1]
        eta[x + 1] = tmp
        return x, kind
    if slot == L:
        if eta[1] == -1:
            eta[1] = 1
            K[0] -= 2
            return 1, CREATE_LEFT
        eta[1] = -1
        K[0] += 2
        return 1, REMOVE_LEFT
    if eta[L] == -1:
        eta[L] = 1
        K[L] += 2
        return L, CREATE_RIGHT
    eta[L] = -1
    K[L] -= 2
    return L, REMOVE_RIGHT


@njit(cache=True, nogil=True, inline="always")
def changed_height(L, slot):
    """Index of the one ``K`` entry an event in ``slot`` changes."""
    if slot < L:
        return slot
    if slot == L:
        return 0
    return L


@njit(cache=True, nogil=True, _nrt=False)
def _refresh(eta, L, s, has_right, m, tabs, fp, rates, tree):
    new = slot_rate(eta, L, s, has_right, m, tabs, fp)
    if new != rates[s]:
        fen_add(tree, s, new - rates[s])
        rates[s] = new


@njit(cache=True, nogil=True, inline="always")
def changed_sites(L, slot):
    """First and last spin changed by an event in ``slot``."""
    if slot < L:
        return slot, slot + 1
    if slot == L:
        return 1, 1
    return L, L


@njit(cache=True, nogil=True, _nrt=False)
def refresh_slots(eta, L, slot, has_right, m, tabs, fp, rates, tree):
    """Recompute the rates that can depend on the spins ``slot`` changed."""
    a, b = changed_sites(L, slot)
    for s in range(max(1, a - 1), min(L - 1, b) + 1):
        _refresh(eta, L, s, has_right, m, tabs, fp, rates, tree)
    if a <= m:
        _refresh(eta, L, L, has_right, m, tabs, fp, rates, tree)
    if has_right and b >= L - m + 1:
        _refresh(eta, L, L + 1, has_right, m, tabs, fp, rates, tree)


@njit(cache=True, nogil=True, _nrt=False)
def choose_slot(tree, rates, top, nslots, unif):
    total = fen_prefix(tree, nslots)
    slot = fen_find(tree, unif * total, top)
    if slot > nslots or rates[slot] <= 0.0:
        # rounding in the tree: rebuild once and walk again
        fen_build(rates, tree)
        total = fen_prefix(tree, nslots)
        slot = fen_find(tree, unif * total, top)
        while slot > nslots or rates[slot] <= 0.0:
            slot = fen_find(tree, np.random.random() * total, top)
    return slot


@njit(cache=True, nogil=True, inline="always")
def site_coeffs(eta, L, x, has_right, m, tabs, fp, e2p, e2m):
    """Per-unit-Z drift and per-unit-Z^2 bracket density of ``Z[x]``.

    The drift is the exact jump compensator plus the renormalisation nu;
    the bracket is the sum of rate * (jump factor - 1)^2.
    """
    nu = fp[F_NU]
    if x == 0:
        idx = left_index(eta, m)
        if eta[1] == -1:
            lam = fp[F_FBASE] + fp[F_FSCALE] * tabs[0, idx]
            g = e2p
        else:
            lam = fp[F_FBASE] + fp[F_FSCALE] * tabs[1, idx]
            g = e2m
        return nu + lam * g, lam * g * g
    if x == L:
        if not has_right:
            return nu, 0.0
        idx = right_index(eta, L, m)
        if eta[L] == -1:
            lam = fp[F_FBASE] + fp[F_FSCALE] * tabs[2, idx]
            g = e2m
        else:
            lam = fp[F_FBASE] + fp[F_FSCALE] * tabs[3, idx]
            g = e2p
        return nu + lam * g, lam * g * g
    a = eta[x]
    b = eta[x + 1]
    if a == 1 and b == -1:
        return nu + fp[F_RR] * e2p, fp[F_RR] * e2p * e2p
    if a == -1 and b == 1:
        return nu + fp[F_RL] * e2m, fp[F_RL] * e2m * e2m
    return nu, 0.0


@njit(cache=True, nogil=True, _nrt=False)
def _contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C):
    c, q = site_coeffs(eta, L, x, has_right, m, tabs, fp, e2p, e2m)
    z = Zt[x]
    w = wts[W_PAIR, x]
    C[0, x] = w * z * c
    C[1, x] = w * w * z * z * q
    C[2, x] = wts[W_R0, x] * z
    C[6, x] = wts[W_HEAT, x] * z
    if 1 <= x <= L - 1:
        a = eta[x]
        b = eta[x + 1]
        C[3, x] = a * b * wts[W_R5, x] * z * z
        pat = (2 if a == 1 else 0) + (1 if b == 1 else 0)
        C[5, x] = w * z * fp[F_RBULK + pat]
    else:
        C[3, x] = 0.0
        C[5, x] = 0.0
    if 1 <= x and x + ma - 1 <= L:
        C[4, x] = at[bulk_index(eta, x, ma)] * wts[W_STOCH, x] * z * z
    else:
        C[4, x] = 0.0


@njit(cache=True, nogil=True, _nrt=False)
def _update_contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C, S):
    for k in range(N_CONTRIB):
        S[k] -= C[k, x]
    _contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C)
    for k in range(N_CONTRIB):
        S[k] += C[k, x]


@njit(cache=True, nogil=True, _nrt=False)
def _boundary_terms(eta, L, has_right, m, fb, gtab, fp, Zt, E):
    il = left_index(eta, m)
    u = fp[F_U]
    E[0] = fb[0, il] * Zt[0] * fp[F_PHI0]
    E[2] = u * fb[1, il] * Zt[0] * fp[F_PHI0]
    if has_right:
        ir = right_index(eta, L, m)
        E[1] = fb[2, ir] * Zt[L] * fp[F_PHI1]
        E[3] = u * fb[3, ir] * Zt[L] * fp[F_PHI1]
    else:
        E[1] = 0.0
        E[3] = 0.0
    E[4] = gtab[il]
    E[5] = Zt[0]
    E[6] = Zt[L]


@njit(cache=True, nogil=True)
def trajectory(
    eta, K, L, has_right, m, tabs, fp, grid, flags,
    wts, at, ma, fb, gtab,
    snap_eta, snap_K, mart, rterm, ledger, elog_t, elog_site, elog_kind, counts,
):
    """Run one replica from the state ``(eta, K)`` at time 0 through ``grid``.

    Outputs are written in place.  ``counts`` receives
    ``[events, log entries, log overflow]``.
    """
    nslots = L + 1
    rates = np.zeros(nslots + 1)
    tree = np.zeros(nslots + 1)
    build_rates(eta, L, has_right, m, tabs, fp, rates, tree)
    top = fen_top_bit(nslots)

    nu = fp[F_NU]
    u = fp[F_U]
    e2p = math.expm1(2 * u)
    e2m = math.expm1(-2 * u)

    want_obs = (flags & (OBS_MARTINGALE | OBS_RTERMS)) != 0
    want_ledger = (flags & OBS_LEDGER) != 0
    want_log = (flags & OBS_EVENTLOG) != 0
    log_cap = elog_t.size

    # running integrals: compensator, bracket, R0..R5, stochII, plain
    comp = 0.0
    brak = 0.0
    R = np.zeros(N_RCOLS)
    tref = 0.0
    Zt = np.exp(-K.astype(np.float64) * u)
    C = np.zeros((N_CONTRIB, L + 1))
    S = np.zeros(N_CONTRIB)
    E = np.zeros(7)
    if want_obs:
        for x in range(L + 1):
            _contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C)
        for k in range(N_CONTRIB):
            S[k] = C[k].sum()
        _boundary_terms(eta, L, has_right, m, fb, gtab, fp, Zt, E)

    # ledger: per-site jump sums and compensators, lazily integrated
    lc = np.zeros(L + 1)
    lq = np.zeros(L + 1)
    last = np.zeros(L + 1)
    J = np.zeros(L + 1)
    JC = np.zeros(L + 1)
    J2 = np.zeros(L + 1)
    J2C = np.zeros(L + 1)
    if want_ledger:
        for x in range(L + 1):
            c, q = site_coeffs(eta, L, x, has_right, m, tabs, fp, e2p, e2m)
            lc[x] = c - nu
            lq[x] = q

    t = 0.0
    gi = 0
    G = grid.size
    nev = 0
    nlog = 0
    overflow = 0
    since_rebuild = 0
    while True:
        total = fen_prefix(tree, nslots)
        if total > 0.0:
            t_new = t - math.log(1.0 - np.random.random()) / total
        else:
            t_new = math.inf
        # snapshots strictly before the next event
        while gi < G and grid[gi] < t_new:
            tg = grid[gi]
            if want_obs:
                a0 = nu * (t - tref)
                g1 = math.exp(a0) * math.expm1(nu * (tg - t)) / nu
                g2 = math.exp(2 * a0) * math.expm1(2 * nu * (tg - t)) / (2 * nu)
                comp += S[0] * g1
                brak += S[1] * g2
                R[0] += S[2] * g1
                R[1] += E[0] * g1
                R[2] += E[1] * g1
                R[3] += E[2] * g1
                R[4] += E[3] * g1
                R[5] += -0.5 * S[3] * g2
                R[6] += S[4] * g2
                R[7] += E[4] * (tg - t)
                R[8] += S[5] * g1
                R[9] += S[6] * g1
                R[10] += E[5] * g1
                R[11] += E[6] * g1
            t = tg
            if flags & OBS_SNAPSHOT:
                for x in range(L + 1):
                    snap_eta[gi, x] = eta[x]
                    snap_K[gi, x] = K[x]
            if flags & OBS_MARTINGALE:
                F = 0.0
                for x in range(L + 1):
                    F += wts[W_PAIR, x] * math.exp(-K[x] * u + nu * tg)
                mart[gi, 0] = F
                mart[gi, 1] = comp
                mart[gi, 2] = brak
            if flags & OBS_RTERMS:
                for k in range(N_RCOLS):
                    rterm[gi, k] = R[k]
            if want_ledger:
                for x in range(L + 1):
                    JC[x] += lc[x] * (tg - last[x])
                    J2C[x] += lq[x] * (tg - last[x])
                    last[x] = tg
                    ledger[gi, x, 0] = J[x]
                    ledger[gi, x, 1] = JC[x]
                    ledger[gi, x, 2] = J2[x]
                    ledger[gi, x, 3] = J2C[x]
            gi += 1
        if gi >= G:
            break

        # integrate observables over the holding interval
        if want_obs:
            a0 = nu * (t - tref)
            g1 = math.exp(a0) * math.expm1(nu * (t_new - t)) / nu
            g2 = math.exp(2 * a0) * math.expm1(2 * nu * (t_new - t)) / (2 * nu)
            comp += S[0] * g1
            brak += S[1] * g2
            R[0] += S[2] * g1
            R[1] += E[0] * g1
            R[2] += E[1] * g1
            R[3] += E[2] * g1
            R[4] += E[3] * g1
            R[5] += -0.5 * S[3] * g2
            R[6] += S[4] * g2
            R[7] += E[4] * (t_new - t)
            R[8] += S[5] * g1
            R[9] += S[6] * g1
            R[10] += E[5] * g1
            R[11] += E[6] * g1
        t = t_new

        slot = choose_slot(tree, rates, top, nslots, np.random.random())
        xk = changed_height(L, slot)
        if want_ledger:
            JC[xk] += lc[xk] * (t - last[xk])
            J2C[xk] += lq[xk] * (t - last[xk])
            last[xk] = t
        site, kind = apply_event(eta, K, L, slot)
        nev += 1
        if want_ledger:
            fac = math.expm1(-2 * u) if (kind == LEFT_SWAP or kind == REMOVE_LEFT or kind == CREATE_RIGHT) else math.expm1(2 * u)
            J[xk] += fac
            J2[xk] += fac * fac
        if want_log:
            if nlog < log_cap:
                elog_t[nlog] = t
                elog_site[nlog] = site
                elog_kind[nlog] = kind
                nlog += 1
            else:
                overflow = 1
        refresh_slots(eta, L, slot, has_right, m, tabs, fp, rates, tree)
        since_rebuild += 1
        if since_rebuild >= 1 << 20:
            fen_build(rates, tree)
            since_rebuild = 0

        ca, cb = changed_sites(L, slot)
        near_left = ca <= m
        near_right = cb >= L - m + 1
        if want_ledger:
            for x in range(max(0, ca - 1), min(L, cb) + 1):
                if x != xk:
                    JC[x] += lc[x] * (t - last[x])
                    J2C[x] += lq[x] * (t - last[x])
                    last[x] = t
                c, q = site_coeffs(eta, L, x, has_right, m, tabs, fp, e2p, e2m)
                lc[x] = c - nu
                lq[x] = q
            for x in (0, L):
                if (x == 0 and near_left and ca > 1) or (x == L and near_right and cb < L):
                    JC[x] += lc[x] * (t - last[x])
                    J2C[x] += lq[x] * (t - last[x])
                    last[x] = t
                    c, q = site_coeffs(eta, L, x, has_right, m, tabs, fp, e2p, e2m)
                    lc[x] = c - nu
                    lq[x] = q

        if want_obs:
            if nu * (t - tref) > 0.5:
                # rebase the stored Z to the current time and resum from scratch
                tref = t
                for x in range(L + 1):
                    Zt[x] = math.exp(-K[x] * u + nu * tref)
                for x in range(L + 1):
                    _contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C)
                for k in range(N_CONTRIB):
                    S[k] = C[k].sum()
                _boundary_terms(eta, L, has_right, m, fb, gtab, fp, Zt, E)
            else:
                Zt[xk] = math.exp(-K[xk] * u + nu * tref)
                lo = max(0, min(ca - 1, ca - ma + 1))
                hi = min(L, cb)
                for x in range(lo, hi + 1):
                    _update_contrib(x, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C, S)
                if near_left and lo > 0:
                    _update_contrib(0, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C, S)
                if near_right and hi < L:
                    _update_contrib(L, eta, L, has_right, m, tabs, fp, e2p, e2m, Zt, wts, at, ma, C, S)
            if near_left or near_right:
                _boundary_terms(eta, L, has_right, m, fb, gtab, fp, Zt, E)

    counts[0] = nev
    counts[1] = nlog
    counts[2] = overflow


@njit(cache=True, nogil=True)
def run_batch(
    seeds, eta0, K0, L, has_right, m, tabs, fp, grid, flags,
    wts, at, ma, fb, gtab,
    snap_eta, snap_K, mart, rterm, ledger, elog_t, elog_site, elog_kind, counts,
):
    """Replicas ``r`` reseed the generator with ``seeds[r]`` so results do not
    depend on how replicas are split across threads."""
    for r in range(seeds.size):
        np.random.seed(seeds[r])
        eta = eta0[r].copy()
        K = K0[r].copy()
        trajectory(
            eta, K, L, has_right, m, tabs, fp, grid, flags,
            wts, at, ma, fb, gtab,
            snap_eta[r], snap_K[r], mart[r], rterm[r], ledger[r],
            elog_t[r], elog_site[r], elog_kind[r], counts[r],
        )
