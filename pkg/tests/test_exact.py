import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from openasep import _kernels as K_
from openasep.engine import build_event_table
from openasep.exact import (
    KINDS,
    WindowTooLarge,
    build_generator,
    canonical_ensemble_Psi,
    duhamel_envelope,
    entropy_production_experiment,
    fisher_information,
    forward_density,
    forward_path,
    kv_second_moment,
    kv_second_moment_vanloan,
    one_block_gap,
    point_mass_density,
    psi_lipschitz_constant,
    relative_entropy,
    semigroup_distance,
    state_index,
    state_spins,
    symmetric_geometric_nodes,
    uniform_density,
)
from openasep.lattice import BoundaryRates, LocalFunction, SpinConfiguration, SystemParams

ETA1 = LocalFunction(np.array([-1.0, 1.0]), "left")
PAIR = LocalFunction(np.array([1.0, -1.0, -1.0, 1.0]), "bulk")


# ------------------------------------------------------------ generator

def test_state_indexing_roundtrip():
    spins = state_spins(3)
    for i in range(8):
        assert state_index(SpinConfiguration.from_sites(spins[i])) == i


@pytest.mark.parametrize("N", [3, 4, 5])
def test_full_generator_matches_event_table(random_rates, N):
    # second route: enumerate the compiled event table of every state
    params = SystemParams(N, random_rates)
    Q = build_generator(params, N, "full").dense()
    ref = np.zeros_like(Q)
    for i, row in enumerate(state_spins(N)):
        conf = SpinConfiguration.from_sites(row)
        table = build_event_table(conf, params)
        for slot in range(1, table.size + 2):
            rate = table.rates[slot]
            if rate == 0:
                continue
            eta = conf.spins.copy()
            K = np.zeros(N + 1, dtype=np.int64)
            K_.apply_event(eta, K, N, slot)
            ref[i, state_index(SpinConfiguration(eta))] += rate
    ref -= np.diag(ref.sum(axis=1))
    assert np.allclose(Q, ref, rtol=1e-14, atol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_generator_is_conservative_metzler(random_rates, kind):
    G = build_generator(SystemParams(5, random_rates), 5, kind)
    assert G.is_metzler()
    assert np.abs(G.row_sums()).max() <= 1e-9 * G.inf_norm()


@pytest.mark.parametrize("kind", ["symmetric", "symmetric-right", "symmetric-full"])
def test_symmetric_kinds_are_self_adjoint(kind):
    Q = build_generator(SystemParams(5), 5, kind).dense()
    assert np.array_equal(Q, Q.T)


def test_generator_validation(random_rates):
    params = SystemParams(4, random_rates)
    with pytest.raises(WindowTooLarge):
        build_generator(params, 13)
    with pytest.raises(ValueError):
        build_generator(params, 4, "bogus")
    with pytest.raises(ValueError):
        build_generator(params, 1, "full")


def test_forward_density_conserves_mass(random_rates):
    G = build_generator(SystemParams(4, random_rates), 4, "full")
    P = forward_density(point_mass_density(4, 5), G, 0.01)
    assert P.mean() == pytest.approx(1.0, abs=1e-12)
    path = forward_path(point_mass_density(4, 5), G, [0.0, 0.005, 0.01])
    assert np.allclose(path[-1], P, atol=1e-12)
    with pytest.raises(ValueError):
        forward_path(uniform_density(4), G, [0.01, 0.005])


def test_h_theorem_for_symmetric_chain():
    G = build_generator(SystemParams(6), 6, "symmetric-full")
    ts = np.linspace(0, 0.05, 10)
    H = [relative_entropy(P) for P in forward_path(point_mass_density(6, 11), G, ts)]
    assert H[0] == pytest.approx(6 * math.log(2))
    assert np.all(np.diff(H) < 0)


# ------------------------------------------------------------ entropy, Fisher

def _fisher_loop(P, L):
    # per-state enumeration with explicit neighbours
    r = np.sqrt(P)
    total = 0.0
    for i in range(P.size):
        s = [(i >> k) & 1 for k in range(L)]
        for k in range(L - 1):
            if s[k] != s[k + 1]:
                total += (r[i ^ (3 << k)] - r[i]) ** 2
        total += (r[i ^ 1] - r[i]) ** 2 + (r[i ^ (1 << (L - 1))] - r[i]) ** 2
    return total / P.size


@given(st.lists(st.floats(0, 5), min_size=16, max_size=16))
def test_fisher_matches_loop(vals):
    P = np.array(vals)
    assert fisher_information(P, 4) == pytest.approx(_fisher_loop(P, 4), abs=1e-12)


def test_fisher_ignores_equal_spin_swaps():
    # exchangeable density: every swap preserves it
    counts = np.array([bin(i).count("1") for i in range(32)])
    P = 1.0 + counts
    assert fisher_information(P, 5, flips="none") == 0.0
    assert fisher_information(uniform_density(5)) == 0.0
    with pytest.raises(ValueError):
        fisher_information(P, 5, flips="middle")


def test_relative_entropy_examples():
    assert relative_entropy(uniform_density(3)) == 0.0
    assert relative_entropy(point_mass_density(3, 2)) == pytest.approx(3 * math.log(2))
    with pytest.raises(ValueError):
        relative_entropy(np.array([2.0, -1.0]))


def test_entropy_experiment_rows():
    rows = entropy_production_experiment([4, 5], T=0.05, nodes=50)
    assert [r.N for r in rows] == [4, 5]
    for r in rows:
        assert r.integral > 0 and r.ratio == pytest.approx(r.integral / r.bound)
        assert r.H0 == pytest.approx(r.N * math.log(2))


# ------------------------------------------------------------ semigroups

def test_semigroup_distance_basics(random_rates):
    params = SystemParams(64, random_rates)
    assert semigroup_distance(0.0, params, 4) == 0.0
    for s in (1e-6, 1e-4, 1e-2):
        d = semigroup_distance(s, params, 4)
        assert 0 <= d <= 2 + 1e-12
        assert d <= duhamel_envelope(s, params, 4) + 1e-12
    with pytest.raises(ValueError):
        semigroup_distance(-1.0, params, 4)


# ------------------------------------------------------------ Kipnis-Varadhan

def test_nodes_are_symmetric():
    s = symmetric_geometric_nodes(2.0, 16)
    assert s[0] == 0 and s[-1] == 2.0
    assert np.allclose(s + s[::-1], 2.0)
    assert np.all(np.diff(s) > 0)


def test_kv_short_time_limit(random_rates):
    params = SystemParams(64, random_rates)
    tau = 1e-10
    assert kv_second_moment(ETA1, tau, params, 4).value == pytest.approx(1.0, abs=1e-6)
    assert kv_second_moment_vanloan(ETA1, tau, params, 4) == pytest.approx(1.0, abs=1e-6)


def test_kv_zero_functional(random_rates):
    zero = LocalFunction(np.zeros(2), "left")
    assert kv_second_moment(zero, 0.01, SystemParams(16, random_rates), 3).value == 0.0


def test_kv_rejects_biased_functional(random_rates):
    with pytest.raises(ValueError):
        kv_second_moment(LocalFunction(np.array([0.0, 1.0]), "left"), 0.01, SystemParams(16, random_rates), 3)
    with pytest.raises(ValueError):
        kv_second_moment(ETA1, 0.0, SystemParams(16, random_rates), 3)


@pytest.mark.parametrize("tau", [1e-4, 1e-3, 1e-2])
def test_kv_quadrature_matches_block_exponential(random_rates, tau):
    params = SystemParams(64, random_rates)
    quad = kv_second_moment(ETA1, tau, params, 5).value
    assert quad == pytest.approx(kv_second_moment_vanloan(ETA1, tau, params, 5), rel=2e-3)


# ------------------------------------------------------------ canonical ensembles

def test_psi_pair_on_balanced_block():
    eta = SpinConfiguration.from_sites([1, 1, -1, -1, 1])
    assert canonical_ensemble_Psi(PAIR, (1, 4), eta) == pytest.approx(-1 / 3)
    with pytest.raises(IndexError):
        canonical_ensemble_Psi(PAIR, (3, 4), eta)


def test_one_block_vanishes_for_block_functions():
    sum2 = LocalFunction(np.array([-2.0, 0.0, 0.0, 2.0]), "bulk")
    for row in one_block_gap(sum2, [1, 3, 5], block=2):
        assert row.gap == pytest.approx(0.0, abs=1e-12) and row.exact


def test_one_block_decreases_with_ell():
    gaps = [r.gap for r in one_block_gap(PAIR, [1, 2, 4, 8], block=4)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_one_block_sampled_branch():
    rows = one_block_gap(PAIR, [12], block=4, samples=500)
    assert not rows[0].exact and rows[0].sites == 15


def test_psi_lipschitz_closed_form():
    # canonical E[eta_1 eta_2] with spin sum S on b sites is (S^2 - b) / (b (b - 1))
    want = max(
        b * (abs((S * S - b) / (b * (b - 1))) - S * S / b**2)
        for b in range(4, 13)
        for S in range(-b, b + 1, 2)
    )
    assert psi_lipschitz_constant(PAIR) == pytest.approx(want, rel=1e-12)
