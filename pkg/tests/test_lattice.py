import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from openasep.lattice import (
    BoundaryRates,
    CanonicalMeasureSpec,
    DegenerateConditioning,
    LocalFunction,
    ProductMeasureSpec,
    RateError,
    SpinConfiguration,
    SystemParams,
    boundary_drift_left,
    boundary_drift_right,
    canonical_expectation,
    compute_boundary_param_A,
    compute_boundary_param_B,
    eval_local_function,
    product_expectation,
    sample_product,
    spin_table,
)

tables = st.integers(1, 3).flatmap(
    lambda m: st.lists(st.floats(-0.4, 0.4), min_size=1 << m, max_size=1 << m)
)


def all_configs(L):
    for spins in itertools.product((-1, 1), repeat=L):
        yield SpinConfiguration.from_sites(spins)


def rates_from(tabs):
    m = int(math.log2(len(tabs[0])))
    return BoundaryRates(
        LocalFunction(np.array(tabs[0]), "left"),
        LocalFunction(np.array(tabs[1]), "left"),
        LocalFunction(np.array(tabs[2]), "right"),
        LocalFunction(np.array(tabs[3]), "right"),
    ), m


# ------------------------------------------------------------ configurations

def test_spin_configuration_rejects_bad_entries():
    with pytest.raises(ValueError):
        SpinConfiguration.from_sites([1, 0, -1])


def test_local_function_bound_and_json_roundtrip():
    f = LocalFunction(np.array([0.5, -2.0, 1.0, 0.0]), "right")
    assert f.bound == 2.0
    g = LocalFunction.from_json(f.to_json())
    assert g.anchor == "right" and np.array_equal(g.values, f.values)
    assert json.loads(f.to_json())["window_size"] == 2


def test_local_function_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        LocalFunction(np.zeros(3))


def test_eval_local_function_examples():
    eta = SpinConfiguration.from_sites([1, -1, 1, 1])
    assert eval_local_function(LocalFunction.constant(0.0, 2), eta) == 0.0
    c = 2.5
    assert eval_local_function(LocalFunction(np.array([-c, c]), "left"), eta) == c
    equal = LocalFunction.from_callable(lambda s: float(s[0] == s[1]), 2)
    assert eval_local_function(equal, eta) == 0.0


def test_eval_local_function_window_outside_lattice():
    f = LocalFunction(np.zeros(8), "bulk")
    with pytest.raises(IndexError):
        eval_local_function(f, SpinConfiguration.from_sites([1, 1, 1]), at=2)


# ------------------------------------------------------------ measures

def test_product_expectation_examples():
    eta1 = LocalFunction(np.array([-1.0, 1.0]))
    assert product_expectation(eta1, 0.4) == pytest.approx(0.4, abs=1e-15)
    pair = LocalFunction(np.array([1.0, -1.0, -1.0, 1.0]))
    for s in (-0.7, 0.0, 0.3):
        assert product_expectation(pair, s) == pytest.approx(s * s, abs=1e-15)
    plus_minus = LocalFunction(np.array([0.0, 1.0, 0.0, 0.0]))
    assert product_expectation(plus_minus, 0.0) == 0.25


@given(tables)
def test_odd_functions_have_zero_uniform_mean(vals):
    vals = np.array(vals)
    odd = vals - vals[::-1]  # index reversal is the global spin flip
    assert abs(product_expectation(LocalFunction(odd), 0.0)) < 1e-14


def test_canonical_expectation_examples():
    eta1 = LocalFunction(np.array([-1.0, 1.0]))
    assert canonical_expectation(eta1, CanonicalMeasureSpec(4, 4)) == 1.0
    assert canonical_expectation(eta1, CanonicalMeasureSpec(4, 0)) == 0.0
    pair = LocalFunction(np.array([1.0, -1.0, -1.0, 1.0]))
    # oracle: enumerate the 6 balanced configurations of 4 spins
    balanced = [s for s in itertools.product((-1, 1), repeat=4) if sum(s) == 0]
    oracle = sum(s[0] * s[1] for s in balanced) / len(balanced)
    assert oracle == pytest.approx(-1 / 3)
    assert canonical_expectation(pair, CanonicalMeasureSpec.from_sigma(0.0, 4)) == pytest.approx(oracle, abs=1e-15)


def test_canonical_empty_hyperplane():
    with pytest.raises(DegenerateConditioning):
        CanonicalMeasureSpec(4, 1)
    with pytest.raises(DegenerateConditioning):
        CanonicalMeasureSpec.from_sigma(0.3, 4)


@given(tables, st.integers(3, 10))
def test_canonical_mixture_equals_product(vals, size):
    f = LocalFunction(np.array(vals))
    if f.window_size > size:
        return
    total = sum(
        math.comb(size, k) / 2**size * canonical_expectation(f, CanonicalMeasureSpec(size, 2 * k - size))
        for k in range(size + 1)
    )
    assert total == pytest.approx(product_expectation(f, 0.0), abs=1e-12)


def test_sample_product_examples():
    rng = np.random.default_rng(0)
    assert np.all(sample_product(ProductMeasureSpec(1.0, 50), rng).spins[1:] == 1)
    assert np.all(sample_product(ProductMeasureSpec(-1.0, 50), rng).spins[1:] == -1)
    s = sample_product(ProductMeasureSpec(0.0, 100_000), rng).spins[1:]
    assert abs(s.mean()) <= 4 / math.sqrt(1e5)


# ------------------------------------------------------------ boundary parameters

def test_boundary_params_zero_rates():
    z = LocalFunction.constant(0.0, 1, "left")
    zr = LocalFunction.constant(0.0, 1, "right")
    assert compute_boundary_param_A(z, z) == 1.5
    assert compute_boundary_param_B(zr, zr) == -1.5


@pytest.mark.parametrize("a,g", [(0.3, -0.1), (0.0, 0.25), (-0.2, -0.2)])
def test_boundary_param_A_constants(a, g):
    A = compute_boundary_param_A(LocalFunction.constant(a, 2), LocalFunction.constant(g, 2))
    assert A == pytest.approx(1.5 + 2 * (a - g), abs=1e-14)


@pytest.mark.parametrize("d,b", [(0.3, -0.1), (0.1, 0.1)])
def test_boundary_param_B_constants(d, b):
    B = compute_boundary_param_B(LocalFunction.constant(d, 2, "right"), LocalFunction.constant(b, 2, "right"))
    assert B == pytest.approx(-1.5 + 2 * (d - b), abs=1e-14)


def test_boundary_params_spin_coefficient():
    c = 0.3
    A = compute_boundary_param_A(LocalFunction(np.array([-c, c])), LocalFunction.constant(0.0, 1))
    assert A == pytest.approx(1.5 - 2 * c, abs=1e-14)
    B = compute_boundary_param_B(LocalFunction(np.array([-c, c]), "right"), LocalFunction.constant(0.0, 1, "right"))
    assert B == pytest.approx(-1.5 - 2 * c, abs=1e-14)


def test_liggett_constants_give_three_halves():
    r = BoundaryRates.constant(alpha=0.2, gamma=0.2, delta=-0.1, beta=-0.1)
    p = SystemParams(16, r)
    assert p.A == 1.5 and p.B == -1.5


@given(st.lists(tables, min_size=4, max_size=4))
def test_boundary_drift_is_mean_zero(tabs):
    if len({len(t) for t in tabs}) != 1:
        return
    rates, m = rates_from(tabs)
    L = max(m, 2)
    p = SystemParams(64, rates)
    confs = list(all_configs(L))
    # product measure is uniform on the window; sites beyond m are irrelevant
    fl = np.mean([boundary_drift_left(_embed(c, 64), p)[0] for c in confs])
    fr = np.mean([boundary_drift_right(_embed_right(c, 64), p)[0] for c in confs])
    assert abs(fl) < 1e-12 and abs(fr) < 1e-12


def _embed(c, N):
    s = np.ones(N, dtype=int)
    s[: c.size] = c.spins[1:]
    return SpinConfiguration.from_sites(s)


def _embed_right(c, N):
    s = np.ones(N, dtype=int)
    s[N - c.size :] = c.spins[1:]
    return SpinConfiguration.from_sites(s)


def test_A_depends_only_on_two_moments():
    # distinct tables with equal E0(alpha - gamma) and E0(eta1 (alpha + gamma))
    a1 = LocalFunction(np.array([0.1, 0.3, -0.2, 0.2]))
    g1 = LocalFunction(np.array([0.0, 0.0, 0.0, 0.0]))
    a2 = LocalFunction(np.array([0.0, 0.2, 0.0, 0.4]))
    g2 = LocalFunction.constant(0.05, 2)
    e = np.array([-1, 1, -1, 1])
    assert np.mean(a1.values - g1.values) == pytest.approx(np.mean(a2.values - g2.values))
    assert np.mean(e * (a1.values + g1.values)) == pytest.approx(np.mean(e * (a2.values + g2.values)))
    assert compute_boundary_param_A(a1, g1) == pytest.approx(compute_boundary_param_A(a2, g2), abs=1e-15)


def test_drift_coefficients_for_constant_rates():
    a, g, d, b = 0.3, -0.1, 0.2, 0.05
    p = SystemParams(32, BoundaryRates.constant(a, g, d, b))
    for c in all_configs(3):
        eta = _embed(c, 32)
        assert boundary_drift_left(eta, p)[0] == pytest.approx(-eta[1] * (a + g), abs=1e-14)
        assert boundary_drift_right(eta, p)[0] == pytest.approx(eta[32] * (d + b), abs=1e-14)


def test_drift_remainders_bounded_in_N(random_rates):
    # a wrong order-N coefficient would leave a sqrt(N) growth in the remainder
    worst = []
    for N in (64, 256, 1024, 4096, 16384):
        p = SystemParams(N, random_rates)
        bs = []
        for c in all_configs(2):
            bs.append(abs(boundary_drift_left(_embed(c, N), p)[1]))
            bs.append(abs(boundary_drift_right(_embed_right(c, N), p)[1]))
        worst.append(max(bs))
    assert max(worst) < 10
    assert worst[-1] <= 1.05 * worst[0] + 0.1


def test_rate_positivity_enforced():
    with pytest.raises(RateError):
        SystemParams(4, BoundaryRates.constant(alpha=-0.6))


def test_halfspace_requires_long_truncation():
    with pytest.raises(ValueError):
        SystemParams(8, geometry="half-space", L_trunc=31)
    assert SystemParams(8, geometry="half-space", L_trunc=32).size == 32


def test_spin_table_indexing():
    t = spin_table(3)
    assert t.shape == (8, 3)
    assert list(t[5]) == [1, -1, 1]
