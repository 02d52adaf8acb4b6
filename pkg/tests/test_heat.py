import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from openasep.heat import (
    RobinLaplacian,
    apply_robin_laplacian,
    evolve_mean_profile,
    heat_kernel,
    integrate_she,
    verify_kernel_bounds,
)


def test_laplacian_constant_profile():
    out = apply_robin_laplacian(np.ones(11), RobinLaplacian(10, 2.0, 3.0))
    assert out[0] == pytest.approx(0.2)
    assert out[10] == pytest.approx(-0.3)
    assert np.all(out[1:10] == 0)


def test_laplacian_linear_profile():
    N = 10
    phi = np.arange(N + 1, dtype=float)
    out = RobinLaplacian(N, 1.0, 2.0).apply(phi)
    assert out[0] == pytest.approx(1.0)
    assert out[N] == pytest.approx(-1.0 - 2.0 / N * N)
    assert np.allclose(out[1:N], 0)


def test_laplacian_matrix_matches_apply():
    lap = RobinLaplacian(7, 0.3, -0.4)
    phi = np.random.default_rng(0).normal(size=8)
    assert np.allclose(lap.matrix() @ phi, lap.apply(phi), atol=1e-14)


def test_laplacian_validation():
    with pytest.raises(ValueError):
        RobinLaplacian(5, 0.0)
    with pytest.raises(ValueError):
        RobinLaplacian(5, 0.0, 0.0, L=9)
    with pytest.raises(ValueError):
        RobinLaplacian(5, 0.0, 0.0).apply(np.ones(4))


def test_kernel_identity_at_zero():
    assert np.array_equal(heat_kernel(0.0, RobinLaplacian(6, 1, 1)).matrix, np.eye(7))
    with pytest.raises(ValueError):
        heat_kernel(-1.0, RobinLaplacian(6, 1, 1))


def test_neumann_kernel_is_stochastic():
    H = heat_kernel(0.05, RobinLaplacian(20, 0.0, 0.0)).matrix
    assert np.allclose(H.sum(axis=1), 1.0, atol=1e-12)


@given(
    A=st.floats(-2, 2),
    B=st.floats(-2, 2),
    s=st.floats(0.001, 0.05),
    t=st.floats(0.001, 0.05),
)
def test_kernel_semigroup_symmetry_positivity(A, B, s, t):
    lap = RobinLaplacian(12, A, B)
    Hs, Ht, Hst = (heat_kernel(v, lap) for v in (s, t, s + t))
    assert np.allclose(Hs @ Ht, Hst.matrix, atol=1e-10, rtol=0)
    assert np.all(Hst.matrix >= 0)
    assert np.allclose(Hst.matrix, Hst.matrix.T, atol=1e-12)


def test_positive_A_creates_mass():
    H = heat_kernel(0.1, RobinLaplacian(16, 1.0, 0.0)).matrix
    assert H.sum(axis=1).min() > 1.0


@pytest.mark.parametrize("t", [0.01, 0.05, 0.1])
@pytest.mark.parametrize("A", [0.0, 0.7, -0.5])
def test_half_space_truncations_agree(A, t):
    N = 16
    short = heat_kernel(t, RobinLaplacian(N, A, None, L=4 * N)).matrix
    long = heat_kernel(t, RobinLaplacian(N, A, None, L=8 * N)).matrix
    assert np.abs(short[: N + 1, : N + 1] - long[: N + 1, : N + 1]).max() < 1e-6


def test_mean_profile_matches_kernel():
    lap = RobinLaplacian(24, 0.4, -0.2)
    Z0 = np.linspace(1, 2, 25)
    assert np.allclose(evolve_mean_profile(Z0, 0.03, lap), heat_kernel(0.03, lap).matrix @ Z0, atol=1e-10)
    assert np.array_equal(evolve_mean_profile(Z0, 0.0, lap), Z0)


def test_sparse_route_matches_dense():
    lap = RobinLaplacian(40, 0.5, None, L=600)
    H = heat_kernel(0.002, lap).matrix
    dense = scipy.linalg.expm(0.002 * lap.generator())
    assert np.abs(H - dense).max() < 1e-9


def test_she_without_noise_is_heat_flow():
    lap = RobinLaplacian(16, 0.3, 0.1)
    Z0 = np.ones(17)
    sol = integrate_she(Z0, lap, 1e-3, 20, np.random.default_rng(0), noise=False)
    assert np.allclose(sol.Z[-1], heat_kernel(0.02, lap).matrix @ Z0, atol=1e-10)
    assert sol.times[-1] == pytest.approx(0.02)


def test_she_zero_initial_stays_zero():
    sol = integrate_she(np.zeros(9), RobinLaplacian(8, 1, 1), 1e-3, 10, np.random.default_rng(1))
    assert not sol.Z.any()


def test_she_mean_follows_heat_flow():
    lap = RobinLaplacian(8, 0.5, 0.5)
    Z0 = np.ones(9)
    rng = np.random.default_rng(2)
    finals = np.array([integrate_she(Z0, lap, 1e-3, 20, rng).Z[-1] for _ in range(2000)])
    target = heat_kernel(0.02, lap).matrix @ Z0
    sem = finals.std(axis=0, ddof=1) / math.sqrt(finals.shape[0])
    assert np.all(np.abs(finals.mean(axis=0) - target) <= 4 * sem)


def test_she_explicit_stability_guard():
    lap = RobinLaplacian(16, 0, 0)
    with pytest.raises(ValueError):
        integrate_she(np.ones(17), lap, 1e-2, 1, np.random.default_rng(0), explicit=True)
    sol = integrate_she(np.ones(17), lap, 1e-4, 3, np.random.default_rng(0), explicit=True, noise=False)
    assert np.allclose(sol.Z[-1], 1.0)


def test_kernel_csv(tmp_path):
    path = tmp_path / "k.csv"
    heat_kernel(0.01, RobinLaplacian(3, 1.0, 2.0)).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# N=3 A=1.0 B=2.0")
    assert lines[1] == "x,y,value"
    assert len(lines) == 2 + 16


def test_kernel_bound_validation():
    with pytest.raises(ValueError):
        verify_kernel_bounds(N_grid=(8, 16, 32))
    with pytest.raises(ValueError):
        verify_kernel_bounds(N_grid=(8, 16, 32, 64), t_grid=[0.01, 0.02])
