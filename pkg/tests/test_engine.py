import math

import numpy as np
import pytest
import scipy.linalg

from openasep import _kernels as K_
from openasep.engine import (
    AbsorbingState,
    ConfigurationError,
    EngineState,
    ObservationPlan,
    build_event_table,
    exact_pairing_drift,
    gartner_snapshot,
    read_event_log,
    simulate,
    step,
    truncate_halfspace,
    write_event_log,
)
from openasep.exact import build_generator, state_index, state_spins
from openasep.lattice import BoundaryRates, LocalFunction, SpinConfiguration, SystemParams

ALT4 = SpinConfiguration.from_sites([1, -1, 1, -1])


# ------------------------------------------------------------ event table

def test_event_table_n4_alternating():
    tab = build_event_table(ALT4, SystemParams(4))
    assert list(tab.bond_rates) == [4.0, 12.0, 4.0]
    assert (tab.left_flip, tab.right_flip) == (4.0, 4.0)
    assert tab.total == 28.0


def test_event_table_all_plus_has_no_swaps():
    tab = build_event_table(SpinConfiguration.from_sites([1] * 6), SystemParams(6))
    assert not tab.bond_rates.any()
    assert tab.left_flip > 0 and tab.right_flip > 0


def test_event_table_left_flip_uses_alpha():
    r = BoundaryRates.constant(alpha=0.5)
    tab = build_event_table(SpinConfiguration.from_sites([-1, 1, 1, 1]), SystemParams(4, r))
    assert tab.left_flip == 8.0


def test_event_table_size_mismatch():
    with pytest.raises(ConfigurationError):
        build_event_table(ALT4, SystemParams(6))


def test_incremental_table_matches_fresh_build(random_rates):
    params = SystemParams(16, random_rates)
    state = EngineState.start(SpinConfiguration.from_sites([1, -1] * 8), params)
    rng = np.random.default_rng(0)
    for _ in range(5000):
        step(state, rng)
    fresh = build_event_table(state.configuration, params)
    assert np.array_equal(state.table.rates, fresh.rates)
    assert state.table.total == pytest.approx(fresh.total, rel=1e-12)


# ------------------------------------------------------------ stepping

def test_single_active_event():
    params = SystemParams(4, geometry="window", L_trunc=1)
    state = EngineState.start(SpinConfiguration.from_sites([1]), params)
    rate = state.table.total
    assert rate == 4.0
    rng = np.random.default_rng(1)
    dts = []
    for _ in range(4000):
        ev, dt = step(state, rng)
        assert ev.slot == 1 and ev.kind in ("create_left", "remove_left")
        dts.append(dt)
    assert abs(np.mean(dts) - 1 / rate) <= 4 * (1 / rate) / math.sqrt(4000)


def test_frozen_stream_replays_identically(random_rates):
    params = SystemParams(8, random_rates)
    runs = []
    for _ in range(2):
        state = EngineState.start(SpinConfiguration.from_sites([1, -1] * 4), params)
        rng = np.random.default_rng(42)
        runs.append([(step(state, rng)[0].slot) for _ in range(300)])
    assert runs[0] == runs[1]


def test_absorbing_state_signal():
    params = SystemParams(4, geometry="window", L_trunc=1)
    state = EngineState.start(SpinConfiguration.from_sites([1]), params)
    state.table.rates[:] = 0
    state.table.tree[:] = 0
    with pytest.raises(AbsorbingState):
        step(state, np.random.default_rng(0))


def test_event_count_matches_rate_integral(random_rates):
    # count minus the integrated total rate is a mean-zero martingale
    params = SystemParams(16, random_rates)
    rng = np.random.default_rng(3)
    diffs = []
    for _ in range(100):
        state = EngineState.start(SpinConfiguration.from_sites([1, -1] * 8), params)
        count, integral = 0, 0.0
        while True:
            total = state.table.total
            ev, dt = step(state, rng)
            if state.t > 0.02:
                integral += total * (0.02 - (state.t - dt))
                break
            integral += total * dt
            count += 1
        diffs.append(count - integral)
    diffs = np.array(diffs)
    assert abs(diffs.mean()) <= 4 * diffs.std(ddof=1) / math.sqrt(diffs.size)


# ------------------------------------------------------------ Gärtner field

def test_gartner_initial_alternating():
    N = 8
    state = EngineState.start(SpinConfiguration.from_sites([1, -1] * 4), SystemParams(N))
    Z = gartner_snapshot(state)
    x = np.arange(N + 1)
    assert Z[0] == 1.0
    assert np.allclose(Z, np.exp(-(x % 2) / math.sqrt(N)), rtol=0, atol=1e-15)


def test_creation_at_site_one_moves_only_z0():
    N = 9
    state = EngineState.start(SpinConfiguration.from_sites([-1, 1, -1, 1, 1, -1, 1, -1, 1]), SystemParams(N))
    before = gartner_snapshot(state)
    site, kind = K_.apply_event(state.eta, state.K, N, N)  # reservoir slot at site 1
    assert kind == K_.CREATE_LEFT
    after = gartner_snapshot(state)
    assert after[0] == pytest.approx(before[0] * math.exp(2 / math.sqrt(N)), rel=1e-14)
    assert np.array_equal(after[1:], before[1:])


def test_right_swap_moves_only_zx():
    N = 9
    state = EngineState.start(SpinConfiguration.from_sites([-1, 1, -1, 1, 1, -1, 1, -1, 1]), SystemParams(N))
    before = gartner_snapshot(state)
    site, kind = K_.apply_event(state.eta, state.K, N, 5)  # (+,-) across bond (5,6)
    assert kind == K_.RIGHT_SWAP
    after = gartner_snapshot(state)
    changed = np.nonzero(after != before)[0]
    assert list(changed) == [5]
    assert after[5] == pytest.approx(before[5] * math.exp(2 / math.sqrt(N)), rel=1e-14)


# ------------------------------------------------------------ drift oracle

def _tilted_pairing_derivative(params, eta, phi_vals):
    """d/dt E[(Z_t, phi)] at t=0 by central differences of tilted generators.

    ``E[exp(-u K_x(t))]`` solves the backward equation of the generator whose
    off-diagonal entries carry the factor ``exp(-u dK_x)`` of each transition.
    """
    N = params.N
    u = N**-0.5
    Q = build_generator(params, N, "full").dense()
    spins = state_spins(N).astype(int)
    s0 = state_index(eta)
    K0 = np.r_[0, np.cumsum(eta.spins[1:].astype(int))]
    src, dst = np.nonzero(Q - np.diag(np.diag(Q)))
    h = 1e-6
    total = 0.0
    for x in range(N + 1):
        Qx = np.diag(np.diag(Q)).astype(float)
        for a, b in zip(src, dst):
            d_eta = spins[b] - spins[a]
            dK0 = -d_eta[0] if (d_eta[0] != 0 and not d_eta[1:].any()) else 0
            dK = dK0 + d_eta[:x].sum()
            Qx[a, b] = Q[a, b] * math.exp(-u * dK)
        ones = np.ones(Q.shape[0])
        f = lambda t: math.exp(params.nu * t - u * K0[x]) * (scipy.linalg.expm(t * Qx) @ ones)[s0]
        total += phi_vals[x] / N * (f(h) - f(-h)) / (2 * h)
    return total


def test_pairing_drift_matches_tilted_generator(random_rates):
    params = SystemParams(4, random_rates)
    eta = SpinConfiguration.from_sites([1, -1, -1, 1])
    phi = lambda x: 1.0 + 0.5 * x - 0.3 * x**3
    state = EngineState.start(eta, params)
    exact = exact_pairing_drift(state, phi)
    oracle = _tilted_pairing_derivative(params, eta, phi(np.arange(5) / 4))
    assert exact == pytest.approx(oracle, rel=1e-6)


def test_pairing_drift_zero_test_function(random_rates):
    state = EngineState.start(ALT4, SystemParams(4, random_rates))
    assert exact_pairing_drift(state, np.zeros(5)) == 0.0


# ------------------------------------------------------------ simulate

def test_horizon_zero_gives_initial_snapshot():
    obs = simulate("flat", SystemParams(8), ObservationPlan(np.array([0.0])), replicas=3)
    assert obs.eta.shape == (3, 1, 9)
    assert np.allclose(obs.Z[:, 0, :], obs.Z[0, 0, :])
    assert obs.events.sum() == 0


def test_height_increments_equal_spins(random_rates):
    params = SystemParams(16, random_rates)
    obs = simulate("product", params, ObservationPlan(np.linspace(0.01, 0.05, 5)), seed=1, replicas=20)
    dK = np.diff(obs.K, axis=2)
    assert np.array_equal(dK, obs.eta[:, :, 1:].astype(np.int64))


def test_symmetric_reservoirs_reflection_antisymmetry():
    # reflecting x -> N+1-x and flipping spins preserves the dynamics
    params = SystemParams(16)
    grid = np.linspace(0.02, 0.1, 5)
    obs = simulate("product", params, ObservationPlan(grid), seed=2, replicas=2000)
    spins = obs.eta[:, :, 1:].astype(float)
    paired = spins + spins[:, :, ::-1]
    mean = paired.mean(axis=0)
    sem = paired.std(axis=0, ddof=1) / math.sqrt(2000)
    # 80 correlated cells; a 4.5-sigma band keeps family-wise false alarms rare
    assert np.all(np.abs(mean) <= 4.5 * sem + 1e-12)


def test_bit_identical_across_thread_counts(random_rates):
    params = SystemParams(12, random_rates)
    plan = ObservationPlan(np.array([0.02, 0.05]), event_log=20000)
    a = simulate("product", params, plan, seed=9, replicas=6, threads=1)
    b = simulate("product", params, plan, seed=9, replicas=6, threads=3)
    assert np.array_equal(a.K, b.K)
    for la, lb in zip(a.event_logs, b.event_logs):
        assert np.array_equal(la, lb)


def test_split_runs_match_whole_run(random_rates):
    params = SystemParams(12, random_rates)
    plan = ObservationPlan(np.array([0.05]))
    whole = simulate("product", params, plan, seed=4, replicas=6)
    part = simulate("product", params, plan, seed=4, replicas=3, first_replica=3)
    assert np.array_equal(whole.K[3:], part.K)


def test_event_log_roundtrip(tmp_path, random_rates):
    params = SystemParams(8, random_rates)
    obs = simulate("flat", params, ObservationPlan(np.array([0.02]), event_log=5000), replicas=1)
    log = obs.event_logs[0]
    path = tmp_path / "events.bin"
    write_event_log(path, log)
    assert path.stat().st_size == 16 * log.size
    assert np.array_equal(read_event_log(path), log)


def test_event_log_overflow_raises(random_rates):
    with pytest.raises(ConfigurationError):
        simulate("flat", SystemParams(16, random_rates), ObservationPlan(np.array([0.1]), event_log=3))


def test_observation_plan_validation():
    with pytest.raises(ValueError):
        ObservationPlan(np.array([0.2, 0.1]))
    with pytest.raises(ValueError):
        ObservationPlan(np.array([0.1]), martingale=True)


def test_truncate_halfspace():
    p = SystemParams(16, geometry="half-space", L_trunc=64)
    assert truncate_halfspace(p, delta=0.1).size == math.ceil(16**1.6)
    with pytest.raises(ConfigurationError):
        truncate_halfspace(p, L_trunc=63)
    with pytest.raises(ConfigurationError):
        truncate_halfspace(SystemParams(8))


def test_n4_law_matches_forward_density(random_rates):
    from openasep.exact import forward_density, point_mass_density

    params = SystemParams(4, random_rates)
    obs = simulate("flat", params, ObservationPlan(np.array([0.01])), seed=5, replicas=20000)
    idx = ((obs.eta[:, 0, 1:] == 1) * (1 << np.arange(4))).sum(axis=1)
    emp = np.bincount(idx, minlength=16) / idx.size
    start = state_index(SpinConfiguration.from_sites([1, -1, 1, -1]))
    P = forward_density(point_mass_density(4, start), build_generator(params, 4, "full"), 0.01) / 16
    assert 0.5 * np.abs(emp - P).sum() < 0.02


def test_local_function_plain_integral(random_rates):
    d = LocalFunction(np.array([1.0, 1.0]))
    params = SystemParams(8, random_rates, "window", 4)
    obs = simulate("product", params, ObservationPlan(np.array([0.01, 0.03]), plain=d), replicas=2)
    assert np.allclose(obs.rterm("plain"), [[0.01, 0.03], [0.01, 0.03]], rtol=1e-12)
