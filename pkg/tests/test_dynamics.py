import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from trainmpc.dynamics import (
    MassInterval,
    TrainParams,
    constraint_jacobian,
    constraint_rows,
    constraint_vector,
    control_gain,
    drift,
    lever_interval,
    plant_accel,
    resistance_force,
    simulate_open_loop,
    step_rk4,
    traction_force_envelope,
)
from trainmpc.trackmap import TractionCondition, demo_map, load_map

P = TrainParams()
M = 78200.0
FLAT = load_map("MAPv1 100000\nSEG 0 0 40 0.35 0.15\n")


def test_table_constants():
    assert (P.rho_air, P.c_air, P.c_roll) == (1.2041, 0.85, 0.002)
    assert (P.k1, P.k2, P.k3) == (1.516e5, 0.1147, 1.564e4)
    assert (P.m_train, P.m_maxload, P.m_nominal) == (68200.0, 20500.0, 78200.0)
    assert P.masses == MassInterval(68200.0, 88700.0)


def test_resistance_at_rest():
    assert resistance_force(P, 0.0, 0.0, M) == pytest.approx(1534.3, abs=0.05)


def test_resistance_vanishes_without_rolling_at_wind_speed():
    p = P.with_overrides(c_roll=0.0, v_wind=3.0)
    assert resistance_force(p, 3.0, 0.0, M) == 0.0


def test_resistance_term_by_term():
    total = resistance_force(P, 20.0, 0.01, M)
    assert total == pytest.approx(2047.0 + 7672.1 + 1534.3, abs=1.0)
    assert total == pytest.approx(oracles.resistance(20.0, 0.01, M), rel=1e-14)


def test_traction_envelope():
    assert traction_force_envelope(P, 0.0) == pytest.approx(167240.0)
    # hand value 63 784 N is rounded; the exact sum is 63 786.36 N
    assert traction_force_envelope(P, 10.0) == pytest.approx(63784.0, rel=1e-4)
    assert traction_force_envelope(P, 10.0) == pytest.approx(oracles.traction(10.0), rel=1e-14)
    assert traction_force_envelope(P, 500.0) == pytest.approx(15640.0)


def test_drift_and_gain():
    np.testing.assert_allclose(drift((0.0, 0.0), M, 0.0, P), [0.0, -0.01962])
    d = drift((0.0, 20.0), M, 0.01, P)
    assert d[0] == 20.0 and d[1] == pytest.approx(-0.1439, abs=1e-4)
    assert drift((100.0, 0.0), M, 0.0, P.with_overrides(c_roll=0.0))[1] == 0.0
    g = control_gain((0.0, 0.0), M, P)
    assert g[0] == 0.0 and g[1] == pytest.approx(2.139, abs=1e-3)
    assert control_gain((0.0, 10.0), M, P)[1] == pytest.approx(0.8157, abs=1e-4)


def test_plant_accel_examples():
    assert plant_accel((0.0, 5.0), 0.0, M, 0.0, P) == pytest.approx(drift((0.0, 5.0), M, 0.0, P)[1])
    assert plant_accel((0.0, 0.0), 1.0, M, 0.0, P) == pytest.approx(2.119, abs=1e-3)
    assert plant_accel((0.0, 0.0), -1.0, M, 0.0, P) == pytest.approx(-2.158, abs=1e-3)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 40), st.floats(-1, 1), st.floats(-0.03, 0.03), st.floats(68200, 88700))
def test_plant_accel_matches_independent_calculator(v, u, alpha, m):
    assert plant_accel((0.0, v), u, m, alpha, P) == pytest.approx(
        oracles.accel(v, u, alpha, m), rel=1e-12, abs=1e-12)


def test_constraint_vector_zero_input():
    track = demo_map()
    h = constraint_vector((100.0, 0.0), 0.0, track, TractionCondition.GOOD, P.masses, P)
    assert h.shape == (7,)
    assert h[2] == pytest.approx(-0.35 * 9.81) and h[3] == pytest.approx(-0.35 * 9.81)
    assert h[4] == -20.0 and h[5] == -1.0 and h[6] == -1.0
    assert h[0] == pytest.approx(-0.01962 - 1.0)


def test_constraint_vector_full_traction_at_standstill():
    track = demo_map()
    h = constraint_vector((100.0, 0.0), 1.0, track, "good", P.masses, P)
    assert h[2] == pytest.approx(167240 / 68200 - 0.35 * 9.81, abs=1e-9)
    assert h[2] == pytest.approx(-0.982, abs=1e-3)
    assert constraint_vector((100.0, 0.0), 1.2, track, "good", P.masses, P)[6] == pytest.approx(0.2)


def test_constraint_jacobian_matches_finite_differences():
    track = demo_map()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, v, u = rng.uniform(100, 7900), rng.uniform(0, 25), rng.uniform(-1, 1)
        J = constraint_jacobian(p, v, u, track, P.masses, P)
        for col, h in enumerate((1e-3, 1e-5, 1e-6)):
            x = np.array([p, v, u])
            e = np.zeros(3)
            e[col] = h
            # adhesion is piecewise constant; keep the position probe inside a segment
            mu = 0.3
            hp = constraint_rows(*(x + e), track, "good", P.masses, P, mu=mu)[:4]
            hm = constraint_rows(*(x - e), track, "good", P.masses, P, mu=mu)[:4]
            np.testing.assert_allclose(J[:, col], (hp - hm) / (2 * h), rtol=1e-5, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 8000), st.floats(0, 25), st.sampled_from(["good", "bad"]))
def test_lever_interval_is_admissible(p, v, cond):
    track = demo_map()
    lo, hi = lever_interval((p, v), track, cond, P.masses, P)
    assert -1.0 <= lo <= 0.0 <= hi <= 1.0
    for u in (lo, hi):
        h = constraint_rows(p, v, u, track, cond, P.masses, P)
        assert h[[0, 1, 2, 3, 5, 6]].max() <= 1e-12


def test_step_rk4_equilibrium_and_kinematics():
    # lever that exactly balances resistance at 10 m/s on the flat
    u_eq = resistance_force(P, 10.0, 0.0, M) / traction_force_envelope(P, 10.0)
    x = step_rk4((50.0, 10.0), u_eq, 1.0, M, FLAT, P)
    assert x.v == pytest.approx(10.0, abs=1e-12)
    assert x.p == pytest.approx(60.0, abs=1e-12)
    free = P.with_overrides(c_roll=0.0, rho_air=1e-300)
    x = step_rk4((0.0, 10.0), 0.0, 1.0, M, FLAT, free)
    assert tuple(x) == pytest.approx((10.0, 10.0))


def test_step_rk4_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_rk4((0.0, 0.0), 0.0, 0.0, M, FLAT, P)


def test_step_rk4_global_order_on_track():
    track = demo_map()

    def run(dt):
        x = (0.0, 0.0)
        for k in range(int(round(60 / dt))):
            x = step_rk4(x, 0.6 if k * dt < 30 else 0.1, dt, M, track, P, clamp=False)
        return np.array(x)

    ref = run(1e-3)
    errs = [np.abs(run(dt) - ref).max() for dt in (0.5, 0.25, 0.125)]
    assert errs[0] / errs[1] > 10 and errs[1] / errs[2] > 10


def test_open_loop_rest_stays_at_rest():
    traj = simulate_open_loop((10.0, 0.0), lambda t: 0.0, 0.0, 30.0, 0.1, M, FLAT, P)
    assert np.all(traj.v == 0.0) and np.all(traj.p == 10.0)


def test_open_loop_full_traction_is_monotone():
    traj = simulate_open_loop((0.0, 0.0), lambda t: 1.0, 0.0, 200.0, 0.1, M, FLAT, P)
    assert np.all(np.diff(traj.v) > 0)
    # approaches the speed where traction balances resistance
    from scipy.optimize import brentq
    v_eq = brentq(lambda v: traction_force_envelope(P, v) - resistance_force(P, v, 0.0, M), 1, 200)
    assert traj.v[-1] < v_eq


def test_open_loop_self_convergence():
    track = demo_map()

    def lever(t):
        return 0.5 if t < 30 else -0.2

    a = simulate_open_loop((0.0, 0.0), lever, 0.0, 60.0, 0.1, M, track, P)
    b = simulate_open_loop((0.0, 0.0), lever, 0.0, 60.0, 0.05, M, track, P)
    assert abs(a.p[-1] - b.p[-1]) < 1e-4
    assert len(a) == 601 and a.t[-1] == pytest.approx(60.0)


def test_with_overrides_ignores_none_and_validates():
    assert P.with_overrides(a_max=None) == P
    with pytest.raises(ValueError):
        P.with_overrides(a_max=-1.0)
    with pytest.raises(ValueError):
        MassInterval(10.0, 5.0)
