import numpy as np
import pytest

from trainmpc.dynamics import State, TrainParams, constraint_rows
from trainmpc.ltv import sample_reference
from trainmpc.qpcore import solve_qp
from trainmpc.refsolve import compute_reference
from trainmpc.trackmap import Leg, TractionCondition, speed_cap_at
from trainmpc.trackmpc import (
    ControllerFault,
    MpcConfig,
    MpcState,
    Plant,
    _step_margins,
    build_qp,
    govern,
    mpc_step,
    run_leg,
    stop_curve,
)

P = TrainParams()
CFG = MpcConfig()
GOOD = TractionCondition.GOOD


@pytest.fixture(scope="module")
def sampled(good_refs, track):
    return [sample_reference(r, 1.0, track, P) for r in good_refs]


def test_defaults():
    assert (CFG.horizon, CFG.t_step, CFG.r_weight, CFG.q_weight) == (20, 1.0, 0.01, 1.0)
    assert CFG.substeps == 10


@pytest.mark.parametrize("kw", [dict(horizon=0), dict(t_step=-1.0), dict(plant_dt=0.3)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MpcConfig(**kw)


def test_qp_dimensions_and_horizon_shrink(sampled, track):
    s = sampled[0]
    mpc = MpcState(s, track, P)
    prob = build_qp(mpc, np.zeros(2), CFG)
    assert prob.n == 2 * 20 and prob.m == 8 * 20
    mpc.j = len(s) - 5
    prob = build_qp(mpc, np.zeros(2), CFG)
    assert prob.n == 10 and prob.m == 40
    mpc.j = len(s) - 1
    assert build_qp(mpc, np.zeros(2), CFG).n == 2


def test_zero_deviation_is_a_fixed_point(sampled, track):
    s = sampled[1]
    mpc = MpcState(s, track, P)
    for j in (0, 10, 50, len(s) - 1):
        mpc.j = j
        sol = solve_qp(build_qp(mpc, np.zeros(2), CFG))
        assert np.abs(sol.z).max() <= 1e-8
        u, info = mpc_step(mpc, s.x(j), GOOD, CFG)
        assert u == pytest.approx(s.u[j], abs=1e-8)
        assert info["j"] == j and mpc.j == j + 1


def test_lagging_train_pushes_forward(sampled, track):
    s = sampled[0]
    mpc = MpcState(s, track, P)
    for j in (60, 80, 100):
        mpc.j = j
        x = s.x(j)
        behind = State(max(x[0] - 280.0, 0.0), x[1])
        u, info = mpc_step(mpc, behind, GOOD, CFG)
        assert -1.0 <= u <= 1.0
        assert u >= s.u[j] - 1e-9


def test_final_sample_still_returns_lever(sampled, track):
    s = sampled[2]
    mpc = MpcState(s, track, P)
    mpc.j = len(s) - 1
    u, _ = mpc_step(mpc, s.x(len(s) - 1), GOOD, CFG)
    assert -1.0 <= u <= 1.0
    assert mpc.exhausted


def test_overrun_is_a_fault(sampled, track):
    s = sampled[0]
    mpc = MpcState(s, track, P)
    mpc.j = len(s)
    with pytest.raises(ControllerFault, match="overran"):
        mpc_step(mpc, State(s.leg.end_pos + 20.0, 0.0), GOOD, CFG)


def test_stop_curve_shape(track):
    curve = stop_curve(track, P, P.masses, 2000.0)
    assert curve(2000.0) == 0.0 and curve(2100.0) == 0.0
    p = np.linspace(1500.0, 2000.0, 101)
    v = curve(p)
    assert np.all(np.diff(v) <= 0.0)
    assert curve(500.0) == np.inf or curve(500.0) > 20.0


def test_governor_keeps_step_admissible(track):
    def cap(p):
        return speed_cap_at(track, p, P.curve_decel)

    for x, u in [((2950.0, 16.0), 1.0), ((400.0, 0.0), -1.0), ((1000.0, 12.0), 0.9)]:
        lever = govern(x, u, track, GOOD, P, P.masses, CFG, cap)
        up, dn = _step_margins(x, [lever], track, GOOD, P, P.masses, CFG, cap)
        assert up[0] <= 1e-9 and dn[0] <= 1e-9
        assert -1.0 <= lever <= 1.0


@pytest.mark.parametrize("mass", [P.masses.m_min, P.masses.m_max])
def test_mass_interval_robustness(good_refs, track, mass):
    ref = good_refs[1]
    s = sample_reference(ref, 1.0, track, P)
    plant = Plant(track, P, mass, state=(ref.p[0], 0.0), t=ref.t[0])
    res = run_leg(MpcState(s, track, P), plant, CFG)
    assert res.h_max.max() <= 1e-6
    assert np.array(plant.trace)[:, 4:].max() <= 1e-6
    assert abs(res.arrival_state.p - ref.leg.end_pos) <= P.eps_terminal
    assert res.max_abs_ep <= 10.0


def test_zero_length_leg_gives_empty_result(track):
    ref = compute_reference(Leg(0, 2000.0, 2000.0, 0.0, 30.0), track, GOOD, P)
    s = sample_reference(ref, 1.0, track, P)
    plant = Plant(track, P, P.m_nominal, state=(2000.0, 0.0))
    res = run_leg(MpcState(s, track, P), plant, CFG)
    assert res.rows.shape == (0, 15) and not plant.trace


def test_plant_hold_and_advance(track):
    plant = Plant(track, P, P.m_nominal, state=(100.0, 0.0))
    plant.hold(2.0)
    assert plant.t == pytest.approx(2.0) and len(plant.trace) == 20
    assert all(row[3] == 0.0 for row in plant.trace)
    plant.advance(0.5, 1.0)
    assert plant.state.v > 0 and plant.t == pytest.approx(3.0)
    h = plant.constraints(0.5)
    assert h.shape == (7,)
    with pytest.raises(ValueError):
        Plant(track, P, 1000.0)


def test_leg_rows_match_constraints(scenario_runs, track):
    res = scenario_runs("good")
    rows = res.legs[0].rows
    h = constraint_rows(rows[:, 1], rows[:, 2], rows[:, 3], track, GOOD, P.masses, P)
    np.testing.assert_allclose(rows[:, 8:], h)
    np.testing.assert_allclose(rows[:, 6], rows[:, 1] - rows[:, 4])
