import numpy as np
import pytest

from trainmpc.dynamics import TrainParams, constraint_rows
from trainmpc.refsolve import (
    InfeasibleLeg,
    NoConvergence,
    SqpOptions,
    compute_reference,
    densify,
    initial_guess,
    node_count,
    reference_from_csv,
    reference_to_csv,
    solve_reference,
    transcribe,
)
from trainmpc.trackmap import Leg, TractionCondition, leg_between, load_map

P = TrainParams()
FLAT = load_map("MAPv1 1200\nSEG 0 0 20 0.35 0.15\nSTA 1000 120 0\n")
FLAT_LEG = Leg(0, 0.0, 1000.0, 0.0, 120.0)


@pytest.fixture(scope="module")
def flat_ref():
    return compute_reference(FLAT_LEG, FLAT, TractionCondition.GOOD, P)


def test_node_count():
    assert node_count(120.0) == 40
    assert node_count(9.0) == 3
    with pytest.raises(ValueError):
        node_count(3.0)


def test_transcription_dimensions():
    nlp = transcribe(Leg(0, 0.0, 50.0, 0.0, 20.0), FLAT, "good", P, grid_size=3)
    assert nlp.n_vars == 8
    assert nlp.n_defects == 4
    assert nlp.n_path_rows == 35
    z = nlp.pack(np.zeros((3, 2)), np.zeros(2))
    assert nlp.path_constraints(z).shape == (5, 7)
    assert nlp.equality_residuals(z).size >= nlp.n_defects


def test_flat_leg_converges(flat_ref):
    ref = flat_ref
    assert ref.info["max_defect"] <= 1e-8
    assert abs(ref.p[-1] - 1000.0) <= P.eps_terminal
    assert ref.v[-1] <= 0.05
    # accelerate, cruise, brake
    assert ref.u[0] > 0 and ref.u[-2] < 0
    assert ref.v.max() > 1000.0 / 120.0
    h = constraint_rows(ref.p, ref.v, ref.u, FLAT, "good", P.masses, P)
    assert h.max() <= 1e-6


def test_flat_leg_dense_samples(flat_ref):
    grid = flat_ref.grid
    at_nodes = np.interp(grid.nodes, flat_ref.t, flat_ref.p)
    on_grid = np.isclose((grid.nodes / 0.1) % 1, 0) | np.isclose((grid.nodes / 0.1) % 1, 1)
    np.testing.assert_allclose(at_nodes[on_grid], grid.states[on_grid, 0], atol=1e-6)
    # right-continuous piecewise constant lever
    for k, t in enumerate(flat_ref.t[:-1]):
        i = min(np.searchsorted(grid.nodes, t, side="right") - 1, grid.controls.size - 1)
        assert flat_ref.u[k] == grid.controls[i]


def test_densify_resolution_independent(flat_ref):
    coarse = densify(flat_ref.grid, FLAT, P, dt=1.0)
    fine = densify(flat_ref.grid, FLAT, P, dt=0.1)
    np.testing.assert_allclose(coarse.p, fine.p[::10], atol=1e-3)


def test_impossible_timetable_is_infeasible():
    with pytest.raises(InfeasibleLeg):
        compute_reference(Leg(0, 0.0, 1000.0, 0.0, 20.0), FLAT, "good", P)


def test_iteration_cap_raises_no_convergence():
    with pytest.raises(NoConvergence) as exc:
        compute_reference(FLAT_LEG, FLAT, "good", P, opts=SqpOptions(max_iter=1))
    assert exc.value.grid is not None


def test_zero_length_leg():
    ref = compute_reference(Leg(0, 500.0, 500.0, 0.0, 30.0), FLAT, "good", P)
    assert np.all(ref.u == 0.0) and np.all(ref.v == 0.0) and np.all(ref.p == 500.0)


def test_initial_guess_properties():
    guess = initial_guess(FLAT_LEG, FLAT, P)
    assert guess.size == 40
    assert np.all(np.abs(guess.controls) <= 1.0)
    assert guess.states[0, 0] == 0.0 and guess.states[-1, 0] == pytest.approx(1000.0)
    nlp = transcribe(FLAT_LEG, FLAT, "good", P)
    z = nlp.pack(guess.states, guess.controls)
    assert nlp.max_defect(z) < 0.01 * FLAT_LEG.length


def test_initial_guess_short_leg_is_triangular():
    leg = Leg(0, 0.0, 120.0, 0.0, 30.0)
    guess = initial_guess(leg, FLAT, P, grid_size=11)
    v = guess.states[:, 1]
    peak = int(np.argmax(v))
    assert np.all(np.diff(v[:peak + 1]) > 0) and np.all(np.diff(v[peak:]) < 0)


def test_solve_reference_accepts_guess():
    nlp = transcribe(FLAT_LEG, FLAT, "good", P)
    grid, info = solve_reference(nlp, guess=initial_guess(FLAT_LEG, FLAT, P))
    assert info["max_defect"] <= 1e-8
    assert grid.states[0, 0] == 0.0


def test_csv_round_trip(flat_ref):
    text = reference_to_csv(flat_ref, 1.0)
    assert text.splitlines()[0] == "t,p_ref,v_ref,u_ref"
    back = reference_from_csv(text)
    assert back.t.size == 121
    np.testing.assert_allclose(back.p, flat_ref.p[::10], rtol=1e-9)


def test_route_legs_chain(good_refs, track):
    for a, b in zip(good_refs, good_refs[1:]):
        assert b.leg.start_pos == a.p[-1]
        assert b.t[0] == leg_between(track, b.leg.index).departure_time


def test_references_move_forward(good_refs):
    for ref in good_refs:
        assert np.all(np.diff(ref.p) >= -1e-9)
        assert np.all(np.abs(ref.u) <= 1.0)
