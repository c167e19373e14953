import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainmpc.trackmap import (
    Map,
    MapError,
    Station,
    TrackSegment,
    TractionCondition,
    demo_map,
    inclination_at,
    inclination_slope_at,
    leg_between,
    load_map,
    min_traction_between,
    read_map,
    serialize_map,
    smoothed_inclination_at,
    speed_cap_at,
    speed_limit_at,
    traction_at,
)

MINIMAL = "MAPv1 1000\nSEG 0 0 20 0.35 0.15\nSTA 1000 120 0\n"
STEP = "MAPv1 1000\nSEG 0 0 20 0.35 0.15\nSEG 500 0.01 15 0.30 0.12\nSEG 800 0 20 0.35 0.15\n"


@pytest.fixture
def step():
    return load_map(STEP)


def test_minimal_map():
    m = load_map(MINIMAL)
    assert len(m.segments) == 1 and len(m.stations) == 1
    assert m.total_length == 1000.0


def test_overlapping_segments_rejected():
    text = "MAPv1 1000\nSEG 0 0 20 0.35 0.15\nSEG 500 0 20 0.3 0.1\nSEG 400 0 20 0.3 0.1\n"
    with pytest.raises(MapError, match="overlapping"):
        load_map(text)


def test_demo_map_shape_and_round_trip():
    m = demo_map()
    assert len(m.segments) == 11 and len(m.stations) == 4
    assert m.total_length == 8000.0
    assert load_map(serialize_map(m)) == m


@pytest.mark.parametrize("text, needle", [
    ("SEG 0 0 20 0.3 0.1\n", "missing MAPv1"),
    ("MAPv1 100\nMAPv1 100\n", "duplicate"),
    ("MAPv1 100\nSEG 0 0 20 0.3\n", "5 fields"),
    ("MAPv1 100\nSEG 0 0 x 0.3 0.1\n", "bad number"),
    ("MAPv1 100\nFOO 1\n", "unknown record"),
    ("MAPv1 100\nSEG 5 0 20 0.3 0.1\n", "start at 0"),
    ("MAPv1 100\nSEG 0 0 -1 0.3 0.1\n", "speed limit"),
    ("MAPv1 100\nSEG 0 0 20 0.1 0.3\n", "traction"),
    ("MAPv1 100\nSEG 0 0 20 0.3 0.1\nSTA 200 10 0\n", "outside the route"),
    ("MAPv1 100\nSEG 0 0 20 0.3 0.1\nSTA 50 10 0\nSTA 60 5 0\n", "arrival times"),
])
def test_invalid_maps(text, needle):
    with pytest.raises(MapError, match=needle):
        load_map(text)


def test_map_error_names_line():
    with pytest.raises(MapError) as exc:
        load_map("MAPv1 100\n# comment\nSEG 0 0 abc 0.3 0.1\n")
    assert exc.value.line == 3


def test_read_map_from_file(tmp_path):
    path = tmp_path / "m.map"
    path.write_text(MINIMAL)
    assert read_map(path) == load_map(MINIMAL)


def test_constant_lookups(step):
    assert inclination_at(step, 250.0) == 0.0
    assert inclination_at(step, 600.0) == 0.01
    assert speed_limit_at(step, 250.0) == 20.0
    assert traction_at(step, 250.0, TractionCondition.GOOD) == 0.35
    assert traction_at(step, 250.0, TractionCondition.BAD) == 0.15


def test_breakpoint_takes_right_segment(step):
    assert inclination_at(step, 500.0) == 0.01
    assert speed_limit_at(step, 500.0) == 15.0
    assert traction_at(step, 500.0, "good") == 0.30


def test_out_of_range_lookup(step):
    with pytest.raises(MapError):
        speed_limit_at(step, 1000.5)
    with pytest.raises(MapError):
        inclination_at(step, -1.0)


def test_slope_values(step):
    assert inclination_slope_at(step, 250.0) == 0.0
    assert inclination_slope_at(step, 0.0) == 0.0
    assert inclination_slope_at(step, 500.0) == pytest.approx(0.0002, rel=1e-12)
    assert inclination_slope_at(step, 800.0) == pytest.approx(-0.0002, rel=1e-12)


def test_smoothed_profile_ramps(step):
    assert smoothed_inclination_at(step, 500.0) == pytest.approx(0.005)
    assert smoothed_inclination_at(step, 400.0) == 0.0
    assert smoothed_inclination_at(step, 650.0) == pytest.approx(0.01)


def test_slope_integrates_to_jump(step):
    p = np.linspace(400.0, 600.0, 20001)
    s = inclination_slope_at(step, p)
    integral = np.sum(0.5 * (s[1:] + s[:-1]) * np.diff(p))
    assert integral == pytest.approx(0.01, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 999.0))
def test_slope_is_derivative_of_smoothed_profile(p):
    track = load_map(STEP)
    h = 1e-4
    fd = (smoothed_inclination_at(track, p + h) - smoothed_inclination_at(track, p - h)) / (2 * h)
    assert fd == pytest.approx(inclination_slope_at(track, p), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 8000.0))
def test_braking_cap_bounds(p):
    track = demo_map()
    cap = speed_cap_at(track, p, 0.15)
    assert 0.0 < cap <= speed_limit_at(track, p)


def test_braking_cap_reaches_lower_limit_ahead():
    track = demo_map()
    # 15 m/s segment starts at 3100; 100 m before it the cap follows the curve
    assert speed_cap_at(track, 3000.0, 0.15) == pytest.approx(np.sqrt(15 ** 2 + 2 * 0.15 * 100))
    assert speed_cap_at(track, 3100.0, 0.15) == 15.0


def test_min_traction_between():
    track = demo_map()
    assert min_traction_between(track, 0.0, 1500.0, "good") == 0.30
    assert min_traction_between(track, 100.0, 200.0, "bad") == 0.15


def test_leg_between():
    track = demo_map()
    leg0 = leg_between(track, 0)
    assert (leg0.start_pos, leg0.departure_time, leg0.end_pos) == (0.0, 0.0, 2000.0)
    leg1 = leg_between(track, 1)
    assert leg1.start_pos == 2000.0
    assert leg1.departure_time == 170.0 + 30.0
    assert leg1.duration == 340.0 - 200.0
    with pytest.raises(IndexError):
        leg_between(track, 4)


def test_map_is_immutable_and_hashable():
    m = demo_map()
    assert hash(m) == hash(demo_map())
    with pytest.raises(AttributeError):
        m.total_length = 5.0


def test_direct_construction_validates():
    with pytest.raises(MapError):
        Map([TrackSegment(0.0, 0.0, 20.0, 0.3, 0.1)], [Station(50.0, 10.0, -1.0)], 100.0)
