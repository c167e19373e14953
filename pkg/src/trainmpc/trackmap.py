"""Track-condition-and-topography map.

A map is a piecewise-constant description of the line: every segment carries
an inclination, a speed limit and two adhesion levels (good and bad weather).
The timetable lists the stations in travel order.

The line-oriented file format is::

    MAPv1 <total_length_m>
    SEG <start_m> <alpha_rad> <vmax_mps> <mu_good> <mu_bad>
    STA <pos_m> <arrival_s> <dwell_s>

``#`` starts a comment line. Lookups at a breakpoint return the value of the
segment to the right.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "MapError",
    "TractionCondition",
    "TrackSegment",
    "Station",
    "Leg",
    "Map",
    "load_map",
    "read_map",
    "serialize_map",
    "demo_map",
    "inclination_at",
    "smoothed_inclination_at",
    "inclination_slope_at",
    "speed_limit_at",
    "speed_cap_at",
    "traction_at",
    "min_traction_between",
    "leg_between",
]

DEFAULT_RAMP_WIDTH = 50.0
RAMP_ROUNDING = 0.2


class MapError(ValueError):
    """Raised for malformed map text or violated map invariants."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TractionCondition(enum.Enum):
    GOOD = "good"
    BAD = "bad"

    @classmethod
    def parse(cls, text):
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown traction condition {text!r}") from None


@dataclass(frozen=True)
class TrackSegment:
    start_pos: float
    inclination: float
    speed_limit: float
    traction_good: float
    traction_bad: float


@dataclass(frozen=True)
class Station:
    position: float
    arrival_time: float
    dwell_time: float = 0.0

    @property
    def departure_time(self):
        return self.arrival_time + self.dwell_time


@dataclass(frozen=True)
class Leg:
    """Route section that ends with a stop at station ``index``."""

    index: int
    start_pos: float
    end_pos: float
    departure_time: float
    arrival_time: float

    @property
    def length(self):
        return self.end_pos - self.start_pos

    @property
    def duration(self):
        return self.arrival_time - self.departure_time


@dataclass(frozen=True, eq=False)
class Map:
    """Validated, immutable track map.

    Parameters
    ----------
    segments : sequence of TrackSegment
        Ordered by ``start_pos``; the first one starts at 0.
    stations : sequence of Station
        Ordered by position and arrival time.
    total_length : float
        Route length in meters.
    ramp_width : float
        Width of the linear ramp that smooths every inclination step. The
        smoothed profile is what the dynamics see; it makes ``d alpha / dp``
        finite.
    """

    segments: tuple
    stations: tuple
    total_length: float
    ramp_width: float = DEFAULT_RAMP_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "stations", tuple(self.stations))
        _validate(self)
        segs = self.segments
        object.__setattr__(self, "_starts", np.array([s.start_pos for s in segs]))
        object.__setattr__(self, "_alpha", np.array([s.inclination for s in segs]))
        object.__setattr__(self, "_vmax", np.array([s.speed_limit for s in segs]))
        object.__setattr__(self, "_mu", {
            TractionCondition.GOOD: np.array([s.traction_good for s in segs]),
            TractionCondition.BAD: np.array([s.traction_bad for s in segs]),
        })
        jumps = np.diff(self._alpha)
        keep = jumps != 0.0
        object.__setattr__(self, "_ramp_centers", self._starts[1:][keep])
        object.__setattr__(self, "_ramp_jumps", jumps[keep])

    def __eq__(self, other):
        if not isinstance(other, Map):
            return NotImplemented
        return (self.segments, self.stations, self.total_length, self.ramp_width) == (
            other.segments, other.stations, other.total_length, other.ramp_width)

    def __hash__(self):
        return hash((self.segments, self.stations, self.total_length, self.ramp_width))

    @property
    def breakpoints(self):
        return self._starts.copy()

    def segment_index(self, p):
        """Index of the segment containing ``p`` (right-hand rule at breakpoints)."""
        p = self._check(p)
        return np.searchsorted(self._starts, p, side="right") - 1

    def _check(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > self.total_length):
            bad = p[(p < 0.0) | (p > self.total_length) | ~np.isfinite(p)] if p.ndim else p
            raise MapError(f"position {np.ravel(bad)[0]!r} outside [0, {self.total_length}]")
        return p


def _validate(track):
    segs, stas, length = track.segments, track.stations, track.total_length
    if not (math.isfinite(length) and length > 0):
        raise MapError("total_length must be positive")
    if not track.ramp_width > 0:
        raise MapError("ramp_width must be positive")
    if not segs:
        raise MapError("map needs at least one segment")
    if segs[0].start_pos != 0.0:
        raise MapError("first segment must start at 0")
    for a, b in zip(segs, segs[1:]):
        if not b.start_pos > a.start_pos:
            raise MapError(
                f"overlapping segments: start {b.start_pos} does not follow {a.start_pos}")
    if segs[-1].start_pos >= length:
        raise MapError("last segment starts beyond total_length")
    for s in segs:
        if not s.speed_limit > 0:
            raise MapError(f"speed limit must be positive (segment at {s.start_pos})")
        if not 0 < s.traction_bad <= s.traction_good <= 1:
            raise MapError(
                f"traction must satisfy 0 < bad <= good <= 1 (segment at {s.start_pos})")
        if not abs(s.inclination) < math.pi / 4:
            raise MapError(f"inclination out of range (segment at {s.start_pos})")
    for st in stas:
        if not 0 <= st.position <= length:
            raise MapError(f"station at {st.position} outside the route")
        if st.dwell_time < 0:
            raise MapError(f"negative dwell time at station {st.position}")
    for a, b in zip(stas, stas[1:]):
        if not b.position > a.position:
            raise MapError("station positions must strictly increase")
        if not b.arrival_time > a.arrival_time:
            raise MapError("timetable arrival times must strictly increase")
    if stas and stas[0].arrival_time <= 0:
        raise MapError("first arrival time must be positive")


def load_map(text, ramp_width=DEFAULT_RAMP_WIDTH):
    """Parse map file contents into a validated :class:`Map`."""
    length = None
    segments, stations = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *fields = line.split()
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise MapError(f"bad number in {line!r}", lineno) from None
        if tag == "MAPv1":
            if length is not None:
                raise MapError("duplicate header", lineno)
            if len(values) != 1:
                raise MapError("header needs exactly one field", lineno)
            length = values[0]
        elif length is None:
            raise MapError("missing MAPv1 header", lineno)
        elif tag == "SEG":
            if len(values) != 5:
                raise MapError("SEG needs 5 fields", lineno)
            segments.append(TrackSegment(*values))
        elif tag == "STA":
            if len(values) != 3:
                raise MapError("STA needs 3 fields", lineno)
            stations.append(Station(*values))
        else:
            raise MapError(f"unknown record {tag!r}", lineno)
    if length is None:
        raise MapError("missing MAPv1 header")
    return Map(segments, stations, length, ramp_width=ramp_width)


def read_map(path, ramp_width=DEFAULT_RAMP_WIDTH):
    return load_map(Path(path).read_text(encoding="utf-8"), ramp_width=ramp_width)


def serialize_map(track):
    lines = [f"MAPv1 {track.total_length!r}"]
    for s in track.segments:
        lines.append(
            f"SEG {s.start_pos!r} {s.inclination!r} {s.speed_limit!r} "
            f"{s.traction_good!r} {s.traction_bad!r}")
    for st in track.stations:
        lines.append(f"STA {st.position!r} {st.arrival_time!r} {st.dwell_time!r}")
    return "\n".join(lines) + "\n"


def demo_map():
    """The bundled synthetic four-station line."""
    text = resources.files("trainmpc.data").joinpath("demo.map").read_text(encoding="utf-8")
    return load_map(text)


def _scalar_or_array(p, out):
    return float(np.reshape(out, ())) if np.ndim(p) == 0 else out


def inclination_at(track, p):
    """Piecewise-constant inclination in radians."""
    return _scalar_or_array(p, track._alpha[track.segment_index(p)])


def _ramp_antiderivative(y, w):
    return np.where(y < -0.5 * w, 0.0,
                    np.where(y <= 0.5 * w, (y + 0.5 * w) ** 2 / (2 * w), y))


def _unit_ramp(y, w):
    return np.clip(y / w + 0.5, 0.0, 1.0)


def smoothed_inclination_at(track, p):
    """Inclination with each step replaced by a ramp of ``ramp_width``.

    The ramp is linear in its middle; its two corners are rounded over
    ``RAMP_ROUNDING * ramp_width`` (the linear ramp averaged over a sliding
    window of that length), which makes the profile continuously
    differentiable. Away from ramps this equals :func:`inclination_at`.
    """
    p = track._check(p)
    w = track.ramp_width
    d = RAMP_ROUNDING * w
    y = p[..., None] - track._ramp_centers
    frac = (_ramp_antiderivative(y + 0.5 * d, w) - _ramp_antiderivative(y - 0.5 * d, w)) / d
    out = track._alpha[0] + (frac * track._ramp_jumps).sum(axis=-1)
    return _scalar_or_array(p, out)


def inclination_slope_at(track, p):
    """Derivative of :func:`smoothed_inclination_at` with respect to position."""
    p = track._check(p)
    w = track.ramp_width
    d = RAMP_ROUNDING * w
    y = p[..., None] - track._ramp_centers
    dfrac = (_unit_ramp(y + 0.5 * d, w) - _unit_ramp(y - 0.5 * d, w)) / d
    out = (dfrac * track._ramp_jumps).sum(axis=-1)
    return _scalar_or_array(p, out)


def speed_limit_at(track, p):
    return _scalar_or_array(p, track._vmax[track.segment_index(p)])


def speed_cap_at(track, p, decel):
    """Speed limit tightened by constant-deceleration braking curves.

    Returns ``min(vmax(p), min_q sqrt(vmax(q)**2 + 2*decel*(q - p)))`` over
    all breakpoints ``q > p``, so a train below the cap can always reach every
    lower limit ahead by braking at ``decel``.
    """
    p = track._check(p)
    cap = track._vmax[np.searchsorted(track._starts, p, side="right") - 1]
    ahead = track._starts[None, 1:] - p[..., None]
    curves = np.sqrt(track._vmax[1:] ** 2 + 2.0 * decel * np.maximum(ahead, 0.0))
    curves = np.where(ahead > 0.0, curves, np.inf)
    if curves.shape[-1]:
        cap = np.minimum(cap, curves.min(axis=-1))
    return _scalar_or_array(p, cap)


def speed_cap_slope_at(track, p, decel):
    """Derivative of :func:`speed_cap_at` (zero on flat parts of the cap)."""
    p = track._check(p)
    seg = track._vmax[np.searchsorted(track._starts, p, side="right") - 1]
    ahead = track._starts[None, 1:] - p[..., None]
    curves = np.sqrt(track._vmax[1:] ** 2 + 2.0 * decel * np.maximum(ahead, 0.0))
    curves = np.where(ahead > 0.0, curves, np.inf)
    if not curves.shape[-1]:
        return _scalar_or_array(p, np.zeros_like(p))
    best = curves.min(axis=-1)
    slope = np.where(best < seg, -decel / np.where(np.isfinite(best), best, 1.0), 0.0)
    return _scalar_or_array(p, slope)


def traction_at(track, p, cond):
    return _scalar_or_array(p, track._mu[TractionCondition(cond)][track.segment_index(p)])


def min_traction_between(track, p0, p1, cond):
    """Smallest adhesion level on the closed interval [p0, p1]."""
    p1 = min(max(p1, p0), track.total_length)
    i0, i1 = track.segment_index(p0), track.segment_index(p1)
    return float(track._mu[TractionCondition(cond)][i0:i1 + 1].min())


def leg_between(track, i):
    """Route leg that ends at station ``i``."""
    n = len(track.stations)
    if not 0 <= i < n:
        raise IndexError(f"station index {i} out of range for {n} stations")
    end = track.stations[i]
    if i == 0:
        start_pos, dep = 0.0, 0.0
    else:
        prev = track.stations[i - 1]
        start_pos, dep = prev.position, prev.departure_time
    return Leg(i, start_pos, end.position, dep, end.arrival_time)
