"""Closed-loop scenario runs over a whole route.

A scenario fixes which weather the references were planned for, how the
real weather changes along the run, an optional departure delay at the
route origin, and the true train mass. Scenario files look like::

    SCNv1 weather-switch
    REF good
    PLANT good
    SWITCH pos 2000 bad
    DELAY 0
    MASS 78200
    DT 0.1
    SEED 0

``SWITCH pos|time <threshold> <condition>`` switches the plant condition
once the position (or time) reaches the threshold; switches apply in file
order and their thresholds must not decrease. ``SEED`` is accepted and
stored; the simulation itself is deterministic.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dynamics import TrainParams
from .ltv import sample_reference
from .refsolve import reference_to_csv, solve_route
from .trackmap import TractionCondition
from .trackmpc import LEG_COLUMNS, MpcConfig, MpcState, Plant, run_leg

__all__ = [
    "ScenarioError",
    "Switch",
    "Scenario",
    "load_scenario",
    "read_scenario",
    "serialize_scenario",
    "bundled_scenario",
    "SimResult",
    "run_scenario",
    "metrics",
    "write_results",
]

PLANT_COLUMNS = ("t", "p", "v", "u", "h1", "h2", "h3", "h4", "h5", "h6", "h7")


class ScenarioError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Switch:
    kind: str
    threshold: float
    cond: TractionCondition

    def __post_init__(self):
        if self.kind not in ("pos", "time"):
            raise ScenarioError(f"switch kind must be 'pos' or 'time', not {self.kind!r}")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    reference: TractionCondition = TractionCondition.GOOD
    plant: TractionCondition = None
    switches: tuple = ()
    initial_delay: float = 0.0
    mass: float = 78200.0
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reference", TractionCondition(self.reference))
        if self.plant is None:
            object.__setattr__(self, "plant", self.reference)
        object.__setattr__(self, "plant", TractionCondition(self.plant))
        object.__setattr__(self, "switches", tuple(self.switches))
        if not self.initial_delay >= 0:
            raise ScenarioError("delay must be non-negative")
        if not self.dt > 0:
            raise ScenarioError("plant dt must be positive")
        for kind in ("pos", "time"):
            th = [s.threshold for s in self.switches if s.kind == kind]
            if any(b < a for a, b in zip(th, th[1:])):
                raise ScenarioError(f"{kind} switch thresholds must not decrease")

    def validate_mass(self, params):
        if self.mass not in params.masses:
            raise ScenarioError(
                f"plant mass {self.mass} outside [{params.masses.m_min}, {params.masses.m_max}]")

    def condition_at(self, t, p):
        cond = self.plant
        for s in self.switches:
            if (p if s.kind == "pos" else t) >= s.threshold:
                cond = s.cond
        return cond


def load_scenario(text):
    name = None
    kw = {"switches": []}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *f = line.split()
        try:
            if tag == "SCNv1":
                if name is not None:
                    raise ScenarioError("duplicate header", lineno)
                name = " ".join(f) or "scenario"
            elif name is None:
                raise ScenarioError("missing SCNv1 header", lineno)
            elif tag in ("REF", "PLANT") and len(f) == 1:
                kw["reference" if tag == "REF" else "plant"] = TractionCondition.parse(f[0])
            elif tag == "SWITCH" and len(f) == 3:
                kw["switches"].append(Switch(f[0], float(f[1]), TractionCondition.parse(f[2])))
            elif tag in ("DELAY", "MASS", "DT") and len(f) == 1:
                key = {"DELAY": "initial_delay", "MASS": "mass", "DT": "dt"}[tag]
                kw[key] = float(f[0])
            elif tag == "SEED" and len(f) == 1:
                kw["seed"] = int(f[0])
            else:
                raise ScenarioError(f"malformed record {line!r}", lineno)
        except ScenarioError as exc:
            if exc.line is None:
                raise ScenarioError(str(exc), lineno) from None
            raise
        except ValueError as exc:
            raise ScenarioError(str(exc), lineno) from None
    if name is None:
        raise ScenarioError("missing SCNv1 header")
    return Scenario(name=name, **kw)


def read_scenario(path):
    return load_scenario(Path(path).read_text(encoding="utf-8"))


def serialize_scenario(s):
    lines = [f"SCNv1 {s.name}", f"REF {s.reference.value}", f"PLANT {s.plant.value}"]
    lines += [f"SWITCH {w.kind} {w.threshold!r} {w.cond.value}" for w in s.switches]
    lines += [f"DELAY {s.initial_delay!r}", f"MASS {s.mass!r}", f"DT {s.dt!r}",
              f"SEED {s.seed}"]
    return "\n".join(lines) + "\n"


def bundled_scenario(name):
    """One of the shipped scenarios: ``good``, ``weather`` or ``delay``."""
    path = resources.files("trainmpc.data").joinpath(f"{name}.scn")
    if not path.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return load_scenario(path.read_text(encoding="utf-8"))


@dataclass
class SimResult:
    scenario: Scenario
    legs: list
    plant: np.ndarray
    references: list
    metrics: dict = field(default_factory=dict)

    @property
    def leg_rows(self):
        return np.vstack([r.rows for r in self.legs]) if self.legs else np.zeros((0, 15))


def _align(t, t0, t_step):
    """First control instant of a reference starting at ``t0`` not before ``t``."""
    k = max(0, math.ceil((t - t0) / t_step - 1e-9))
    return t0 + k * t_step


def run_scenario(s, track, params=None, cfg=None, refs=None, min_dwell=10.0, ref_opts=None):
    """Run the whole route in closed loop.

    The train waits at the route origin for ``initial_delay`` seconds past
    the scheduled departure. At each station it stands still until the
    later of the scheduled departure and ``min_dwell`` after its actual
    arrival.
    """
    params = params or TrainParams()
    cfg = cfg or MpcConfig(plant_dt=s.dt)
    if abs(cfg.plant_dt - s.dt) > 1e-12:
        raise ScenarioError("scenario plant dt differs from the controller configuration")
    s.validate_mass(params)
    if refs is None:
        refs = solve_route(track, s.reference, params, opts=ref_opts)
    plant = Plant(track, params, s.mass, s.dt, s.condition_at, state=(0.0, 0.0), t=0.0)
    legs = []
    t_go = _align(refs[0].t[0] + s.initial_delay, refs[0].t[0], cfg.t_step)
    for i, ref in enumerate(refs):
        if t_go > plant.t:
            plant.hold(t_go - plant.t)
        mpc = MpcState(sample_reference(ref, cfg.t_step, track, params), track, params)
        res = run_leg(mpc, plant, cfg)
        legs.append(res)
        if i + 1 < len(refs):
            station = track.stations[ref.leg.index]
            dep = max(station.departure_time, res.arrival_time + min_dwell)
            t_go = _align(dep, refs[i + 1].t[0], cfg.t_step)
    result = SimResult(s, legs, np.array(plant.trace, dtype=float).reshape(-1, 11), refs)
    result.metrics = metrics(result, track, params)
    return result


def metrics(result, track=None, params=None):
    """Headline numbers of a run, derived from the traces only."""
    rows = result.leg_rows
    if not len(rows):
        raise ValueError("empty trace")
    out = {
        "max_abs_ep": float(np.abs(rows[:, 6]).max()),
        "max_abs_ev": float(np.abs(rows[:, 7]).max()),
    }
    h = rows[:, 8:].max(axis=0)
    for i in range(7):
        out[f"max_h{i + 1}"] = float(h[i])
    out["max_h"] = float(h.max())
    out["max_traction_h"] = float(max(h[2], h[3]))
    if len(result.plant):
        hp = result.plant[:, 4:].max(axis=0)
        out["plant_max_h"] = float(hp.max())
    out["delays"] = [float(r.delay) for r in result.legs]
    out["arrival_offsets"] = [float(r.arrival_state.p - r.leg.end_pos) for r in result.legs]
    out["arrival_steps"] = [int(r.arrival_steps) for r in result.legs]
    # first instant after which |e_p| stays below 1 m for the rest of the run
    ep = np.abs(rows[:, 6])
    above = np.flatnonzero(ep >= 1.0)
    if above.size == 0:
        out["recovery_time"] = float(rows[0, 0])
    elif above[-1] + 1 < len(rows):
        out["recovery_time"] = float(rows[above[-1] + 1, 0])
    else:
        out["recovery_time"] = math.inf
    return out


def _fmt(x):
    return f"{x:.10g}"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _metrics_text(m):
    lines = []
    for key, val in m.items():
        if isinstance(val, list):
            val = " ".join(_fmt(v) for v in val)
        else:
            val = _fmt(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def _write_atomic(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_results(result, out_dir):
    """Write ``leg<i>.csv``, ``ref_leg<i>.csv``, ``plant.csv`` and ``metrics.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for res in result.legs:
        p = out / f"leg{res.leg.index}.csv"
        _write_atomic(p, _csv(LEG_COLUMNS, res.rows))
        written.append(p)
    for ref in result.references:
        p = out / f"ref_leg{ref.leg.index}.csv"
        _write_atomic(p, reference_to_csv(ref))
        written.append(p)
    p = out / "plant.csv"
    _write_atomic(p, _csv(PLANT_COLUMNS, result.plant))
    written.append(p)
    p = out / "metrics.txt"
    _write_atomic(p, f"scenario = {result.scenario.name}\n" + _metrics_text(result.metrics))
    written.append(p)
    return written
