"""Longitudinal train model, path constraints and the plant integrator.

State is ``x = (p, v)``; the lever ``u`` lies in [-1, 1] and scales the
speed-dependent traction/braking envelope ``k1*exp(-k2*v) + k3``.
All force/vector-field functions broadcast over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial
from typing import NamedTuple

import numpy as np

from .trackmap import (
    inclination_slope_at,
    smoothed_inclination_at,
    speed_limit_at,
    traction_at,
)

__all__ = [
    "TrainParams",
    "MassInterval",
    "State",
    "Trajectory",
    "resistance_force",
    "traction_force_envelope",
    "drift",
    "control_gain",
    "plant_accel",
    "constraint_rows",
    "constraint_vector",
    "constraint_jacobian",
    "lever_interval",
    "step_rk4",
    "simulate_open_loop",
]


@dataclass(frozen=True)
class TrainParams:
    """Physical train constants.

    Defaults are the regional train of the case study (68.2 t empty, up to
    20.5 t payload) with a passenger-comfort bound of 1 m/s^2.
    ``curve_decel`` is the deceleration assumed when tightening speed limits
    into braking curves; it must stay below the weakest braking capability
    of the train on the route.
    """

    rho_air: float = 1.2041
    c_air: float = 0.85
    area: float = 10.0
    c_roll: float = 0.002
    k1: float = 1.516e5
    k2: float = 0.1147
    k3: float = 1.564e4
    m_train: float = 68200.0
    m_maxload: float = 20500.0
    a_max: float = 1.0
    v_wind: float = 0.0
    gravity: float = 9.81
    eps_terminal: float = 5.0
    m_nominal: float = 78200.0
    curve_decel: float = 0.15

    def __post_init__(self):
        positive = ("rho_air", "area", "c_air", "k1", "k2", "k3", "m_train", "a_max",
                    "gravity", "m_nominal", "curve_decel")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("m_maxload", "c_roll", "eps_terminal"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def masses(self):
        return MassInterval(self.m_train, self.m_train + self.m_maxload)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass(frozen=True)
class MassInterval:
    m_min: float
    m_max: float

    def __post_init__(self):
        if not 0 < self.m_min <= self.m_max:
            raise ValueError("need 0 < m_min <= m_max")

    def __contains__(self, m):
        return self.m_min <= m <= self.m_max


class State(NamedTuple):
    p: float
    v: float


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    u: np.ndarray

    def __len__(self):
        return len(self.t)


def resistance_force(params, v, alpha, m):
    """Air, grade and rolling resistance in newtons."""
    air = 0.5 * params.rho_air * params.c_air * params.area * (v - params.v_wind) ** 2
    return air + m * params.gravity * np.sin(alpha) + params.c_roll * m * params.gravity


def traction_force_envelope(params, v):
    return params.k1 * np.exp(-params.k2 * v) + params.k3


def drift(x, m, alpha, params):
    """Unforced vector field ``f(x; m)``."""
    p, v = x
    return np.array([v, -resistance_force(params, v, alpha, m) / m])


def control_gain(x, m, params):
    """Input vector field ``g(x; m)``."""
    p, v = x
    return np.array([np.zeros_like(v), traction_force_envelope(params, v) / m])


def plant_accel(x, u, m, alpha, params):
    v = x[1]
    return (-resistance_force(params, v, alpha, m) + traction_force_envelope(params, v) * u) / m


def _f2(track, params, p, v, m):
    alpha = smoothed_inclination_at(track, p)
    return -resistance_force(params, v, alpha, m) / m


def constraint_rows(p, v, u, track, cond, masses, params, speed_limit=None, mu=None):
    """Vectorized path constraints; returns an array of shape ``(..., 7)``.

    Rows: comfort bound at the lightest and heaviest mass, adhesion bound at
    the lightest and heaviest mass, speed limit, lower and upper lever bound.
    ``speed_limit`` and ``mu`` override the map values (tightened limits,
    look-ahead adhesion).
    """
    p, v, u = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (p, v, u)))
    g = params.gravity
    f_lo = _f2(track, params, p, v, masses.m_min)
    f_hi = _f2(track, params, p, v, masses.m_max)
    force = traction_force_envelope(params, v)
    g_lo, g_hi = force / masses.m_min, force / masses.m_max
    if mu is None:
        mu = traction_at(track, p, cond)
    if speed_limit is None:
        speed_limit = speed_limit_at(track, p)
    return np.stack([
        f_lo + g_lo * u - params.a_max,
        -(f_hi + g_hi * u) - params.a_max,
        g_lo * u - mu * g,
        -g_hi * u - mu * g,
        v - speed_limit,
        -1.0 - u,
        u - 1.0,
    ], axis=-1)


def constraint_vector(x, u, track, cond, masses, params, speed_limit=None, mu=None):
    """The seven path constraints at one point; admissible iff all are <= 0."""
    return constraint_rows(float(x[0]), float(x[1]), float(u), track, cond, masses, params,
                           speed_limit=speed_limit, mu=mu)


def constraint_jacobian(p, v, u, track, masses, params):
    """Partial derivatives of rows 1-4 with respect to (p, v, u).

    Adhesion is treated as locally constant in ``p``. Broadcasts over its
    inputs and returns shape ``(..., 4, 3)``.
    """
    p, v, u = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (p, v, u)))
    alpha = smoothed_inclination_at(track, p)
    df_dp = -params.gravity * np.cos(alpha) * inclination_slope_at(track, p)
    air = params.rho_air * params.c_air * params.area * (v - params.v_wind)
    dforce = -params.k1 * params.k2 * np.exp(-params.k2 * v)
    force = traction_force_envelope(params, v)
    zero = np.zeros_like(v)
    rows = []
    for sign, m, acc in ((1, masses.m_min, True), (-1, masses.m_max, True),
                         (1, masses.m_min, False), (-1, masses.m_max, False)):
        dv = dforce * u / m - (air / m if acc else 0.0)
        rows.append(np.stack([sign * df_dp if acc else zero, sign * dv, sign * force / m], -1))
    return np.stack(rows, axis=-2)


def lever_interval(x, track, cond, masses, params):
    """Range of levers that keeps rows 1-4 and 6-7 of the constraints <= 0 at ``x``.

    Contains 0 while the unforced acceleration stays within ``a_max``.
    """
    p, v = float(x[0]), float(x[1])
    g = params.gravity
    mu = float(traction_at(track, p, cond))
    force = traction_force_envelope(params, v)
    f_lo = _f2(track, params, p, v, masses.m_min)
    f_hi = _f2(track, params, p, v, masses.m_max)
    hi = min(1.0, (params.a_max - f_lo) * masses.m_min / force, mu * g * masses.m_min / force)
    lo = max(-1.0, (-params.a_max - f_hi) * masses.m_max / force, -mu * g * masses.m_max / force)
    return float(lo), float(hi)


def _rhs(track, params, m, p, v, u, clamp, extrapolate=False):
    if extrapolate:
        p = np.clip(p, 0.0, track.total_length)
    alpha = smoothed_inclination_at(track, p)
    a = (-resistance_force(params, v, alpha, m) + traction_force_envelope(params, v) * u) / m
    if clamp:
        a = np.where((v <= 0.0) & (a < 0.0), 0.0, a)
    return v, a


def step_rk4(x, u, dt, m, track, params, clamp=True, extrapolate=False):
    """One classical Runge-Kutta step of the train dynamics.

    Inclination is read at each stage position. With ``clamp`` (the plant
    default) a stopped train cannot be pushed backwards by resistance or
    braking, and the velocity is clipped at zero after the step.
    ``x`` may hold arrays of positions/velocities for batched propagation.
    ``extrapolate`` continues the end segments beyond the map instead of
    raising; the optimizer needs it for perturbed states at the route ends.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p, v = x
    rhs = partial(_rhs, track, params, m, u=u, clamp=clamp, extrapolate=extrapolate)
    k1p, k1v = rhs(p, v)
    k2p, k2v = rhs(p + 0.5 * dt * k1p, v + 0.5 * dt * k1v)
    k3p, k3v = rhs(p + 0.5 * dt * k2p, v + 0.5 * dt * k2v)
    k4p, k4v = rhs(p + dt * k3p, v + dt * k3v)
    p_new = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if clamp:
        v_new = np.maximum(v_new, 0.0)
    if np.ndim(p_new) == 0:
        return State(float(p_new), float(v_new))
    return p_new, v_new


def simulate_open_loop(x0, u_of_t, t0, tf, dt, m, track, params):
    """Integrate the plant under a piecewise-constant lever schedule.

    ``u_of_t`` is called with the start time of every step. Returns samples
    at ``t0, t0 + dt, ..., tf``; the lever column holds the value applied
    on the step that starts at that sample (the last one repeats).
    """
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    n = int(round((tf - t0) / dt))
    t = t0 + dt * np.arange(n + 1)
    p = np.empty(n + 1)
    v = np.empty(n + 1)
    u = np.empty(n + 1)
    x = State(float(x0[0]), float(x0[1]))
    for k in range(n):
        p[k], v[k] = x
        u[k] = float(u_of_t(t[k]))
        x = step_rk4(x, u[k], dt, m, track, params)
    p[n], v[n] = x
    u[n] = u[n - 1] if n else float(u_of_t(t0))
    return Trajectory(t, p, v, u)
