"""Linearization of the train dynamics along a reference and exact ZOH discretization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .trackmap import inclination_slope_at, smoothed_inclination_at

__all__ = [
    "LtvSample",
    "DiscreteLtv",
    "SampledReference",
    "jacobian_terms",
    "linearize_at",
    "discretize",
    "sample_reference",
]


@dataclass(frozen=True)
class LtvSample:
    """Nonzero entries of ``A_lin = [[0, 1], [a21, a22]]`` and ``b_lin = (0, b2)``."""

    a21: float
    a22: float
    b2: float
    t: float = 0.0

    @property
    def A(self):
        return np.array([[0.0, 1.0], [self.a21, self.a22]])

    @property
    def b(self):
        return np.array([0.0, self.b2])


@dataclass(frozen=True)
class DiscreteLtv:
    Ad: np.ndarray
    bd: np.ndarray
    t_step: float

    def __len__(self):
        return len(self.Ad)


def jacobian_terms(p, v, u, track, params, m):
    """``(a21, a22, b2)`` at arbitrary points; broadcasts over arrays."""
    alpha = smoothed_inclination_at(track, p)
    a21 = -params.gravity * np.cos(alpha) * inclination_slope_at(track, p)
    decay = params.k1 * np.exp(-params.k2 * v)
    a22 = (-params.rho_air * params.c_air * params.area * (v - params.v_wind)
           - params.k2 * decay * u) / m
    b2 = (decay + params.k3) / m
    return a21, a22, b2


def linearize_at(ref, t, track, params, m=None):
    """Jacobians of the dynamics at the reference point at time ``t``."""
    t0, t1 = float(ref.t[0]), float(ref.t[-1])
    if not t0 - 1e-9 <= t <= t1 + 1e-9:
        raise ValueError(f"t = {t} outside the reference window [{t0}, {t1}]")
    m = params.m_nominal if m is None else m
    p, v = ref.state_at(t)
    a21, a22, b2 = jacobian_terms(p, v, ref.lever_at(t), track, params, m)
    return LtvSample(float(a21), float(a22), float(b2), float(t))


def discretize(sample, t_step):
    """Zero-order-hold transition matrix and input vector over ``t_step``.

    Both come from one exponential of the augmented matrix
    ``[[A, b], [0, 0]] * t_step``.
    """
    if not t_step > 0:
        raise ValueError("t_step must be positive")
    M = np.zeros((3, 3))
    M[0, 1] = 1.0
    M[1, 0] = sample.a21
    M[1, 1] = sample.a22
    M[1, 2] = sample.b2
    E = expm(M * t_step)
    return E[:2, :2], E[:2, 2]


@dataclass
class SampledReference:
    """Reference of one leg at the controller rate.

    ``p``/``v`` hold ``L + 1`` samples (the last is the arrival state),
    ``u``, ``Ad`` and ``bd`` hold ``L``; index ``k`` is time
    ``t0 + k * t_step``.
    """

    leg: object
    t_step: float
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    u: np.ndarray
    ltv: DiscreteLtv
    samples: tuple

    def __len__(self):
        return self.u.size

    @property
    def t0(self):
        return float(self.t[0])

    def x(self, k):
        return np.array([self.p[k], self.v[k]])


def sample_reference(ref, t_step, track, params, m=None):
    """Sample a dense reference every ``t_step`` and discretize along it."""
    duration = float(ref.t[-1] - ref.t[0])
    L = int(round(duration / t_step))
    if L < 1:
        raise ValueError("leg shorter than one control step")
    if abs(L * t_step - duration) > t_step:
        raise ValueError("t_step does not divide the leg duration")
    stride = t_step / ref.dt if ref.dt else 0.0
    if ref.dt and abs(stride - round(stride)) > 1e-9:
        raise ValueError("t_step must be a multiple of the reference sample spacing")
    stride = int(round(stride))
    idx = np.minimum(np.arange(L + 1) * stride, ref.t.size - 1)
    t = ref.t[0] + t_step * np.arange(L + 1)
    p, v, u = ref.p[idx], ref.v[idx], ref.u[idx[:-1]]
    m = params.m_nominal if m is None else m
    samples = []
    Ad = np.empty((L, 2, 2))
    bd = np.empty((L, 2))
    for k in range(L):
        a21, a22, b2 = jacobian_terms(p[k], v[k], u[k], track, params, m)
        s = LtvSample(float(a21), float(a22), float(b2), float(t[k]))
        samples.append(s)
        Ad[k], bd[k] = discretize(s, t_step)
    return SampledReference(ref.leg, float(t_step), t, p.copy(), v.copy(), u.copy(),
                            DiscreteLtv(Ad, bd, float(t_step)), tuple(samples))
