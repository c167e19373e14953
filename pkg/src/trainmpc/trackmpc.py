"""Receding-horizon tracking of a leg reference.

At every control instant the deviation from the sampled reference is
propagated through the discretized linear model, the predicted positions are
condensed into a QP over the lever corrections, and only the first correction
is applied. Before it reaches the plant the lever is simulated over the held
step: it must keep the comfort and adhesion rows and the braking-curve speed
cap at every plant substep, and is pulled back by search when it does not.

When the reference is exhausted before the train is at rest inside the
station window (late running, tracking error), the controller switches to an
arrival mode that steers the train onto the terminal reference state.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .dynamics import (
    State,
    constraint_rows,
    lever_interval,
    plant_accel,
    step_rk4,
    traction_force_envelope,
)
from .ltv import jacobian_terms
from .qpcore import QpProblem, QpStatus, solve_qp
from .trackmap import (
    TractionCondition,
    min_traction_between,
    smoothed_inclination_at,
    speed_cap_at,
    speed_cap_slope_at,
)

__all__ = [
    "ControllerFault",
    "MpcConfig",
    "MpcState",
    "Mode",
    "build_qp",
    "mpc_step",
    "govern",
    "StopCurve",
    "stop_curve",
    "Plant",
    "LegResult",
    "run_leg",
]


class ControllerFault(RuntimeError):
    """The tracking controller could not produce an admissible lever."""


@dataclass(frozen=True)
class MpcConfig:
    """Controller tuning.

    ``slack_weight`` is the quadratic and ``slack_l1`` the linear penalty on
    the speed-row slack. ``stop_decel`` shapes the stopping curve used in
    arrival mode; ``max_arrival_steps`` bounds how long arrival mode may run.
    """

    horizon: int = 20
    t_step: float = 1.0
    r_weight: float = 0.01
    q_weight: float = 1.0
    slack_weight: float = 1e4
    slack_l1: float = 1e5
    plant_dt: float = 0.1
    v_arrive: float = 0.05
    max_arrival_steps: int = 600
    governor_margin: float = 1e-3
    qp_max_iter: int = 20000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for name in ("t_step", "r_weight", "q_weight", "slack_weight", "plant_dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        ratio = self.t_step / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("plant_dt must divide t_step")

    @property
    def substeps(self):
        return int(round(self.t_step / self.plant_dt))


class Mode(enum.Enum):
    TRACKING = "tracking"
    ARRIVAL = "arrival"


@dataclass
class MpcState:
    """Controller memory for one leg."""

    ref: object
    track: object
    params: object
    masses: object = None
    j: int = 0
    last_u: float = 0.0
    mode: Mode = Mode.TRACKING
    arrival_steps: int = 0
    stop: StopCurve = None
    stop_lever: float = 0.7

    def __post_init__(self):
        if self.masses is None:
            self.masses = self.params.masses
        if self.stop is None:
            target = self.ref.leg.end_pos + self.params.eps_terminal - 0.5
            self.stop = stop_curve(self.track, self.params, self.masses, target,
                                   lever=self.stop_lever)

    @property
    def length(self):
        return len(self.ref)

    @property
    def exhausted(self):
        return self.j >= self.length


@dataclass
class _Prediction:
    """Condensed prediction ``x_k = xhat_k + G_k @ w`` for k = 0..n."""

    xhat: np.ndarray
    G: np.ndarray
    u_base: np.ndarray
    p_target: np.ndarray


def _condense(Ad, bd, x0, offsets=None):
    n = len(Ad)
    xhat = np.empty((n + 1, 2))
    G = np.zeros((n + 1, 2, n))
    xhat[0] = x0
    for k in range(n):
        xhat[k + 1] = Ad[k] @ xhat[k] + (offsets[k] if offsets is not None else 0.0)
        G[k + 1] = Ad[k] @ G[k]
        G[k + 1, :, k] = bd[k]
    return xhat, G


def _tracking_prediction(mpc, dev0, n):
    ref, j = mpc.ref, mpc.j
    dhat, G = _condense(ref.ltv.Ad[j:j + n], ref.ltv.bd[j:j + n], np.asarray(dev0, float))
    xref = np.column_stack([ref.p[j:j + n + 1], ref.v[j:j + n + 1]])
    return _Prediction(xref + dhat, G, ref.u[j:j + n].copy(), ref.p[j:j + n + 1].copy())


def _affine_discretization(x, u, track, params, t_step, m):
    """ZOH model ``x+ = Ad x + bd u + e`` linearized at ``(x, u)``."""
    p = float(np.clip(x[0], 0.0, track.total_length))
    v = float(x[1])
    a21, a22, b2 = jacobian_terms(p, v, u, track, params, m)
    A = np.array([[0.0, 1.0], [a21, a22]])
    b = np.array([0.0, b2])
    alpha = smoothed_inclination_at(track, p)
    f = np.array([v, plant_accel((p, v), u, m, alpha, params)])
    c = f - A @ np.array([p, v]) - b * u
    M = np.zeros((4, 4))
    M[:2, :2] = A
    M[:2, 2] = b
    M[:2, 3] = c
    E = expm(M * t_step)
    return E[:2, :2], E[:2, 2], E[:2, 3]


def _arrival_prediction(mpc, x, n, cfg):
    ref = mpc.ref
    Ad, bd, e = _affine_discretization(x, 0.0, mpc.track, mpc.params, cfg.t_step,
                                       mpc.params.m_nominal)
    xhat, G = _condense([Ad] * n, [bd] * n, np.asarray(x, float), [e] * n)
    return _Prediction(xhat, G, np.zeros(n), np.full(n + 1, ref.p[-1]))


@dataclass(frozen=True)
class StopCurve:
    """Highest speed from which the train still stops before ``target``.

    Built by integrating backwards from ``(target, 0)`` under a braking
    lever of ``-lever`` (or the adhesion/comfort limit if that is smaller),
    at the heaviest mass and the bad-weather adhesion level: the worst case
    over everything the controller cannot measure.
    """

    target: float
    p: np.ndarray
    v: np.ndarray

    def __call__(self, p):
        p = np.asarray(p, float)
        out = np.interp(p, self.p, self.v, left=np.inf, right=0.0)
        return float(out) if out.ndim == 0 else out

    def slope(self, p):
        p = np.asarray(p, float)
        dv = np.diff(self.v) / np.diff(self.p)
        i = np.clip(np.searchsorted(self.p, p, side="right") - 1, 0, dv.size - 1)
        out = np.where((p >= self.p[0]) & (p < self.p[-1]), dv[i], 0.0)
        return float(out) if out.ndim == 0 else out


def stop_curve(track, params, masses, target, lever=0.7, ds=1.0, v_top=None):
    """Tabulate :class:`StopCurve` for a stop before ``target``."""
    v_top = float(track._vmax.max()) + 5.0 if v_top is None else v_top
    m = masses.m_max
    bad = TractionCondition.BAD

    def decel(p, w):
        p = min(max(p, 0.0), track.total_length)
        v = math.sqrt(max(w, 0.0))
        lo, _ = lever_interval((p, v), track, bad, masses, params)
        u = max(lo, -lever)
        alpha = smoothed_inclination_at(track, p)
        return max(-plant_accel((p, v), u, m, alpha, params), 1e-3)

    ps, ws = [target], [0.0]
    s, w = 0.0, 0.0
    while w < v_top ** 2 and target - s > 0.0:
        h = min(ds, target - s)
        p = target - s
        k1 = 2 * decel(p, w)
        k2 = 2 * decel(p - 0.5 * h, w + 0.5 * h * k1)
        k3 = 2 * decel(p - 0.5 * h, w + 0.5 * h * k2)
        k4 = 2 * decel(p - h, w + h * k3)
        w += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
        ps.append(target - s)
        ws.append(w)
    p = np.array(ps[::-1])
    v = np.sqrt(np.array(ws[::-1]))
    if target - s > 0.0:
        # the curve tops out: everything further back is unconstrained
        p = np.concatenate([[p[0] - 1e-6], p])
        v = np.concatenate([[np.inf], v])
    return StopCurve(float(target), p, v)


def _assemble(mpc, pred, cond, cfg):
    """QP over ``w = (corrections, slacks)`` from a condensed prediction."""
    prm, track, masses = mpc.params, mpc.track, mpc.masses
    n = pred.u_base.size
    xhat, G = pred.xhat, pred.G
    L = track.total_length
    nz = 2 * n

    # rows 1-4 with coefficients at the free response; row 5 on x_{k+1}
    p_c = np.clip(xhat[:n, 0], 0.0, L)
    v_c = xhat[:n, 1]
    reach = np.maximum(v_c, 0.0) * cfg.t_step + 0.5 * prm.a_max * cfg.t_step ** 2
    mu = np.array([min_traction_between(track, a, a + r, cond) for a, r in zip(p_c, reach)])
    h = constraint_rows(p_c, v_c, pred.u_base, track, cond, masses, prm, mu=mu)
    force = traction_force_envelope(prm, v_c)
    gain = np.column_stack([force / masses.m_min, -force / masses.m_max,
                            force / masses.m_min, -force / masses.m_max])

    p_next = np.clip(xhat[1:, 0], 0.0, L)
    cap = speed_cap_at(track, p_next, prm.curve_decel)
    slope = speed_cap_slope_at(track, p_next, prm.curve_decel)
    sc = mpc.stop(xhat[1:, 0])
    slope = np.where(sc < cap, mpc.stop.slope(xhat[1:, 0]), slope)
    cap = np.minimum(cap, sc)

    A = np.zeros((8 * n, nz))
    hi = np.empty(8 * n)
    lo = np.full(8 * n, -math.inf)
    for k in range(n):
        r = 7 * k
        A[r:r + 4, k] = gain[k]
        hi[r:r + 4] = -h[k, :4]
        A[r + 4, :n] = G[k + 1, 1] - slope[k] * G[k + 1, 0]
        A[r + 4, n + k] = -1.0
        hi[r + 4] = cap[k] - xhat[k + 1, 1]
        A[r + 5, k] = -1.0
        hi[r + 5] = 1.0 + pred.u_base[k]
        A[r + 6, k] = 1.0
        hi[r + 6] = 1.0 - pred.u_base[k]
    A[7 * n:, n:] = -np.eye(n)
    hi[7 * n:] = 0.0

    Gp = G[1:, 0, :]
    err = xhat[1:, 0] - pred.p_target[1:]
    H = np.zeros((nz, nz))
    H[:n, :n] = cfg.r_weight * np.eye(n) + cfg.q_weight * Gp.T @ Gp
    H[n:, n:] = cfg.slack_weight * np.eye(n)
    c = np.concatenate([cfg.q_weight * Gp.T @ err, np.full(n, cfg.slack_l1)])
    return QpProblem(0.5 * (H + H.T), c, A, lo, hi)


def build_qp(mpc, dev0, cfg, cond=TractionCondition.GOOD):
    """Condensed tracking QP at the current step.

    Decision vector: ``n`` lever corrections followed by ``n`` speed-row
    slacks, ``n = min(N, steps left)``. Constraint rows come in blocks of
    seven per step (comfort and adhesion at both masses, speed, lever
    bounds) followed by the slack sign rows.
    """
    if mpc.exhausted:
        raise ControllerFault("reference exhausted")
    n = min(cfg.horizon, mpc.length - mpc.j)
    pred = _tracking_prediction(mpc, dev0, n)
    return _assemble(mpc, pred, TractionCondition(cond), cfg)


def _step_margins(x, levers, track, cond, params, masses, cfg, cap_fn):
    """Worst upper and lower constraint margins over one held control step.

    Each lever is simulated at both mass bounds. The upper margin collects
    rows 1 and 3 and the speed cap less ``governor_margin``; the lower one
    rows 2 and 4. Both are checked at every plant substep.
    """
    u = np.asarray(levers, float)[:, None]
    m = np.array([masses.m_min, masses.m_max])
    p = np.full((u.shape[0], 2), float(x[0]))
    v = np.full((u.shape[0], 2), float(x[1]))
    up = np.full(u.shape[0], -np.inf)
    dn = np.full(u.shape[0], -np.inf)
    for _ in range(cfg.substeps):
        p, v = step_rk4((p, v), u, cfg.plant_dt, m, track, params, extrapolate=True)
        pc = np.clip(p, 0.0, track.total_length)
        h = constraint_rows(pc, v, u, track, cond, masses, params)
        over = v - cap_fn(pc) + cfg.governor_margin
        up = np.maximum(up, np.max(np.maximum(np.maximum(h[..., 0], h[..., 2]), over), axis=1))
        dn = np.maximum(dn, np.max(np.maximum(h[..., 1], h[..., 3]), axis=1))
    return up, dn


def _closest_ok(ok, safe, target, rounds=7, points=17):
    """Point of ``[safe, target]`` nearest ``target`` that passes ``ok``."""
    a, b = safe, target
    for _ in range(rounds):
        grid = np.linspace(a, b, points)
        good = np.flatnonzero(ok(grid))
        if good.size == 0:
            return a
        i = good[-1]
        if i == points - 1:
            return b
        a, b = grid[i], grid[i + 1]
    return float(a)


def govern(x, u, track, cond, params, masses, cfg, cap_fn):
    """Lever nearest ``u`` that keeps the constraints over one held step.

    ``u`` is first clipped to :func:`lever_interval` at the measured
    state. If the held lever would then leave the comfort or adhesion
    bounds, or exceed ``cap_fn`` before the next control instant, the
    admissible range is narrowed by search. When the two sides conflict
    the upper side (speed, traction) wins.
    """
    lo, hi = lever_interval(x, track, cond, masses, params)
    u = min(max(float(u), lo), hi)

    def margins(levers):
        return _step_margins(x, levers, track, cond, params, masses, cfg, cap_fn)

    up, dn = margins([u, lo, hi])
    if up[0] <= 0.0 and dn[0] <= 0.0:
        return u
    if dn[1] > 0.0:
        lo = float(_closest_ok(lambda g: margins(g)[1] <= 0.0, hi, lo))
    if up[2] > 0.0:
        hi = float(_closest_ok(lambda g: margins(g)[0] <= 0.0, lo, hi))
    return min(max(u, min(lo, hi)), hi)


def mpc_step(mpc, measured, cond, cfg, qp_opts=None):
    """Lever for the current instant; advances the step index.

    Returns ``(u, info)``.
    """
    cond = TractionCondition(cond)
    prm, track, masses = mpc.params, mpc.track, mpc.masses
    x = np.array([float(measured[0]), float(measured[1])])
    qp_opts = dict(max_iter=cfg.qp_max_iter, **(qp_opts or {}))
    station = mpc.ref.leg.end_pos

    if mpc.exhausted:
        if x[1] <= cfg.v_arrive and x[0] > station + prm.eps_terminal:
            raise ControllerFault(f"train overran station {mpc.ref.leg.index} "
                                  f"({x[0] - station:.2f} m past it)")
        mpc.mode = Mode.ARRIVAL
        mpc.arrival_steps += 1
        if mpc.arrival_steps > cfg.max_arrival_steps:
            raise ControllerFault(f"train did not reach station {mpc.ref.leg.index} "
                                  f"within {cfg.max_arrival_steps} extra steps")
        pred = _arrival_prediction(mpc, x, cfg.horizon, cfg)
        prob = _assemble(mpc, pred, cond, cfg)
    else:
        dev0 = x - mpc.ref.x(mpc.j)
        n = min(cfg.horizon, mpc.length - mpc.j)
        pred = _tracking_prediction(mpc, dev0, n)
        prob = _assemble(mpc, pred, cond, cfg)
    sol = solve_qp(prob, **qp_opts)
    if sol.status is QpStatus.INFEASIBLE:
        raise ControllerFault(f"tracking QP infeasible at step {mpc.j}")
    u_qp = float(pred.u_base[0] + sol.z[0])

    def cap_fn(p):
        return np.minimum(speed_cap_at(track, p, prm.curve_decel), mpc.stop(p))

    u = govern(x, u_qp, track, cond, prm, masses, cfg, cap_fn)
    info = {"j": mpc.j, "u_qp": u_qp, "qp_status": sol.status.value,
            "qp_iterations": sol.iterations, "kkt": sol.kkt_residual,
            "slack": float(np.max(sol.z[len(pred.u_base):], initial=0.0)),
            "mode": mpc.mode.value}
    mpc.j += 1
    mpc.last_u = u
    return u, info


class Plant:
    """The simulated train: true mass, fine integration step, weather.

    ``cond_of(t, p)`` returns the traction condition in force.
    """

    def __init__(self, track, params, mass, dt=0.1, cond_of=None, state=(0.0, 0.0), t=0.0):
        if not params.masses.m_min <= mass <= params.masses.m_max:
            raise ValueError("plant mass outside the admissible interval")
        self.track = track
        self.params = params
        self.mass = float(mass)
        self.dt = float(dt)
        self.cond_of = cond_of or (lambda t, p: TractionCondition.GOOD)
        self.state = State(float(state[0]), float(state[1]))
        self.t = float(t)
        self.trace = []

    def cond(self):
        return TractionCondition(self.cond_of(self.t, self.state.p))

    def constraints(self, u):
        p, v = self.state
        return constraint_rows(p, v, u, self.track, self.cond(), self.params.masses,
                               self.params)

    def log(self, u):
        self.trace.append((self.t, self.state.p, self.state.v, u, *self.constraints(u)))

    def advance(self, u, duration):
        """Hold lever ``u`` for ``duration`` seconds, logging every substep."""
        n = int(round(duration / self.dt))
        for _ in range(n):
            self.log(u)
            self.state = step_rk4(self.state, u, self.dt, self.mass, self.track, self.params)
            self.t = round(self.t + self.dt, 9)
        return self.state

    def hold(self, duration):
        """Stand still with brakes applied (lever logged as 0)."""
        n = int(round(duration / self.dt))
        self.state = State(self.state.p, 0.0)
        for _ in range(n):
            self.log(0.0)
            self.t = round(self.t + self.dt, 9)


LEG_COLUMNS = ("t", "p", "v", "u", "p_ref", "v_ref", "e_p", "e_v",
               "h1", "h2", "h3", "h4", "h5", "h6", "h7")


@dataclass
class LegResult:
    """Control-rate log of one leg; ``rows`` follow :data:`LEG_COLUMNS`."""

    leg: object
    rows: np.ndarray
    arrival_time: float
    arrival_state: State
    arrival_steps: int = 0
    infos: list = field(default_factory=list)

    @property
    def table(self):
        return {name: self.rows[:, i] for i, name in enumerate(LEG_COLUMNS)}

    @property
    def delay(self):
        return self.arrival_time - self.leg.arrival_time

    @property
    def max_abs_ep(self):
        return float(np.abs(self.rows[:, 6]).max(initial=0.0))

    @property
    def max_abs_ev(self):
        return float(np.abs(self.rows[:, 7]).max(initial=0.0))

    @property
    def h_max(self):
        if not len(self.rows):
            return np.full(7, -math.inf)
        return self.rows[:, 8:].max(axis=0)


def arrived(state, leg, params, cfg):
    return abs(state.p - leg.end_pos) <= params.eps_terminal and state.v <= cfg.v_arrive


def run_leg(mpc, plant, cfg, qp_opts=None):
    """Closed loop from the plant's current time until the station is reached.

    The controller starts at the reference index matching the plant clock
    (a late departure starts further into the reference).
    """
    ref = mpc.ref
    leg = ref.leg
    L = mpc.length
    mpc.j = max(0, int(round((plant.t - ref.t0) / cfg.t_step)))
    if abs(ref.t0 + mpc.j * cfg.t_step - plant.t) > 1e-6:
        raise ValueError("plant clock is not aligned with the control grid")
    rows, infos = [], []
    if L == 0 or leg.length <= 0:
        return LegResult(leg, np.zeros((0, len(LEG_COLUMNS))), plant.t, plant.state)
    while True:
        x = plant.state
        if mpc.j >= L and arrived(x, leg, mpc.params, cfg):
            break
        k = min(mpc.j, L)
        p_ref, v_ref = float(ref.p[k]), float(ref.v[k])
        cond = plant.cond()
        u, info = mpc_step(mpc, x, cond, cfg, qp_opts)
        h = constraint_rows(x.p, x.v, u, mpc.track, cond, mpc.masses, mpc.params)
        rows.append((plant.t, x.p, x.v, u, p_ref, v_ref, x.p - p_ref, x.v - v_ref, *h))
        infos.append(info)
        plant.advance(u, cfg.t_step)
    return LegResult(leg, np.array(rows, dtype=float).reshape(-1, len(LEG_COLUMNS)),
                     plant.t, plant.state, mpc.arrival_steps, infos)
