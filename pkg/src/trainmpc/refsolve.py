"""Offline reference trajectories by direct multiple shooting.

Each route leg is an optimal control problem: minimize the integrated
squared lever from departure to the scheduled arrival, subject to the train
dynamics, a start at rest, a stop within ``eps_terminal`` of the station,
and the seven path constraints. The leg horizon is cut into subintervals
with free initial states and piecewise-constant levers; continuity
("defect") constraints glue the pieces together. The resulting NLP is
solved with a damped SQP loop whose QP subproblems go to :mod:`qpcore`.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    State,
    constraint_jacobian,
    constraint_rows,
    resistance_force,
    step_rk4,
    traction_force_envelope,
)
from .qpcore import QpProblem, QpStatus, solve_qp
from .trackmap import (
    Leg,
    TractionCondition,
    leg_between,
    smoothed_inclination_at,
    speed_cap_at,
    speed_cap_slope_at,
    speed_limit_at,
)

log = logging.getLogger(__name__)

__all__ = [
    "ReferenceError_",
    "NoConvergence",
    "InfeasibleLeg",
    "SqpOptions",
    "ShootingGrid",
    "ReferenceTrajectory",
    "ShootingNlp",
    "node_count",
    "transcribe",
    "initial_guess",
    "solve_reference",
    "densify",
    "compute_reference",
    "solve_route",
    "reference_to_csv",
    "reference_from_csv",
]


class ReferenceError_(RuntimeError):
    """Base class for reference computation failures."""


class NoConvergence(ReferenceError_):
    def __init__(self, message, grid=None, defect=math.inf):
        super().__init__(message)
        self.grid = grid
        self.defect = defect


class InfeasibleLeg(ReferenceError_):
    def __init__(self, message, grid=None, violation=math.inf):
        super().__init__(message)
        self.grid = grid
        self.violation = violation


@dataclass
class SqpOptions:
    """Knobs of the SQP loop.

    ``accel_backoff`` and ``speed_backoff`` tighten the comfort/adhesion and
    speed rows so the reference keeps a margin the tracking controller can
    use; constraints are enforced at nodes and subinterval midpoints.
    """

    max_iter: int = 80
    defect_tol: float = 1e-8
    constraint_tol: float = 1e-6
    step_tol: float = 1e-6
    step_damping: float = 0.5
    max_backtracks: int = 30
    fd_step: float = 1e-6
    max_substep: float = 0.1
    accel_backoff: float = 0.02
    speed_backoff: float = 0.5
    v_terminal_tol: float = 0.05
    terminal_margin: float = 1.0
    max_restoration: int = 8
    prox: float = 1e-6
    elastic_weight: float = 1e4

    def __post_init__(self):
        for name in ("defect_tol", "constraint_tol", "step_tol", "fd_step", "max_substep",
                     "v_terminal_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.step_damping < 1:
            raise ValueError("step_damping must lie in (0, 1)")


@dataclass
class ShootingGrid:
    nodes: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 2)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.nodes.size < 2 or np.any(np.diff(self.nodes) <= 0):
            raise ValueError("nodes must be strictly increasing with at least two entries")
        if self.states.shape[0] != self.nodes.size or self.controls.size != self.nodes.size - 1:
            raise ValueError("inconsistent grid dimensions")

    @property
    def size(self):
        return self.nodes.size


@dataclass
class ReferenceTrajectory:
    """Reference of one leg, sampled at ``dt`` from the leg departure.

    ``u[k]`` is the lever on ``[t[k], t[k+1])``; the last entry repeats the
    final lever.
    """

    leg: Leg
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    u: np.ndarray
    grid: ShootingGrid = None
    cond: TractionCondition = TractionCondition.GOOD
    info: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def index_at(self, t):
        k = int(math.floor((t - self.t[0]) / self.dt + 1e-9)) if self.dt else 0
        return min(max(k, 0), self.t.size - 1)

    def state_at(self, t):
        return State(float(np.interp(t, self.t, self.p)), float(np.interp(t, self.t, self.v)))

    def lever_at(self, t):
        return float(self.u[self.index_at(t)])


def node_count(duration):
    """Number of shooting nodes: one per three seconds, at least three."""
    if not duration > 6:
        raise ValueError(f"leg duration {duration} s too short (need > 6 s)")
    return max(3, int(math.floor(duration / 3.0)))


class ShootingNlp:
    """Multiple-shooting transcription of one leg.

    Decision vector ``z = [x_1, ..., x_m, u_1, ..., u_{m-1}]`` with
    ``x_i = (p_i, v_i)``. Equalities: initial state, defects, terminal
    velocity. Inequalities: terminal position window and the path rows at
    every node and subinterval midpoint.
    """

    def __init__(self, leg, track, cond, params, masses, m_nominal, grid_size, opts):
        if grid_size < 3:
            raise ValueError("grid_size must be at least 3")
        self.leg = leg
        self.track = track
        self.cond = TractionCondition(cond)
        self.params = params
        self.masses = masses
        self.m_nominal = m_nominal
        self.opts = opts
        self.size = grid_size
        self.nodes = np.linspace(leg.departure_time, leg.arrival_time, grid_size)
        self.h = np.diff(self.nodes)
        span = self.h[0]
        n_sub = 2 * max(1, math.ceil(span / (2 * opts.max_substep)))
        self.n_sub = n_sub
        self.x0 = np.array([leg.start_pos, 0.0])
        self.target = leg.end_pos

    # bookkeeping ---------------------------------------------------------
    @property
    def n_vars(self):
        return 3 * self.size - 1

    @property
    def n_defects(self):
        return 2 * (self.size - 1)

    @property
    def n_path_rows(self):
        return 7 * (2 * self.size - 1)

    def unpack(self, z):
        m = self.size
        return z[:2 * m].reshape(m, 2), z[2 * m:]

    def pack(self, states, controls):
        return np.concatenate([np.asarray(states, float).ravel(), np.asarray(controls, float)])

    # dynamics ------------------------------------------------------------
    def _shoot(self, p, v, u):
        dt = self.h[0] / self.n_sub
        mid = None
        x = (p, v)
        for k in range(self.n_sub):
            x = step_rk4(x, u, dt, self.m_nominal, self.track, self.params,
                         clamp=False, extrapolate=True)
            if k + 1 == self.n_sub // 2:
                mid = x
        return np.stack(x, -1), np.stack(mid, -1)

    def propagate(self, z):
        states, u = self.unpack(z)
        return self._shoot(states[:-1, 0], states[:-1, 1], u)

    def sensitivities(self, z):
        """End and midpoint states with central-difference Jacobians."""
        states, u = self.unpack(z)
        k = self.size - 1
        hp = self.opts.fd_step * np.maximum(1.0, np.abs(states[:-1, 0]))
        hv = self.opts.fd_step * np.maximum(1.0, np.abs(states[:-1, 1]))
        hu = self.opts.fd_step * np.ones(k)
        P = np.tile(states[:-1, 0], 7)
        V = np.tile(states[:-1, 1], 7)
        U = np.tile(u, 7)
        for j, (arr, step) in enumerate(((P, hp), (V, hv), (U, hu))):
            arr[(1 + 2 * j) * k:(2 + 2 * j) * k] += step
            arr[(2 + 2 * j) * k:(3 + 2 * j) * k] -= step
        end, mid = self._shoot(P, V, U)
        end = end.reshape(7, k, 2)
        mid = mid.reshape(7, k, 2)
        steps = (hp, hv, hu)
        Jend = np.stack([(end[1 + 2 * j] - end[2 + 2 * j]) / (2 * steps[j][:, None])
                         for j in range(3)], -1)
        Jmid = np.stack([(mid[1 + 2 * j] - mid[2 + 2 * j]) / (2 * steps[j][:, None])
                         for j in range(3)], -1)
        return end[0], mid[0], Jend, Jmid

    # objective -----------------------------------------------------------
    def objective(self, z):
        _, u = self.unpack(z)
        return 0.5 * float(np.sum(self.h * u ** 2))

    # constraints ---------------------------------------------------------
    def path_points(self, z, mid=None):
        """States and levers at nodes and midpoints, node-major order."""
        states, u = self.unpack(z)
        if mid is None:
            _, mid = self.propagate(z)
        m = self.size
        pts = np.empty((2 * m - 1, 2))
        pts[0::2] = states
        pts[1::2] = mid
        lev = np.empty(2 * m - 1)
        lev[0:-1:2] = u
        lev[1::2] = u
        lev[-1] = u[-1]
        return pts, lev

    def path_values(self, pts, lev, tightened=True):
        """All seven rows at every checkpoint, shape (2m-1, 7)."""
        o, prm = self.opts, self.params
        p = np.clip(pts[:, 0], 0.0, self.track.total_length)
        v = pts[:, 1]
        if tightened:
            cap = speed_cap_at(self.track, p, prm.curve_decel) - o.speed_backoff
        else:
            cap = speed_limit_at(self.track, p)
        h = constraint_rows(p, v, lev, self.track, self.cond, self.masses, prm, speed_limit=cap)
        if tightened:
            h[:, :4] += o.accel_backoff
        return h

    def path_constraints(self, z):
        pts, lev = self.path_points(z)
        return self.path_values(pts, lev, tightened=True)

    def equality_residuals(self, z, end=None):
        states, _ = self.unpack(z)
        if end is None:
            end, _ = self.propagate(z)
        defects = (end - states[1:]).ravel()
        return np.concatenate([states[0] - self.x0, defects, [states[-1, 1]]])

    def terminal_residuals(self, z):
        p_end = self.unpack(z)[0][-1, 0]
        eps = self.params.eps_terminal - self.opts.terminal_margin
        return np.array([p_end - self.target - eps, self.target - eps - p_end])

    def violation(self, z):
        try:
            end, mid = self.propagate(z)
        except ValueError:
            return math.inf
        eq = self.equality_residuals(z, end)
        pts, lev = self.path_points(z, mid)
        h = self.path_values(pts, lev)
        ineq = np.concatenate([h[:, :5].ravel(), self.terminal_residuals(z),
                               np.abs(lev) - 1.0])
        return float(np.abs(eq).sum() + np.maximum(ineq, 0.0).sum())

    def max_defect(self, z):
        end, _ = self.propagate(z)
        states, _ = self.unpack(z)
        return float(np.abs(end - states[1:]).max())

    # QP subproblem -------------------------------------------------------
    def subproblem(self, z, elastic=False):
        """Linearize at ``z`` and build the step QP.

        With ``elastic`` every checkpoint gets a nonnegative slack on its
        rows 1-5 and the terminal rows share one slack, which makes the QP
        feasible whatever the linearization says.
        """
        o, prm, m = self.opts, self.params, self.size
        states, u = self.unpack(z)
        end, mid, Jend, Jmid = self.sensitivities(z)
        nv = self.n_vars
        n_pts = 2 * m - 1
        n_slack = n_pts + 1 if elastic else 0
        n = nv + n_slack
        ui = 2 * m  # offset of controls

        def xcol(i):
            return slice(2 * i, 2 * i + 2)

        rows, lo, hi = [], [], []

        def add(row, l, h):
            rows.append(row)
            lo.append(l)
            hi.append(h)

        # x_1 = x0
        for j in range(2):
            r = np.zeros(n)
            r[j] = 1.0
            val = self.x0[j] - states[0, j]
            add(r, val, val)
        # defects: x_{i+1} + dx_{i+1} = end_i + Jx dx_i + Ju du_i
        for i in range(m - 1):
            for j in range(2):
                r = np.zeros(n)
                r[2 * (i + 1) + j] = 1.0
                r[xcol(i)] -= Jend[i, j, :2]
                r[ui + i] -= Jend[i, j, 2]
                val = end[i, j] - states[i + 1, j]
                add(r, val, val)
        # terminal velocity and position window
        r = np.zeros(n)
        r[2 * (m - 1) + 1] = 1.0
        if elastic:
            tr = np.zeros(n)
            tr[nv + n_pts] = 1.0
        val = -states[-1, 1]
        if elastic:
            add(r - tr, -math.inf, val)
            add(r + tr, val, math.inf)
        else:
            add(r, val, val)
        r = np.zeros(n)
        r[2 * (m - 1)] = 1.0
        eps = max(prm.eps_terminal - o.terminal_margin, 0.0)
        p_end = states[-1, 0]
        if elastic:
            add(r - tr, -math.inf, self.target + eps - p_end)
            add(r + tr, self.target - eps - p_end, math.inf)
        else:
            add(r, self.target - eps - p_end, self.target + eps - p_end)

        # path rows 1-5 at nodes and midpoints
        pts, lev = self.path_points(z, mid)
        hval = self.path_values(pts, lev)
        pclip = np.clip(pts[:, 0], 0.0, self.track.total_length)
        J = constraint_jacobian(pclip, pts[:, 1], lev, self.track, self.masses, prm)
        cap_slope = speed_cap_slope_at(self.track, pclip, prm.curve_decel)
        for k in range(n_pts):
            i_node = k // 2
            i_ctrl = min(i_node, m - 2)
            if k % 2 == 0:
                dx_map = np.zeros((2, n))
                dx_map[:, xcol(i_node)] = np.eye(2)
            else:
                dx_map = np.zeros((2, n))
                dx_map[:, xcol(i_node)] = Jmid[i_node, :, :2]
                dx_map[:, ui + i_node] = Jmid[i_node, :, 2]
            for row in range(5):
                if row < 4:
                    jac = J[k, row]
                    r = jac[0] * dx_map[0] + jac[1] * dx_map[1]
                    r[ui + i_ctrl] += jac[2]
                else:
                    r = -cap_slope[k] * dx_map[0] + dx_map[1]
                if elastic:
                    r = r.copy()
                    r[nv + k] = -1.0
                add(r, -math.inf, -hval[k, row])
        # lever box
        for i in range(m - 1):
            r = np.zeros(n)
            r[ui + i] = 1.0
            add(r, -1.0 - u[i], 1.0 - u[i])
        if elastic:
            for k in range(n_slack):
                r = np.zeros(n)
                r[nv + k] = 1.0
                add(r, 0.0, math.inf)

        H = np.zeros((n, n))
        H[np.arange(2 * m), np.arange(2 * m)] = o.prox
        H[ui + np.arange(m - 1), ui + np.arange(m - 1)] = self.h
        c = np.zeros(n)
        c[ui:nv] = self.h * u
        if elastic:
            H[nv + np.arange(n_slack), nv + np.arange(n_slack)] = o.elastic_weight
            c[nv:] = o.elastic_weight
        return QpProblem(H, c, np.array(rows), np.array(lo), np.array(hi))


def transcribe(leg, track, cond, params, masses=None, m_nominal=None, grid_size=None,
               opts=None):
    """Build the multiple-shooting NLP for ``leg``."""
    masses = masses or params.masses
    m_nominal = params.m_nominal if m_nominal is None else m_nominal
    grid_size = node_count(leg.duration) if grid_size is None else grid_size
    return ShootingNlp(leg, track, cond, params, masses, m_nominal, grid_size,
                       opts or SqpOptions())


def _trapezoid(distance, duration, accel, v_cap):
    """Cruise speed and acceleration of a symmetric trapezoidal profile."""
    disc = (accel * duration) ** 2 - 4 * accel * distance
    if disc < 0:
        accel = 4 * distance / duration ** 2
        v_c = accel * duration / 2
    else:
        v_c = (accel * duration - math.sqrt(disc)) / 2
    if v_c > v_cap:
        v_c = v_cap
    return v_c, accel


def _profile(t, v_c, accel, duration):
    t = np.asarray(t, float)
    ta = v_c / accel
    p = np.where(t < ta, 0.5 * accel * t ** 2,
                 np.where(t <= duration - ta, 0.5 * accel * ta ** 2 + v_c * (t - ta),
                          v_c * (duration - ta) - 0.5 * accel * (duration - t) ** 2))
    v = np.where(t < ta, accel * t, np.where(t <= duration - ta, v_c, accel * (duration - t)))
    a = np.where(t < ta, accel, np.where(t <= duration - ta, 0.0, -accel))
    return p, np.maximum(v, 0.0), a


def initial_guess(leg, track, params, grid_size=None, cond=TractionCondition.GOOD,
                  m_nominal=None):
    """Trapezoidal velocity guess at the shooting nodes.

    Accelerates and brakes at ``a_max / 2`` and cruises below the lowest
    speed limit on the leg; levers come from inverse dynamics, clipped to
    the lever range.
    """
    grid_size = node_count(leg.duration) if grid_size is None else grid_size
    m_nominal = params.m_nominal if m_nominal is None else m_nominal
    nodes = np.linspace(leg.departure_time, leg.arrival_time, grid_size)
    T = leg.duration
    probe = np.linspace(leg.start_pos, leg.end_pos, 200)
    v_cap = 0.9 * float(np.min(speed_limit_at(track, probe)))
    v_c, accel = _trapezoid(max(leg.length, 0.0), T, 0.5 * params.a_max, v_cap)
    tau = nodes - leg.departure_time
    p, v, _ = _profile(tau, v_c, accel, T)
    states = np.column_stack([leg.start_pos + p, v])
    mids = 0.5 * (tau[:-1] + tau[1:])
    pm, vm, am = _profile(mids, v_c, accel, T)
    pm = np.clip(leg.start_pos + pm, 0.0, track.total_length)
    alpha = smoothed_inclination_at(track, pm)
    force = traction_force_envelope(params, vm)
    u = (am * m_nominal + resistance_force(params, vm, alpha, m_nominal)) / force
    return ShootingGrid(nodes, states, np.clip(u, -1.0, 1.0))


def _stationary_reference(leg, params, dt, cond):
    n = max(1, int(round(leg.duration / dt)))
    t = leg.departure_time + dt * np.arange(n + 1)
    zeros = np.zeros(n + 1)
    grid = ShootingGrid(t[[0, -1]], [[leg.start_pos, 0.0], [leg.start_pos, 0.0]], [0.0])
    return ReferenceTrajectory(leg, t, np.full(n + 1, leg.start_pos), zeros.copy(), zeros,
                               grid, cond, {"iterations": 0, "max_defect": 0.0,
                                            "objective": 0.0, "merit": []})


def solve_reference(nlp, opts=None, guess=None, qp_opts=None):
    """Run the SQP loop on a transcribed leg and return the converged grid.

    Returns ``(grid, info)``. Raises :class:`InfeasibleLeg` when the
    linearized problems stay infeasible (the elastic fallback cannot remove
    the violation) and :class:`NoConvergence` at the iteration cap.
    """
    opts = opts or nlp.opts
    qp_opts = qp_opts or {}
    if guess is None:
        guess = initial_guess(nlp.leg, nlp.track, nlp.params, nlp.size, nlp.cond,
                              nlp.m_nominal)
    z = nlp.pack(guess.states, guess.controls)
    z[:2] = nlp.x0
    nu = 10.0
    merit_hist = []
    restoration = 0
    last_viol = None

    def merit(zz, weight):
        viol = nlp.violation(zz)
        return nlp.objective(zz) + weight * viol, viol

    for it in range(1, opts.max_iter + 1):
        prob = nlp.subproblem(z)
        sol = solve_qp(prob, **qp_opts)
        elastic = sol.status is QpStatus.INFEASIBLE
        if elastic:
            restoration += 1
            prob = nlp.subproblem(z, elastic=True)
            sol = solve_qp(prob, **qp_opts)
            if restoration >= opts.max_restoration:
                raise InfeasibleLeg(
                    f"leg {nlp.leg.index}: linearized problem infeasible for "
                    f"{restoration} consecutive iterations",
                    _grid(nlp, z), nlp.violation(z))
        else:
            restoration = 0
        if sol.status is QpStatus.INFEASIBLE:
            raise InfeasibleLeg(f"leg {nlp.leg.index}: elastic subproblem infeasible",
                                _grid(nlp, z), nlp.violation(z))
        d = sol.z[:nlp.n_vars]
        lam = sol.lam
        nu = max(nu, 1.5 * float(np.abs(lam).max(initial=0.0)) + 1.0)
        phi, viol = merit(z, nu)
        if not merit_hist:
            merit_hist.append(phi)
        step_norm = float((np.abs(d) / (1.0 + np.abs(z))).max())
        defect = nlp.max_defect(z)
        log.debug("leg %s it %d obj %.6g viol %.3g defect %.3g step %.3g nu %.3g elastic %s",
                  nlp.leg.index, it, nlp.objective(z), viol, defect, step_norm, nu, elastic)
        if (not elastic and step_norm <= opts.step_tol and defect <= opts.defect_tol
                and _feasible(nlp, z, opts)):
            break
        states, u = nlp.unpack(z)
        grad_u = nlp.h * u
        dphi = float(grad_u @ d[2 * nlp.size:]) - nu * viol
        a = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            trial = z + a * d
            phi_t, viol_t = merit(trial, nu)
            if phi_t <= phi + 1e-4 * a * min(dphi, 0.0) or (
                    viol < 10 * opts.defect_tol and viol_t < 10 * opts.defect_tol
                    and phi_t <= phi + 1e-12):
                accepted = True
                break
            a *= opts.step_damping
        if not accepted:
            # take the shortest trial step to escape a merit plateau
            phi_t, viol_t = merit(trial, nu)
        z = trial
        merit_hist.append(phi_t)
        if elastic and last_viol is not None and viol_t > 0.999 * last_viol and restoration > 3:
            raise InfeasibleLeg(f"leg {nlp.leg.index}: restoration stalled at violation "
                                f"{viol_t:.3g}", _grid(nlp, z), viol_t)
        last_viol = viol_t
    else:
        raise NoConvergence(f"leg {nlp.leg.index}: no convergence in {opts.max_iter} "
                            f"iterations", _grid(nlp, z), nlp.max_defect(z))
    info = {
        "iterations": it,
        "max_defect": nlp.max_defect(z),
        "objective": nlp.objective(z),
        "merit": merit_hist,
        "max_path": float(nlp.path_constraints(z)[:, :5].max()),
    }
    return _grid(nlp, z), info


def _feasible(nlp, z, opts):
    h = nlp.path_constraints(z)
    term = nlp.terminal_residuals(z)
    states, _ = nlp.unpack(z)
    return (h[:, :5].max() <= opts.constraint_tol and term.max() <= opts.constraint_tol
            and abs(states[-1, 1]) <= opts.defect_tol)


def _grid(nlp, z):
    states, u = nlp.unpack(z)
    states = states.copy()
    states[0] = nlp.x0
    return ShootingGrid(nlp.nodes.copy(), states.copy(), np.clip(u, -1.0, 1.0))


def densify(grid, track, params, m_nominal=None, dt=0.1, leg=None,
            cond=TractionCondition.GOOD, info=None):
    """Re-simulate the grid levers open loop and sample every ``dt``.

    The integrator steps through the union of the sample times and the
    shooting nodes, so lever switches land exactly on nodes.
    """
    m_nominal = params.m_nominal if m_nominal is None else m_nominal
    t0, tf = grid.nodes[0], grid.nodes[-1]
    n = int(round((tf - t0) / dt))
    if abs(n * dt - (tf - t0)) > 1e-6 * max(1.0, tf - t0):
        raise ValueError("dt must divide the leg duration")
    samples = t0 + dt * np.arange(n + 1)
    events = np.union1d(samples, grid.nodes)
    p = np.empty(n + 1)
    v = np.empty(n + 1)
    x = State(*grid.states[0])
    p[0], v[0] = x
    k = 1
    for a, b in zip(events[:-1], events[1:]):
        if b - a < 1e-12:
            continue
        i = min(np.searchsorted(grid.nodes, a, side="right") - 1, grid.controls.size - 1)
        sub = max(1, math.ceil((b - a) / dt - 1e-9))
        h = (b - a) / sub
        for _ in range(sub):
            x = step_rk4(x, grid.controls[i], h, m_nominal, track, params, clamp=False,
                         extrapolate=True)
        if k <= n and abs(b - samples[k]) < 1e-9:
            p[k], v[k] = x
            k += 1
    idx = np.clip(np.searchsorted(grid.nodes, samples, side="right") - 1, 0,
                  grid.controls.size - 1)
    u = grid.controls[idx]
    if leg is None:
        leg = Leg(-1, float(grid.states[0, 0]), float(grid.states[-1, 0]), t0, tf)
    p = np.clip(p, 0.0, track.total_length)
    return ReferenceTrajectory(leg, samples, p, np.maximum(v, 0.0), u, grid, TractionCondition(cond),
                               dict(info or {}))


def compute_reference(leg, track, cond, params, masses=None, opts=None, dt=0.1,
                      grid_size=None, qp_opts=None):
    """Transcribe, solve and densify one leg."""
    opts = opts or SqpOptions()
    cond = TractionCondition(cond)
    if leg.length <= params.eps_terminal:
        return _stationary_reference(leg, params, dt, cond)
    nlp = transcribe(leg, track, cond, params, masses, None, grid_size, opts)
    grid, info = solve_reference(nlp, opts, qp_opts=qp_opts)
    return densify(grid, track, params, nlp.m_nominal, dt, leg, cond, info)


def solve_route(track, cond, params, masses=None, opts=None, dt=0.1, legs=None):
    """References for every leg of the route (or the selected ``legs``).

    Each leg starts where the previous reference stopped (inside the station
    window), so consecutive references join without a position jump.
    """
    legs = list(range(len(track.stations))) if legs is None else list(legs)
    refs = []
    prev = None
    for i in legs:
        leg = leg_between(track, i)
        if prev is not None and prev.leg.index == i - 1:
            leg = replace(leg, start_pos=float(prev.p[-1]))
        prev = compute_reference(leg, track, cond, params, masses, opts, dt)
        refs.append(prev)
    return refs


def reference_to_csv(ref, t_step=1.0):
    """CSV text ``t,p_ref,v_ref,u_ref`` sampled every ``t_step``."""
    stride = int(round(t_step / ref.dt)) if ref.dt else 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "p_ref", "v_ref", "u_ref"])
    for k in range(0, ref.t.size, stride):
        w.writerow([f"{ref.t[k]:.10g}", f"{ref.p[k]:.10g}", f"{ref.v[k]:.10g}",
                    f"{ref.u[k]:.10g}"])
    return buf.getvalue()


def reference_from_csv(text, leg=None, cond=TractionCondition.GOOD):
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) < 2:
        raise ValueError("reference CSV needs at least two rows")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("t", "p_ref", "v_ref", "u_ref")}
    t = cols["t"]
    if leg is None:
        leg = Leg(-1, float(cols["p_ref"][0]), float(cols["p_ref"][-1]), float(t[0]),
                  float(t[-1]))
    return ReferenceTrajectory(leg, t, cols["p_ref"], cols["v_ref"], cols["u_ref"], None,
                               TractionCondition(cond))
