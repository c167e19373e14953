"""Dense convex QP solver.

Solves::

    minimize    0.5 z'Hz + c'z
    subject to  lo <= Az <= hi

with an operator-splitting (ADMM) iteration in the style of OSQP: Ruiz
equilibration, over-relaxation, adaptive step size, an active-set polishing
step that recovers a high-accuracy KKT point, and primal infeasibility
certificates. Multipliers follow the convention ``Hz + c + A'lambda = 0``
with ``lambda > 0`` on active upper bounds and ``lambda < 0`` on active
lower bounds.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = ["QpStatus", "QpProblem", "QpSolution", "QpOptions", "solve_qp", "kkt_residual"]

INF = np.inf


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    A: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.A is None:
            self.A = np.zeros((0, n))
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.lo = np.full(m, -INF) if self.lo is None else np.asarray(self.lo, float).ravel()
        self.hi = np.full(m, INF) if self.hi is None else np.asarray(self.hi, float).ravel()
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}")
        if self.lo.size != m or self.hi.size != m:
            raise ValueError("bounds must match the number of constraint rows")
        if np.any(self.lo > self.hi):
            raise ValueError("need lo <= hi")
        if not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12):
            raise ValueError("H must be symmetric")

    @property
    def n(self):
        return self.c.size

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, z):
        return 0.5 * z @ self.H @ z + self.c @ z


@dataclass
class QpSolution:
    z: np.ndarray
    lam: np.ndarray
    status: QpStatus
    kkt_residual: float
    iterations: int = 0
    polished: bool = False

    @property
    def ok(self):
        return self.status is QpStatus.OPTIMAL


@dataclass
class QpOptions:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-10
    eps_infeasible: float = 1e-6
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    reg: float = 1e-9
    check_every: int = 25
    scaling_iters: int = 10


def kkt_residual(prob, sol):
    """Max-norm of stationarity, primal violation and complementarity."""
    z = np.asarray(sol.z if isinstance(sol, QpSolution) else sol[0], float)
    lam = np.asarray(sol.lam if isinstance(sol, QpSolution) else sol[1], float)
    A, lo, hi = prob.A, prob.lo, prob.hi
    Az = A @ z
    parts = [np.abs(prob.H @ z + prob.c + A.T @ lam)]
    parts.append(np.maximum(Az - hi, 0.0))
    parts.append(np.maximum(lo - Az, 0.0))
    up = np.maximum(lam, 0.0)
    dn = np.maximum(-lam, 0.0)
    # multipliers on an infinite side must vanish
    parts.append(np.where(np.isfinite(hi), np.abs(up * np.where(np.isfinite(hi), hi - Az, 0.0)), up))
    parts.append(np.where(np.isfinite(lo), np.abs(dn * np.where(np.isfinite(lo), Az - lo, 0.0)), dn))
    return float(max((np.max(p) for p in parts if p.size), default=0.0))


def _ruiz(H, A, iters):
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, As = H.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Hs).max(axis=0), np.abs(As).max(axis=0) if m else 0.0)
        dn = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        if m:
            de = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1), 1e-4, 1e4))
        else:
            de = np.ones(0)
        Hs = dn[:, None] * Hs * dn[None, :]
        As = de[:, None] * As * dn[None, :]
        D *= dn
        E *= de
    return D, E, Hs, As


class _Admm:
    def __init__(self, prob, opts):
        self.prob = prob
        self.opts = opts
        H = prob.H + opts.reg * np.eye(prob.n)
        D, E, Hs, As = _ruiz(H, prob.A, opts.scaling_iters)
        cs = D * prob.c
        cost = 1.0 / max(1.0, np.abs(cs).max(initial=0.0), np.abs(Hs).max(axis=0).mean())
        self.D, self.E, self.cost = D, E, cost
        self.H = cost * Hs
        self.c = cost * cs
        self.A = As
        self.lo = E * prob.lo
        self.hi = E * prob.hi
        eq = np.abs(self.hi - self.lo) < 1e-12
        free = ~np.isfinite(self.lo) & ~np.isfinite(self.hi)
        self.kind = np.where(eq, 1e3, np.where(free, 1e-6, 1.0))
        self.rho = opts.rho
        self._factor()

    def _factor(self):
        rho_vec = self.kind * self.rho
        self.rho_vec = rho_vec
        K = self.H + self.opts.sigma * np.eye(self.H.shape[0]) + (self.A.T * rho_vec) @ self.A
        self.chol = sla.cho_factor(K)

    def unscale(self, x, y):
        return self.D * x, self.E * y / self.cost


def _polish(prob, z, lam, opts):
    """Solve the equality-constrained KKT system of the guessed active set."""
    A, lo, hi = prob.A, prob.lo, prob.hi
    Az = A @ z
    with np.errstate(invalid="ignore"):
        upper = np.isfinite(hi) & (hi - Az < lam)
        lower = np.isfinite(lo) & (Az - lo < -lam) & ~upper
    act = np.flatnonzero(upper | lower)
    rhs_b = np.where(upper, hi, lo)[act]
    n, k = prob.n, act.size
    delta = 1e-11
    K = np.zeros((n + k, n + k))
    K[:n, :n] = prob.H + delta * np.eye(n)
    K[:n, n:] = A[act].T
    K[n:, :n] = A[act]
    K[n:, n:] = -delta * np.eye(k)
    rhs = np.concatenate([-prob.c, rhs_b])
    try:
        lu = sla.lu_factor(K)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = sla.lu_solve(lu, rhs)
    exact = K.copy()
    exact[:n, :n] = prob.H
    exact[n:, n:] = 0.0
    for _ in range(5):
        sol = sol + sla.lu_solve(lu, rhs - exact @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    zp = sol[:n]
    lp = np.zeros(prob.m)
    lp[act] = sol[n:]
    return zp, lp


def solve_qp(prob, opts=None, **kw):
    """Solve a convex QP; see module docstring for conventions.

    Returns a :class:`QpSolution` whose status is ``OPTIMAL`` only when the
    KKT residual is below ``eps_abs + eps_rel * scale``. Infeasibility is
    reported, never relaxed.
    """
    opts = opts or QpOptions(**kw)
    n, m = prob.n, prob.m
    scale = max(1.0, np.abs(prob.c).max(initial=0.0), np.abs(prob.H).max(initial=0.0),
                np.abs(prob.A).max(initial=0.0),
                np.abs(prob.lo[np.isfinite(prob.lo)]).max(initial=0.0),
                np.abs(prob.hi[np.isfinite(prob.hi)]).max(initial=0.0))
    tol = opts.eps_abs + opts.eps_rel * scale

    if m == 0:
        H = prob.H + opts.reg * np.eye(n)
        z = sla.solve(H, -prob.c, assume_a="sym")
        for _ in range(3):
            z = z + sla.solve(H, -(prob.H @ z + prob.c), assume_a="sym")
        lam = np.zeros(0)
        res = kkt_residual(prob, (z, lam))
        status = QpStatus.OPTIMAL if res <= tol else QpStatus.MAX_ITER
        return QpSolution(z, lam, status, res, 0, True)

    s = _Admm(prob, opts)
    x = np.zeros(n)
    zc = np.clip(np.zeros(m), s.lo, s.hi)
    y = np.zeros(m)
    best = None
    sig = opts.sigma
    a = opts.alpha
    infeasible_hits = 0
    it = 0
    for it in range(1, opts.max_iter + 1):
        rhs = sig * x - s.c + s.A.T @ (s.rho_vec * zc - y)
        xt = sla.cho_solve(s.chol, rhs)
        zt = s.A @ xt
        x = a * xt + (1 - a) * x
        zr = a * zt + (1 - a) * zc
        znew = np.clip(zr + y / s.rho_vec, s.lo, s.hi)
        dy = s.rho_vec * (zr - znew)
        y = y + dy
        zc = znew

        if it % opts.check_every and it != opts.max_iter:
            continue
        zu, lu = s.unscale(x, y)
        res = kkt_residual(prob, (zu, lu))
        if best is None or res < best[2]:
            best = (zu, lu, res, False)
        pol = _polish(prob, zu, lu, opts)
        if pol is not None:
            pres = kkt_residual(prob, pol)
            if pres < best[2]:
                best = (pol[0], pol[1], pres, True)
        if best[2] <= tol:
            return QpSolution(best[0], best[1], QpStatus.OPTIMAL, best[2], it, best[3])

        # primal infeasibility certificate on the scaled iterates
        ndy = np.abs(dy).max()
        if ndy > 1e-12:
            eps = opts.eps_infeasible * ndy
            Edy = s.E * dy
            cert_a = np.abs(s.D * (prob.A.T @ Edy)).max() <= eps
            up, dn = np.maximum(Edy, 0.0), np.minimum(Edy, 0.0)
            with np.errstate(invalid="ignore"):
                sup = np.where(up > 0, prob.hi * up, 0.0).sum() + np.where(dn < 0, prob.lo * dn, 0.0).sum()
            if cert_a and sup < -eps:
                infeasible_hits += 1
                if infeasible_hits >= 3:
                    return QpSolution(best[0], best[1], QpStatus.INFEASIBLE, best[2], it, best[3])
            else:
                infeasible_hits = 0

        # step-size adaptation
        Ax = s.A @ x
        prim = np.abs(Ax - zc).max() / max(np.abs(Ax).max(), np.abs(zc).max(), 1e-12)
        dual = np.abs(s.H @ x + s.c + s.A.T @ y).max() / max(
            np.abs(s.H @ x).max(), np.abs(s.A.T @ y).max(), np.abs(s.c).max(), 1e-12)
        if prim > 0 and dual > 0:
            new_rho = float(np.clip(s.rho * np.sqrt(prim / dual), 1e-6, 1e6))
            if new_rho > 5 * s.rho or new_rho < s.rho / 5:
                s.rho = new_rho
                s._factor()

    zu, lu, res, pol = best
    return QpSolution(zu, lu, QpStatus.MAX_ITER, res, it, pol)
