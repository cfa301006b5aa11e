"""Deterministic QCQP layer: log-barrier interior point solve + KKT adjoint.

The forward pass is a textbook barrier method (phase one for a strictly
feasible start, damped Newton centering, geometric growth of t) followed by
an active-set Newton polish of the KKT equations, which brings residuals to
machine precision so that finite differences of the solution map are clean.

The backward pass differentiates the KKT residual

    r_stat = 2Qx + c + sum_i mu_i (2 A_i x + b_i)
    r_comp = mu_i g_i(x)

implicitly and returns dL/dtheta for every instance coefficient.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

import numpy as np
import scipy.linalg
import scipy.optimize

from .qcqp_core import ParamGrad, QcqpInstance


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    NUMERICAL_FAILURE = "numerical_failure"


class InfeasibleProblem(RuntimeError):
    pass


class SingularKkt(np.linalg.LinAlgError):
    pass


POLISH_GAP = 1e-6  # barrier gap at which the first polish attempt is made


@dataclass(frozen=True)
class SolverConfig:
    t0: float = 1.0
    growth: float = 20.0
    gap_tol: float = 1e-9
    newton_tol: float = 1e-10
    max_outer: int = 60
    max_inner: int = 200
    eps_active: float = 1e-6
    damping: float = 1e-10
    polish: bool = True
    # optional eps*||x||^2 added to the objective; off unless asked for
    regularization: float = 0.0
    phase1_radius: float = 1e4
    trace: Optional[TextIO] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("t0", "gap_tol", "newton_tol", "eps_active", "damping", "phase1_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverConfig.{name} must be positive")
        if not self.growth > 1:
            raise ValueError("SolverConfig.growth must exceed 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be positive")
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")


@dataclass
class KktSolution:
    x_star: np.ndarray
    mu: np.ndarray
    stationarity_residual: float
    comp_slack_residual: float
    active_flags: np.ndarray
    solve_status: SolveStatus
    objective: float = float("nan")
    newton_iterations: int = 0
    outer_objectives: list = field(default_factory=list)
    polished: bool = False
    regularization: float = 0.0

    @property
    def ok(self) -> bool:
        return self.solve_status is SolveStatus.OPTIMAL


# ---------------------------------------------------------------------------
# dense problem data


class _Data:
    """Stacked arrays for a QCQP: quadratic objective, m quadratic constraints."""

    def __init__(self, Q, c, A, b, gamma):
        self.Q = np.asarray(Q, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.c.size, self.c.size)
        self.b = np.asarray(b, dtype=float).reshape(-1, self.c.size)
        self.gamma = np.asarray(gamma, dtype=float).reshape(-1)
        self.n = self.c.size
        self.m = self.gamma.size

    @classmethod
    def from_instance(cls, inst: QcqpInstance, regularization=0.0):
        n = inst.n_vars
        Q = inst.Q + regularization * np.eye(n)
        cons = inst.constraints
        A = np.array([k.A for k in cons]).reshape(-1, n, n)
        b = np.array([k.b for k in cons]).reshape(-1, n)
        g = np.array([k.gamma for k in cons])
        return cls(Q, inst.c, A, b, g)

    def f(self, x):
        return float(x @ self.Q @ x + self.c @ x)

    def cons(self, x):
        Ax = self.A @ x
        g = Ax @ x + self.b @ x + self.gamma
        J = 2.0 * Ax + self.b
        return g, J

    def g(self, x):
        return (self.A @ x) @ x + self.b @ x + self.gamma


def _solve_spd(H, rhs, damping):
    n = H.shape[0]
    Hd = H + damping * np.eye(n)
    try:
        cf = scipy.linalg.cho_factor(Hd, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        pass
    sol = np.linalg.solve(Hd, rhs)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("non-finite Newton step")
    return sol


def _barrier_value(d: _Data, x, t):
    g = d.g(x)
    if np.any(g >= 0):
        return np.inf
    return t * d.f(x) - np.sum(np.log(-g))


def _max_step(d: _Data, g, J, dx):
    """Largest s with g_i(x + s dx) < 0 for all i (constraints are convex quadratics)."""
    if d.m == 0:
        return np.inf
    a = (d.A @ dx) @ dx
    bq = J @ dx
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(np.maximum(bq**2 - 4.0 * a * g, 0.0))
        quad = (-bq + disc) / (2.0 * a)
        lin = np.where(bq > 0, -g / bq, np.inf)
    roots = np.where(a > 1e-300, quad, lin)
    roots = roots[np.isfinite(roots) & (roots > 0)]
    return float(roots.min(initial=np.inf))


def _center(d: _Data, x, t, cfg: SolverConfig, stop: Callable | None = None):
    """Damped Newton on t*f(x) - sum log(-g_i(x)) from a strictly feasible x.

    Returns (x, iterations, status) with status in {"converged", "stopped",
    "stalled", "max_iter"}.
    """
    alpha, beta = 0.01, 0.5
    for it in range(cfg.max_inner):
        g, J = d.cons(x)
        w = -1.0 / g
        grad = t * (2.0 * d.Q @ x + d.c) + J.T @ w
        H = 2.0 * t * d.Q + (J.T * w**2) @ J
        if d.m:
            H += np.tensordot(2.0 * w, d.A, axes=1)
        dx = _solve_spd(H, -grad, cfg.damping)
        dec2 = float(-grad @ dx)
        phi0 = _barrier_value(d, x, t)
        # at large t the barrier value itself limits what decrement is resolvable
        if dec2 / 2.0 <= max(cfg.newton_tol, 16.0 * np.finfo(float).eps * abs(phi0)):
            return x, it, "converged"
        s = min(1.0, 0.99 * _max_step(d, g, J, dx))
        while True:
            xn = x + s * dx
            phin = _barrier_value(d, xn, t)
            if phin <= phi0 - alpha * s * dec2:
                break
            s *= beta
            if s < 1e-14:
                return x, it, "stalled"
        x = xn
        if stop is not None and stop(x):
            return x, it + 1, "stopped"
    return x, cfg.max_inner, "max_iter"


def _emit(cfg: SolverConfig, **rec):
    if cfg.trace is not None:
        cfg.trace.write(json.dumps(rec) + "\n")


def _barrier(d: _Data, x0, cfg: SolverConfig, stop: Callable | None = None, phase="main", t0=None, gap_tol=None):
    """Outer barrier loop. Returns (x, mu, t, newton_iters, outer_objectives, status)."""
    x = np.array(x0, dtype=float)
    t = cfg.t0 if t0 is None else t0
    gap_tol = cfg.gap_tol if gap_tol is None else gap_tol
    iters = 0
    history = []
    status = "max_iter"
    for outer in range(cfg.max_outer):
        x, it, inner = _center(d, x, t, cfg, stop)
        iters += it
        history.append(d.f(x))
        _emit(cfg, phase=phase, outer=outer, t=t, objective=history[-1], newton=it, inner_status=inner)
        if inner == "stopped":
            status = "stopped"
            break
        if inner == "max_iter":
            status = "max_iter"
            break
        if d.m == 0 or d.m / t < gap_tol:
            status = "converged"
            break
        t *= cfg.growth
    mu = 1.0 / (t * -d.g(x)) if d.m else np.zeros(0)
    return x, mu, t, iters, history, status


# ---------------------------------------------------------------------------
# phase one


def _phase_one_data(d: _Data, radius):
    n, m = d.n, d.m
    nz = n + 1
    A = np.zeros((m + 1, nz, nz))
    A[:m, :n, :n] = d.A
    A[m, :n, :n] = np.eye(n)
    b = np.zeros((m + 1, nz))
    b[:m, :n] = d.b
    b[:m, n] = -1.0
    gamma = np.append(d.gamma, -(radius**2))
    c = np.zeros(nz)
    c[n] = 1.0
    return _Data(np.zeros((nz, nz)), c, A, b, gamma)


def _phase_one(d: _Data, cfg: SolverConfig, x0=None):
    x0 = np.zeros(d.n) if x0 is None else np.asarray(x0, dtype=float)
    if d.m == 0:
        return x0
    g0 = d.g(x0)
    if np.max(g0) < 0:
        return x0
    if x0 @ x0 >= cfg.phase1_radius**2:
        x0 = np.zeros(d.n)
        g0 = d.g(x0)
    margin = 1e-3 * (1.0 + abs(np.max(g0)))
    p1 = _phase_one_data(d, cfg.phase1_radius)
    z0 = np.append(x0, np.max(g0) + 1.0)

    def stop(z):
        return np.max(d.g(z[:-1])) < -margin

    # start t so that the duality-gap estimate m/t matches the initial slack;
    # a large slack with t = t0 costs one Newton step per unit of slack
    t_start = cfg.t0 * min(1.0, p1.m / (1.0 + abs(z0[-1])))
    z, *_ = _barrier(p1, z0, cfg, stop=stop, phase="phase_one", t0=t_start)
    x = z[:-1]
    if np.max(d.g(x)) < 0:
        return x
    raise InfeasibleProblem(f"phase one stalled at max slack {z[-1]:.3e}")


def phase_one(inst: QcqpInstance, cfg: SolverConfig | None = None, x0=None) -> np.ndarray:
    """Return x with max_i g_i(x) < 0, or raise InfeasibleProblem."""
    cfg = cfg or SolverConfig()
    return _phase_one(_Data.from_instance(inst), cfg, x0)


# ---------------------------------------------------------------------------
# polish + residuals


def _kkt_newton(d: _Data, x, nu, active, max_iter=30):
    """Newton on [stationarity; g_active = 0]; least-squares steps when the
    active gradients are (nearly) dependent."""
    n, na = d.n, active.size
    Aa, ba, ga = d.A[active], d.b[active], d.gamma[active]
    scale = 1.0 + np.abs(d.c).max(initial=0.0) + np.abs(d.Q).max(initial=0.0)
    res = np.inf
    for _ in range(max_iter):
        Ax = Aa @ x
        Ja = 2.0 * Ax + ba
        r1 = 2.0 * d.Q @ x + d.c + Ja.T @ nu
        r2 = Ax @ x + ba @ x + ga
        res = max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0))
        if res <= 1e-14 * scale:
            break
        H = 2.0 * d.Q + (np.tensordot(2.0 * nu, Aa, axes=1) if na else 0.0)
        K = np.zeros((n + na, n + na))
        K[:n, :n] = H
        K[:n, n:] = Ja.T
        K[n:, :n] = Ja
        rhs = -np.concatenate([r1, r2])
        try:
            step = np.linalg.solve(K, rhs)
            bad = not np.all(np.isfinite(step)) or np.linalg.norm(K @ step - rhs) > 1e-8 * (1 + np.linalg.norm(rhs))
        except np.linalg.LinAlgError:
            bad = True
        if bad:
            step = np.linalg.lstsq(K, rhs, rcond=1e-12)[0]
        if not np.all(np.isfinite(step)):
            return None
        x = x + step[:n]
        nu = nu + step[n:]
    if res > 1e-11 * scale:
        return None
    return x, nu


def _polish(d: _Data, x, mu, rounds=5):
    """Active-set Newton polish of a barrier solution; None if it fails."""
    g = d.g(x)
    active = np.flatnonzero(mu > -g)
    for _ in range(rounds):
        out = _kkt_newton(d, x.copy(), mu[active].copy(), active)
        if out is None:
            return None
        xp, nu = out
        neg = nu < -1e-12
        if not neg.any():
            break
        active = active[~neg]
    else:
        return None
    mu_new = np.zeros(d.m)
    mu_new[active] = np.clip(nu, 0.0, None)
    inactive = np.setdiff1d(np.arange(d.m), active)
    if inactive.size and np.max(d.g(xp)[inactive]) > 1e-9:
        return None
    return xp, mu_new


def _refit_multipliers(d: _Data, x, mu):
    """Non-negative least-squares multipliers on the near-active constraints."""
    g, J = d.cons(x)
    active = np.flatnonzero(mu > -g)
    if not active.size:
        return mu
    rhs = -(2.0 * d.Q @ x + d.c)
    sol, _ = scipy.optimize.nnls(J[active].T, rhs)
    out = np.zeros(d.m)
    out[active] = sol
    return out


def kkt_residuals(d: _Data, x, mu):
    g, J = d.cons(x)
    stat = 2.0 * d.Q @ x + d.c + J.T @ mu
    return (
        float(np.abs(stat).max(initial=0.0)),
        float(np.abs(mu * g).max(initial=0.0)),
        float(np.max(g, initial=-np.inf)),
    )


def solve_det(inst: QcqpInstance, cfg: SolverConfig | None = None, x0=None) -> KktSolution:
    """Solve the deterministic QCQP; never raises for solver outcomes."""
    cfg = cfg or SolverConfig()
    n, m = inst.n_vars, inst.n_constraints
    d = _Data.from_instance(inst, cfg.regularization)

    def failed(status, x=None):
        x = np.full(n, np.nan) if x is None else x
        return KktSolution(
            x_star=x,
            mu=np.full(m, np.nan),
            stationarity_residual=np.inf,
            comp_slack_residual=np.inf,
            active_flags=np.zeros(m, dtype=bool),
            solve_status=status,
            regularization=cfg.regularization,
        )

    if not inst.is_convex():
        return failed(SolveStatus.NUMERICAL_FAILURE)
    try:
        xs = _phase_one(d, cfg, x0)
    except InfeasibleProblem:
        return failed(SolveStatus.INFEASIBLE)
    except np.linalg.LinAlgError:
        return failed(SolveStatus.NUMERICAL_FAILURE)
    def try_polish(x, mu):
        if not (cfg.polish and m and np.all(np.isfinite(x))):
            return None
        p = _polish(d, x, mu)
        if p is not None and np.linalg.norm(p[0] - x) <= 1e-3 * (1.0 + np.linalg.norm(x)):
            return p
        return None

    # stop early at a loose gap when the active-set polish can finish the job
    loose = max(cfg.gap_tol, POLISH_GAP) if cfg.polish else cfg.gap_tol
    try:
        x, mu, t, iters, history, status = _barrier(d, xs, cfg, gap_tol=loose)
        p = try_polish(x, mu) if status == "converged" else None
        if p is None and status == "converged" and loose > cfg.gap_tol:
            x, mu, _, it2, h2, status = _barrier(d, x, cfg, t0=t * cfg.growth)
            iters += it2
            history += h2
            p = try_polish(x, mu)
    except np.linalg.LinAlgError:
        return failed(SolveStatus.NUMERICAL_FAILURE)

    polished = p is not None
    if polished:
        x, mu = p
    if m and not polished and np.all(np.isfinite(x)):
        mu_fit = _refit_multipliers(d, x, mu)
        if kkt_residuals(d, x, mu_fit)[0] < kkt_residuals(d, x, mu)[0]:
            mu = mu_fit
    stat, comp, gmax = kkt_residuals(d, x, mu)
    if not np.all(np.isfinite(x)):
        sol_status = SolveStatus.NUMERICAL_FAILURE
    elif stat <= 1e-8 and comp <= 1e-8 and gmax <= 1e-8 and np.all(mu >= -1e-10):
        sol_status = SolveStatus.OPTIMAL
    elif status == "max_iter":
        sol_status = SolveStatus.MAX_ITER
    else:
        sol_status = SolveStatus.NUMERICAL_FAILURE
    return KktSolution(
        x_star=x,
        mu=mu,
        stationarity_residual=stat,
        comp_slack_residual=comp,
        active_flags=mu >= cfg.eps_active,
        solve_status=sol_status,
        objective=float(d.f(x) + inst.q),
        newton_iterations=iters,
        outer_objectives=history,
        polished=polished,
        regularization=cfg.regularization,
    )


# ---------------------------------------------------------------------------
# backward


def _solve_damped(K, rhs, dual_start):
    """Solve K y = rhs, retrying with diagonal damping when K is singular."""
    n_tot = K.shape[0]
    sign = np.ones(n_tot)
    sign[dual_start:] = -1.0
    for delta in (0.0, 1e-10, 1e-6):
        Kd = K + delta * np.diag(sign)
        try:
            if np.linalg.cond(Kd) > 1e13:
                continue
            y = np.linalg.solve(Kd, rhs)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(y)):
            return y, delta
    raise SingularKkt("KKT system is singular even after damping")


def kkt_vjp(inst: QcqpInstance, sol: KktSolution, gx, eps_active: float = 1e-6) -> ParamGrad:
    """Vector-Jacobian product of the solution map x*(theta).

    Given gx = dL/dx*, returns dL/d(Q, c, q, A_i, b_i, gamma_i) with matrix
    gradients taken w.r.t. raw (unsymmetrised) entries.
    """
    if not sol.ok:
        raise ValueError(f"cannot differentiate a {sol.solve_status.value} solution")
    gx = np.asarray(gx, dtype=float)
    n, m = inst.n_vars, inst.n_constraints
    if gx.shape != (n,):
        raise ValueError(f"gx has shape {gx.shape}, expected ({n},)")
    d = _Data.from_instance(inst, sol.regularization)
    x, mu = sol.x_star, sol.mu
    g, J = d.cons(x)
    H = 2.0 * d.Q
    if m:
        H = H + np.tensordot(2.0 * mu, d.A, axes=1)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = J.T
    K[n:, :n] = mu[:, None] * J
    K[n:, n:] = np.diag(g)
    y, delta = _solve_damped(K.T, np.concatenate([gx, np.zeros(m)]), n)
    yx, ym = y[:n], y[n:]

    weak = bool(np.any((np.abs(g) <= eps_active) & (mu <= eps_active)))
    sym = np.outer(yx, x) + np.outer(x, yx)
    xx = np.outer(x, x)
    grad = ParamGrad(
        Q=-sym,
        c=-yx,
        q=0.0,
        A=[-mu[i] * sym - ym[i] * mu[i] * xx for i in range(m)],
        b=[-mu[i] * yx - ym[i] * mu[i] * x for i in range(m)],
        gamma=-ym * mu,
        nondifferentiable=weak or delta > 0.0,
    )
    return grad
