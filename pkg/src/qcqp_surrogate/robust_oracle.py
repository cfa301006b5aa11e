"""Ground truth for robust feasibility, independent of the learning stack.

``trs_worst_case`` maximises a factor-ellipsoid constraint over ||u|| <= 1
by solving the equivalent trust-region subproblem exactly (secular equation
plus hard-case correction). ``cutting_plane_robust`` solves a robust QCQP by
alternating deterministic solves with exact pessimisation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .det_layer import SolverConfig, solve_det
from .qcqp_core import (
    FrobeniusBall,
    PEllipsoid,
    QcqpInstance,
    QuadConstraint,
    ThetaEllipsoid,
    Triple,
    eval_objective,
)
from .wc_layer import theta_worst_case


class UnsupportedSet(TypeError):
    pass


class RobustSolveError(RuntimeError):
    pass


@dataclass
class TrsResult:
    u_star: np.ndarray
    worst_value: float
    boundary: bool


def _trs_terms(U: PEllipsoid, x):
    """phi(u) = const + lin'u + u'Gu with G = W'W, W = [P_k x]."""
    p0 = U.P0 @ x
    W = np.column_stack([g.P @ x for g in U.generators])
    beta = np.array([g.b @ x + g.gamma for g in U.generators])
    const = float(p0 @ p0 + U.b0 @ x + U.gamma0)
    lin = 2.0 * W.T @ p0 + beta
    return const, lin, W.T @ W


def trs_phi(U: PEllipsoid, x, u) -> float:
    """Constraint value at the realisation indexed by u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    P = U.P0 + sum(uk * g.P for uk, g in zip(u, U.generators))
    b = U.b0 + sum(uk * g.b for uk, g in zip(u, U.generators))
    gam = U.gamma0 + sum(uk * g.gamma for uk, g in zip(u, U.generators))
    Px = P @ x
    return float(Px @ Px + b @ x + gam)


def realization(U: PEllipsoid, u) -> Triple:
    P = U.P0 + sum(uk * g.P for uk, g in zip(u, U.generators))
    b = U.b0 + sum(uk * g.b for uk, g in zip(u, U.generators))
    gam = U.gamma0 + sum(uk * g.gamma for uk, g in zip(u, U.generators))
    return Triple(P.T @ P, b, gam)


def _secular(lam, gh, max_iter=200):
    """Smallest nu > -lam[0] with ||gh / (lam + nu)|| = 1 (Newton on 1/||u|| - 1)."""
    lo = max(0.0, -lam[0])
    hi = lo + np.linalg.norm(gh) + 1e-300
    nu = hi
    for _ in range(max_iter):
        denom = lam + nu
        if np.any(denom <= 0):
            nu = 0.5 * (lo + hi)
            continue
        uh = gh / denom
        nrm = np.linalg.norm(uh)
        if nrm == 0.0:
            break
        psi = 1.0 / nrm - 1.0
        if abs(psi) <= 1e-15:
            break
        if psi < 0:
            lo = max(lo, nu)
        else:
            hi = min(hi, nu)
        dnrm = -np.sum(gh**2 / denom**3) / nrm
        dpsi = -dnrm / nrm**2
        step = nu - psi / dpsi if dpsi > 0 else 0.5 * (lo + hi)
        if not lo < step < hi:
            step = 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * max(1.0, abs(hi)):
            nu = step
            break
        nu = step
    return -gh / (lam + nu)


def trs_worst_case(U: PEllipsoid, x) -> TrsResult:
    """Exact max of the constraint over the factor ellipsoid at fixed x."""
    x = np.asarray(x, dtype=float)
    const, lin, G = _trs_terms(U, x)
    # min_{||u||<=1} 0.5 u'Hu + g'u with H = -2G, g = -lin
    H = -2.0 * G
    g = -lin
    lam, V = np.linalg.eigh(H)
    gh = V.T @ g
    scale = max(1.0, np.abs(lam).max(initial=0.0), np.linalg.norm(g))
    L = lin.size

    def phi(u):
        return const + lin @ u + u @ G @ u

    if np.abs(lam).max(initial=0.0) <= 1e-14 * scale and np.linalg.norm(g) <= 1e-14 * scale:
        u = np.zeros(L)
        return TrsResult(u, phi(u), False)

    candidates = []
    if np.linalg.norm(g) > 0:
        u = V @ _secular(lam, gh)
        candidates.append(u / max(1.0, np.linalg.norm(u)))
    # hard case: gradient (nearly) orthogonal to the leftmost eigenspace
    tol = 1e-10 * scale
    first = np.abs(lam - lam[0]) <= tol
    rest = ~first
    u_rest = np.zeros(L)
    u_rest[rest] = -gh[rest] / (lam[rest] - lam[0])
    r2 = float(u_rest @ u_rest)
    if r2 <= 1.0:
        z = np.zeros(L)
        z[np.flatnonzero(first)[0]] = 1.0
        tau = np.sqrt(1.0 - r2)
        for sgn in (1.0, -1.0):
            candidates.append(V @ (u_rest + sgn * tau * z))
    vals = [phi(u) for u in candidates]
    k = int(np.argmax(vals))
    u = candidates[k]
    return TrsResult(u, float(vals[k]), bool(np.linalg.norm(u) >= 1.0 - 1e-9))


def worst_case_value(con: QuadConstraint, x) -> tuple:
    """(worst value, worst realisation Triple) of one constraint at x."""
    U = con.uncertainty
    if U is None:
        return con.value(x), con.triple
    if isinstance(U, PEllipsoid):
        res = trs_worst_case(U, x)
        return res.worst_value, realization(U, res.u_star)
    if isinstance(U, (ThetaEllipsoid, FrobeniusBall)):
        theta, val = theta_worst_case(con.triple, U, x)
        return val, theta
    raise UnsupportedSet(f"unsupported uncertainty set {type(U).__name__}")


def robust_feasible(inst: QcqpInstance, x, tol: float = 1e-6):
    """(all worst values <= tol, per-constraint worst values)."""
    x = np.asarray(x, dtype=float)
    vals = np.array([worst_case_value(k, x)[0] for k in inst.constraints])
    return bool(np.all(vals <= tol)), vals


# ---------------------------------------------------------------------------
# cutting plane


@dataclass(frozen=True)
class CuttingPlaneConfig:
    tol_cut: float = 1e-7
    max_cuts: int = 200
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class RobustSolveReport:
    x_robust: np.ndarray
    objective: float
    cuts_added: int
    max_residual_violation: float
    iterations: int
    status: str = "converged"
    degenerate: bool = False
    objective_history: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["x_robust"] = np.asarray(self.x_robust).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def cutting_plane_robust(inst: QcqpInstance, cfg: CuttingPlaneConfig | None = None) -> RobustSolveReport:
    cfg = cfg or CuttingPlaneConfig()
    base = list(inst.certain().constraints)
    uncertain = [i for i, k in enumerate(inst.constraints) if k.uncertainty is not None]
    cuts = []
    history = []
    prev_viol = np.inf
    x = None
    for it in range(cfg.max_cuts + 1):
        relaxed = QcqpInstance(inst.Q, inst.c, inst.q, tuple(base + cuts))
        sol = solve_det(relaxed, cfg.solver, x0=None)
        if not sol.ok:
            raise RobustSolveError(f"relaxation {it} failed: {sol.solve_status.value}")
        x = sol.x_star
        history.append(eval_objective(inst, x))
        worst = [worst_case_value(inst.constraints[i], x) for i in uncertain]
        viols = np.array([w[0] for w in worst])
        max_viol = float(viols.max(initial=-np.inf))
        if max_viol <= cfg.tol_cut:
            return RobustSolveReport(x, history[-1], len(cuts), max_viol, it + 1, "converged", False, history)
        if abs(prev_viol - max_viol) < 1e-10:
            return RobustSolveReport(x, history[-1], len(cuts), max_viol, it + 1, "degenerate", True, history)
        prev_viol = max_viol
        if len(cuts) >= cfg.max_cuts:
            break
        for (val, theta) in worst:
            if val > cfg.tol_cut:
                cuts.append(QuadConstraint(theta.A, theta.b, theta.gamma))
    return RobustSolveReport(x, history[-1], len(cuts), max_viol, cfg.max_cuts, "max_iter", False, history)
