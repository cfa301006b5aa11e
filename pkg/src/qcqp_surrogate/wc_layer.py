"""Worst-case layer: constraint violation of a fixed decision under uncertainty.

Two families are handled.

* Factor ellipsoids (PEllipsoid). Robust satisfaction of
  ||P(u)x||^2 + b(u)'x + gamma(u) <= 0 for all ||u|| <= 1 is equivalent to
  S(x, l) being PSD for some l >= 0, where S is an arrow matrix built from
  the generators. We maximise the concave map l -> lambda_min(S(x, l)) and
  penalise the negative part of the spectrum of the maximiser.
* Coefficient sets (ThetaEllipsoid, FrobeniusBall). The constraint is affine
  in the uncertain coefficients for fixed x, so the worst case has a closed
  form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .qcqp_core import (
    FrobeniusBall,
    PEllipsoid,
    QcqpInstance,
    ThetaEllipsoid,
    Triple,
    eval_objective,
)

FEAS_TOL = 1e-9
L_MAX = 1e8
GOLDEN_WIDTH = 1e-10
EIG_GAP_TOL = 1e-8
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SCertificate:
    constraint_index: int
    l_star: float
    S_star: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    feasible: bool
    unbounded: bool = False

    @property
    def lambda_min(self) -> float:
        return float(self.eigvals[0])


@dataclass
class WorstCaseRealization:
    constraint_index: int
    theta_star: Triple
    violation: float


@dataclass
class LossBreakdown:
    objective_term: float
    penalty_terms: np.ndarray
    total: float
    penalty_coeffs: np.ndarray
    repeated_eigenvalue: bool = False
    n_unbounded: int = 0  # certificates that hit the l_max sentinel


# ---------------------------------------------------------------------------
# case P


def s_matrix(U: PEllipsoid, x, l: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (U.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({U.n_vars},)")
    L, m = U.n_generators, U.n_rows
    p0 = U.P0 @ x
    W = np.column_stack([g.P @ x for g in U.generators]) if L else np.zeros((m, 0))
    cvec = np.array([-(g.gamma + g.b @ x) / 2.0 for g in U.generators])
    S = np.zeros((1 + L + m, 1 + L + m))
    S[0, 0] = -U.gamma0 - U.b0 @ x - l
    S[0, 1 : 1 + L] = cvec
    S[1 : 1 + L, 0] = cvec
    S[0, 1 + L :] = p0
    S[1 + L :, 0] = p0
    S[1 : 1 + L, 1 : 1 + L] = l * np.eye(L)
    S[1 + L :, 1 : 1 + L] = W
    S[1 : 1 + L, 1 + L :] = W.T
    S[1 + L :, 1 + L :] = np.eye(m)
    return S


def _lam_min(S) -> float:
    return float(np.linalg.eigvalsh(S)[0])


def maximize_lambda_min(U: PEllipsoid, x):
    """Maximise the concave l -> lambda_min(S(x, l)) over l in [0, L_MAX].

    Returns (l_star, value, unbounded).
    """
    S0 = s_matrix(U, x, 0.0)
    E = np.zeros_like(S0)
    E[0, 0] = -1.0
    L = U.n_generators
    E[1 : 1 + L, 1 : 1 + L] = np.eye(L)

    def f(l):
        return _lam_min(S0 + l * E)

    # expanding bracket 0, 1, 4, 16, ... until the value drops
    prev, cur = 0.0, 0.0
    fcur = f(0.0)
    nxt = 1.0
    unbounded = False
    while True:
        fn = f(nxt)
        if fn < fcur:
            lo, hi = prev, nxt
            break
        prev, cur, fcur = cur, nxt, fn
        if nxt >= L_MAX:
            unbounded = True
            lo, hi = prev, nxt
            break
        nxt = min(4.0 * nxt, L_MAX)
    if unbounded:
        return L_MAX, f(L_MAX), True

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > max(GOLDEN_WIDTH, 4.0 * np.finfo(float).eps * b):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    # the bracket ends are candidates too (maximiser may sit at l = 0)
    cands = [(fc, c), (fd, d), (f(a), a), (f(b), b)]
    val, l_star = max(cands)
    return l_star, val, False


def certificate(U: PEllipsoid, x, index: int = 0) -> SCertificate:
    l_star, _, unbounded = maximize_lambda_min(U, x)
    S = s_matrix(U, x, l_star)
    w, V = np.linalg.eigh(S)
    feasible = bool(unbounded or w[0] >= -FEAS_TOL)
    return SCertificate(index, l_star, S, w, V, feasible, unbounded)


def rob2_p(U_list, x) -> list:
    """One certificate per PEllipsoid in ``U_list`` (entries may be
    (index, set) pairs to keep the original constraint numbering)."""
    out = []
    for k, item in enumerate(U_list):
        i, U = item if isinstance(item, tuple) else (k, item)
        if not isinstance(U, PEllipsoid):
            raise TypeError(f"constraint {i}: rob2_p needs a PEllipsoid, got {type(U).__name__}")
        out.append(certificate(U, x, i))
    return out


def _penalised_spectrum(cert: SCertificate):
    """Negative part sum and its eigenvector weights (cluster-averaged)."""
    w, V = cert.eigvals, cert.eigvecs
    if cert.unbounded:
        return 0.0, np.zeros_like(w), False
    neg = w < 0
    penalty = float(-w[neg].sum())
    weights = neg.astype(float)
    repeated = False
    if neg.any():
        # clusters of (near-)equal eigenvalues: spread the weight evenly
        k = 0
        while k < w.size:
            j = k
            while j + 1 < w.size and w[j + 1] - w[j] < EIG_GAP_TOL:
                j += 1
            if j > k and neg[k : j + 1].any():
                repeated = True
                weights[k : j + 1] = neg[k : j + 1].sum() / (j - k + 1)
            k = j + 1
    return penalty, weights, repeated


def s_bilinear_dx(U: PEllipsoid, u, w) -> np.ndarray:
    """d(u' S w)/dx; S is affine in x so this does not depend on x or l."""
    L = U.n_generators
    u0, ul, um = u[0], u[1 : 1 + L], u[1 + L :]
    w0, wl, wm = w[0], w[1 : 1 + L], w[1 + L :]
    grad = -(u0 * w0) * U.b0 + U.P0.T @ (u0 * wm + w0 * um)
    for j, g in enumerate(U.generators):
        grad += -0.5 * (u0 * wl[j] + ul[j] * w0) * g.b + g.P.T @ (ul[j] * wm + wl[j] * um)
    return grad


def s_matrix_dx(U: PEllipsoid, V: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_k weights_k * d(v_k' S v_k)/dx for eigenvector columns V."""
    out = np.zeros(U.n_vars)
    for k in np.flatnonzero(weights):
        out += weights[k] * s_bilinear_dx(U, V[:, k], V[:, k])
    return out


def _l_direction(U: PEllipsoid):
    """dS/dl (constant)."""
    L = U.n_generators
    E = np.zeros((1 + L + U.n_rows,) * 2)
    E[0, 0] = -1.0
    E[1 : 1 + L, 1 : 1 + L] = np.eye(L)
    return E


def dl_star_dx(U: PEllipsoid, cert: SCertificate) -> np.ndarray:
    """Sensitivity of the maximiser l* of lambda_min(S(x, l)).

    At an interior maximiser with a simple smallest eigenvalue,
    d lambda_1/dl = 0 and the implicit function theorem with second-order
    eigenvalue perturbation gives dl*/dx. Zero when l* sits on the bound,
    the problem is unbounded or lambda_1 is repeated.
    """
    w, V = cert.eigvals, cert.eigvecs
    if cert.unbounded or cert.l_star <= 10 * GOLDEN_WIDTH or w.size < 2 or w[1] - w[0] < EIG_GAP_TOL:
        return np.zeros(U.n_vars)
    E = _l_direction(U)
    v1 = V[:, 0]
    e = V.T @ (E @ v1)  # v_j' E v_1
    gap = w[0] - w[1:]
    d_ll = 2.0 * np.sum(e[1:] ** 2 / gap)
    if d_ll > -1e-14:
        return np.zeros(U.n_vars)
    d_lx = np.zeros(U.n_vars)
    for j in range(1, w.size):
        if abs(e[j]) > 1e-14:
            d_lx += 2.0 * e[j] / gap[j - 1] * s_bilinear_dx(U, V[:, j], v1)
    return -d_lx / d_ll


# ---------------------------------------------------------------------------
# case A


def theta_worst_case(center: Triple, U, x):
    """Exact maximiser of g(x, theta) over a coefficient uncertainty set."""
    x = np.asarray(x, dtype=float)
    nominal = center.value(x)
    if isinstance(U, FrobeniusBall):
        xx = float(x @ x)
        if xx == 0.0:
            return center, nominal
        D = U.radius * np.outer(x, x) / xx
        return Triple(center.A + D, center.b, center.gamma), nominal + U.radius * xx
    if isinstance(U, ThetaEllipsoid):
        dvec = np.array([g.value(x) for g in U.generators])
        nd = float(np.linalg.norm(dvec))
        if nd == 0.0:
            return center, nominal
        u = dvec / nd
        A = center.A + sum(uk * g.A for uk, g in zip(u, U.generators))
        b = center.b + sum(uk * g.b for uk, g in zip(u, U.generators))
        gam = center.gamma + sum(uk * g.gamma for uk, g in zip(u, U.generators))
        return Triple(A, b, gam), nominal + nd
    raise TypeError(f"no closed-form worst case for {type(U).__name__}")


def rob2_a(constraints, x) -> list:
    """Worst-case realisations for constraints with coefficient uncertainty.

    ``constraints`` holds QuadConstraint objects or (index, QuadConstraint)
    pairs; the nominal coefficients act as the set center.
    """
    out = []
    for k, item in enumerate(constraints):
        i, con = item if isinstance(item, tuple) else (k, item)
        theta, val = theta_worst_case(con.triple, con.uncertainty, x)
        out.append(WorstCaseRealization(i, theta, val))
    return out


def nominal_realizations(constraints, x) -> list:
    """The observed coefficients in place of the worst case (vanilla loss)."""
    out = []
    for k, item in enumerate(constraints):
        i, con = item if isinstance(item, tuple) else (k, item)
        out.append(WorstCaseRealization(i, con.triple, con.value(np.asarray(x, dtype=float))))
    return out


# ---------------------------------------------------------------------------
# losses


def _coeffs(m, coeffs):
    arr = np.broadcast_to(np.asarray(coeffs, dtype=float), (m,)).copy()
    return arr


def loss_p(inst_observed: QcqpInstance, x, certs, tau) -> LossBreakdown:
    tau = _coeffs(len(certs), tau)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    obj = eval_objective(inst_observed, x)
    pens = np.zeros(len(certs))
    repeated = False
    for k, cert in enumerate(certs):
        p, _, rep = _penalised_spectrum(cert)
        pens[k] = tau[k] * p
        repeated |= rep
    n_unb = sum(bool(c.unbounded) for c in certs)
    return LossBreakdown(obj, pens, obj + float(pens.sum()), tau, repeated, n_unb)


def loss_a(inst_observed: QcqpInstance, x, realizations, lam) -> LossBreakdown:
    lam = _coeffs(len(realizations), lam)
    obj = eval_objective(inst_observed, x)
    pens = np.array([max(0.0, lam[k] * r.violation) for k, r in enumerate(realizations)])
    return LossBreakdown(obj, pens, obj + float(pens.sum()), lam)


def loss_grad_x(breakdown: LossBreakdown, inst_observed: QcqpInstance, x, items) -> np.ndarray:
    """dL/dx with the inner worst case held fixed (envelope gradient).

    For case P the maximiser l* is not held fixed when more than one
    eigenvalue is penalised: its sensitivity is added so the gradient is that
    of the loss as evaluated.

    ``items`` are the SCertificates (case P) or WorstCaseRealizations
    (case A) used to build ``breakdown``.
    """
    x = np.asarray(x, dtype=float)
    grad = 2.0 * inst_observed.Q @ x + inst_observed.c
    coeffs = breakdown.penalty_coeffs
    for k, item in enumerate(items):
        if isinstance(item, SCertificate):
            i = item.constraint_index
            U = inst_observed.constraints[i].uncertainty
            _, weights, rep = _penalised_spectrum(item)
            if coeffs[k] and weights.any():
                d = s_matrix_dx(U, item.eigvecs, weights)
                if not rep:
                    # the other negative eigenvalues move with l*(x)
                    E = _l_direction(U)
                    el = sum(weights[j] * item.eigvecs[:, j] @ E @ item.eigvecs[:, j] for j in np.flatnonzero(weights))
                    if abs(el) > 1e-14:
                        d += el * dl_star_dx(U, item)
                grad -= coeffs[k] * d
        else:
            if breakdown.penalty_terms[k] > 0.0:
                th = item.theta_star
                grad += coeffs[k] * (2.0 * th.A @ x + th.b)
    return grad
