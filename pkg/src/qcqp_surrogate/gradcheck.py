"""Finite-difference checks for the differentiable pieces.

Used by the ``check-grads`` subcommand and the test-suite. Every check
perturbs one parameter block along a random direction and compares the
central difference with the analytic directional derivative.
"""
from __future__ import annotations

import numpy as np

from . import predictor as pr
from .det_layer import SolverConfig, kkt_vjp, solve_det
from .qcqp_core import PEllipsoid, PTriple, QcqpInstance, QuadConstraint, full_layout

REL_FLOOR = 1e-6


def rel_err(a, b, floor=REL_FLOOR) -> float:
    return float(abs(a - b) / max(abs(a), abs(b), floor))


def _rand_pd(rng, n, shift=0.1):
    M = rng.normal(size=(n, n))
    return M.T @ M / n + shift * np.eye(n)


def _rand_sym(rng, n):
    V = rng.normal(size=(n, n))
    return 0.5 * (V + V.T)


def random_convex_instance(rng, n=None, m=None) -> QcqpInstance:
    """Strictly convex instance with x = 0 strictly feasible."""
    n = int(rng.integers(3, 21)) if n is None else n
    m = int(rng.integers(1, 6)) if m is None else m
    cons = tuple(QuadConstraint(_rand_pd(rng, n), rng.normal(size=n), -rng.uniform(0.5, 2.0)) for _ in range(m))
    return QcqpInstance(_rand_pd(rng, n), 3.0 * rng.normal(size=n), 0.0, cons)


def active_margin(inst: QcqpInstance, sol) -> float:
    """min_i max(mu_i, -g_i): distance from a weakly active constraint."""
    g = np.array([k.value(sol.x_star) for k in inst.constraints])
    return float(np.min(np.maximum(sol.mu, -g), initial=np.inf))


def sample_instance(rng, margin=1e-3, solver=None, max_tries=100, **kw):
    """A random instance whose optimum is strictly complementary by ``margin``."""
    solver = solver or SolverConfig()
    for _ in range(max_tries):
        inst = random_convex_instance(rng, **kw)
        sol = solve_det(inst, solver)
        if sol.ok and active_margin(inst, sol) >= margin:
            return inst, sol
    raise RuntimeError("no instance with the requested active-set margin")


def _perturb(inst: QcqpInstance, block: str, V, s):
    if block == "Q":
        return inst.replace(Q=inst.Q + s * V)
    if block == "c":
        return inst.replace(c=inst.c + s * V)
    if block == "q":
        return inst.replace(q=inst.q + s * V)
    kind, i = block.rstrip("0123456789"), int(block[len(block.rstrip("0123456789")) :])
    cons = list(inst.constraints)
    k = cons[i]
    A, b, g = k.A, k.b, k.gamma
    if kind == "A":
        A = A + s * V
    elif kind == "b":
        b = b + s * V
    else:
        g = g + s * V
    cons[i] = QuadConstraint(A, b, g)
    return inst.replace(constraints=tuple(cons))


def _block_grad(pg, block):
    if block in ("Q", "c", "q"):
        return getattr(pg, block)
    kind, i = block.rstrip("0123456789"), int(block[len(block.rstrip("0123456789")) :])
    return {"A": pg.A, "b": pg.b, "gamma": pg.gamma}[kind][i]


def check_kkt_vjp(inst: QcqpInstance, sol, rng, h=1e-5, solver=None) -> dict:
    """Relative error of kkt_vjp against central differences, per block."""
    solver = solver or SolverConfig()
    n, m = inst.n_vars, inst.n_constraints
    gx = rng.normal(size=n)
    pg = kkt_vjp(inst, sol, gx)
    # blocks of inactive constraints have exactly zero gradient; compare
    # those against the problem scale rather than against zero
    floor = REL_FLOOR * np.linalg.norm(gx) * (1.0 + np.linalg.norm(sol.x_star))
    blocks = ["Q", "c", "q"] + [f"{k}{i}" for i in range(m) for k in ("A", "b", "gamma")]
    out = {}
    for block in blocks:
        if block[0] in "QA":
            V = _rand_sym(rng, n)
        elif block[0] in "cb":
            V = rng.normal(size=n)
        else:
            V = float(rng.normal())
        xp = solve_det(_perturb(inst, block, V, h), solver).x_star
        xm = solve_det(_perturb(inst, block, V, -h), solver).x_star
        fd = float(gx @ (xp - xm)) / (2.0 * h)
        an = float(np.sum(np.asarray(_block_grad(pg, block)) * V))
        out[block] = rel_err(fd, an, floor)
    return out


def check_predictor(rng, widths=(4, 8, 6), activations=("tanh", "identity"), h=1e-6) -> float:
    """Directional relative error of predictor.backward."""
    net = pr.PredictorNet.init(list(widths), list(activations), rng)
    z = rng.normal(size=widths[0])
    g_out = rng.normal(size=widths[-1])
    _, cache = pr.forward(net, z)
    grad = pr.backward(net, cache, g_out)
    theta = net.get_params()
    v = rng.normal(size=theta.size)

    def f(t):
        k = net.copy()
        k.set_params(t)
        return float(g_out @ pr.forward(k, z)[0])

    fd = (f(theta + h * v) - f(theta - h * v)) / (2.0 * h)
    return rel_err(fd, float(grad @ v))


def random_p_instance(rng, n, m=2, L=2, scale=0.1, rows=None) -> QcqpInstance:
    """Linear objective with PEllipsoid-uncertain constraints, x = 0 robustly feasible."""
    rows = n if rows is None else rows
    cons = []
    for _ in range(m):
        P0 = rng.normal(size=(rows, n)) / np.sqrt(n)
        b0 = rng.normal(size=n) / np.sqrt(n)
        gens = tuple(
            PTriple(scale * rng.normal(size=(rows, n)) / np.sqrt(n), scale * rng.normal(size=n) / np.sqrt(n), scale * rng.normal())
            for _ in range(L)
        )
        cons.append(QuadConstraint.from_p_ellipsoid(PEllipsoid(P0, b0, -1.0, gens)))
    c = rng.normal(size=n)
    return QcqpInstance(np.zeros((n, n)), c / np.linalg.norm(c), 0.0, tuple(cons))


def check_train_step(rng, n=4, penalty=1.0, h=1e-5, solver=None, noise=0.3):
    """End-to-end directional check of train_step on a single surrogate.

    Returns (relative error, record) so callers can skip kink cases.
    """
    from .train import Sample, TrainConfig, chain_loss, initial_surrogate, train_step

    solver = solver or SolverConfig()
    obs = random_p_instance(rng, n)
    layout = full_layout(obs.certain(), learn_Q=False)
    cfg = TrainConfig(loss_case="p", penalty=penalty, init_noise=noise, seed=int(rng.integers(1 << 31)), solver=solver)
    vec = initial_surrogate(obs, layout, cfg)
    sample = Sample(None, obs)
    grad, rec = train_step(vec, sample, layout, cfg)
    if grad is None:
        return np.nan, rec
    v = rng.normal(size=vec.size)
    fd = (chain_loss(vec + h * v, sample, layout, cfg) - chain_loss(vec - h * v, sample, layout, cfg)) / (2.0 * h)
    return rel_err(fd, float(grad @ v)), rec
