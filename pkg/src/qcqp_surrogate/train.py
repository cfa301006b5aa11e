"""Training loops: predictor -> deterministic solve -> worst case -> loss.

The backward pass follows the chain

    dL/dtheta = [dL/dx + dL/dROB2 * dROB2/dx] * dx/dP * dP/dtheta

with dx/dP from the KKT adjoint and dP/dtheta either the identity (a single
surrogate instance) or the predictor's backprop.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import predictor as pr
from .det_layer import SolverConfig, kkt_vjp, solve_det
from .qcqp_core import PackLayout, PEllipsoid, QcqpInstance, eval_constraints, eval_objective
from .robust_oracle import robust_feasible
from .wc_layer import (
    LossBreakdown,
    loss_a,
    loss_grad_x,
    loss_p,
    nominal_realizations,
    rob2_a,
    rob2_p,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "single_instance"  # or "contextual"
    loss_case: str = "p"  # "p": factor ellipsoids, "a": coefficient sets
    penalty: float = 10.0  # tau_i (case P) or lambda_i (case A), broadcast over constraints
    penalty_sign: float = 1.0  # -1 reproduces the literal negative-lambda reading
    steps: int = 200
    batch_size: int = 10
    lr: float = 1e-2
    seed: int = 0
    init_noise: float = 0.0
    robust_tol: float = 1e-6
    eval_every: int = 1
    vanilla_loss: bool = False
    n_train: int = 70
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.mode not in ("single_instance", "contextual"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss_case not in ("p", "a"):
            raise ValueError(f"unknown loss case {self.loss_case!r}")
        if self.penalty_sign not in (1.0, -1.0):
            raise ValueError("penalty_sign must be +1 or -1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Sample:
    z: Optional[np.ndarray]
    observed: QcqpInstance


@dataclass
class StepRecord:
    step: int
    loss: float
    objective: float
    penalty_sum: float
    feasible: bool
    breakdown: Optional[LossBreakdown] = None
    x: Optional[np.ndarray] = None
    nondifferentiable: bool = False
    repeated_eigenvalue: bool = False
    skipped: bool = False
    n_unbounded: int = 0


@dataclass
class BestFeasible:
    x: Optional[np.ndarray] = None
    objective: float = np.inf
    step: int = -1

    @property
    def found(self) -> bool:
        return self.x is not None


class NoFeasibleFound(RuntimeWarning):
    pass


def _uncertain(inst: QcqpInstance):
    return [(i, k) for i, k in enumerate(inst.constraints) if k.uncertainty is not None]


def worst_case_loss(observed: QcqpInstance, x, cfg: TrainConfig):
    """(LossBreakdown, dL/dx) for a fixed decision x."""
    unc = _uncertain(observed)
    coeff = cfg.penalty_sign * cfg.penalty
    if cfg.vanilla_loss:
        items = nominal_realizations(unc, x)
        bd = loss_a(observed, x, items, coeff)
    elif cfg.loss_case == "p":
        sets = [(i, k.uncertainty) for i, k in unc]
        if any(not isinstance(U, PEllipsoid) for _, U in sets):
            raise TypeError("loss case 'p' requires PEllipsoid uncertainty on every uncertain constraint")
        items = rob2_p(sets, x)
        bd = loss_p(observed, x, items, abs(coeff))
    else:
        items = rob2_a(unc, x)
        bd = loss_a(observed, x, items, coeff)
    return bd, loss_grad_x(bd, observed, x, items)


def predict(params, layout: PackLayout, net: pr.PredictorNet | None = None, z=None):
    """Flat surrogate parameters (and forward cache) for one sample."""
    if net is None:
        return np.asarray(params, dtype=float), None
    return pr.forward(net, z)


def train_step(
    params,
    sample: Sample,
    layout: PackLayout,
    cfg: TrainConfig,
    net: pr.PredictorNet | None = None,
    frozen_x=None,
    frozen_vjp: Callable | None = None,
):
    """One forward/backward pass.

    Returns (gradient, StepRecord); gradient is w.r.t. ``params`` when
    ``net`` is None, else w.r.t. ``net.get_params()``. A failed
    deterministic solve yields (None, record with skipped=True).

    ``frozen_x`` bypasses the deterministic solve; the decision gradient is
    then mapped to surrogate parameters by ``frozen_vjp`` (zero if omitted).
    """
    vec, cache = predict(params, layout, net, sample.z)
    surrogate = layout.to_instance(vec)
    obs = sample.observed
    if frozen_x is None:
        sol = solve_det(surrogate, cfg.solver)
        if not sol.ok:
            log.warning("deterministic solve failed (%s); skipping step", sol.solve_status.value)
            rec = StepRecord(-1, np.nan, np.nan, np.nan, False, skipped=True)
            return None, rec
        x = sol.x_star
    else:
        x = np.asarray(frozen_x, dtype=float)

    bd, gx = worst_case_loss(obs, x, cfg)
    feasible, _ = robust_feasible(obs, x, cfg.robust_tol)

    nondiff = False
    if frozen_x is None:
        pg = kkt_vjp(surrogate, sol, gx, cfg.solver.eps_active)
        nondiff = pg.nondifferentiable
        g_vec = layout.pullback(vec, pg)
    elif frozen_vjp is not None:
        g_vec = np.asarray(frozen_vjp(gx), dtype=float)
    else:
        g_vec = np.zeros(layout.size)
    grad = g_vec if net is None else pr.backward(net, cache, g_vec)

    rec = StepRecord(
        step=-1,
        loss=bd.total,
        objective=bd.objective_term,
        penalty_sum=float(bd.penalty_terms.sum()),
        feasible=feasible,
        breakdown=bd,
        x=x,
        nondifferentiable=nondiff,
        repeated_eigenvalue=bd.repeated_eigenvalue,
        n_unbounded=bd.n_unbounded,
    )
    return grad, rec


def chain_loss(params, sample: Sample, layout: PackLayout, cfg: TrainConfig, net: pr.PredictorNet | None = None):
    """Loss value of the full chain (used for finite-difference checks)."""
    if net is not None:
        net = net.copy()
        net.set_params(params)
        vec, _ = pr.forward(net, sample.z)
    else:
        vec = np.asarray(params, dtype=float)
    sol = solve_det(layout.to_instance(vec), cfg.solver)
    if not sol.ok:
        raise RuntimeError(f"deterministic solve failed: {sol.solve_status.value}")
    bd, _ = worst_case_loss(sample.observed, sol.x_star, cfg)
    return bd.total


def write_step_records(records, path):
    """StepRecord stream as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "objective", "feasible", "penalty_sum", "skipped", "nondifferentiable", "unbounded"])
        for r in records:
            w.writerow([r.step, r.loss, r.objective, int(r.feasible), r.penalty_sum, int(r.skipped), int(r.nondifferentiable), r.n_unbounded])


# ---------------------------------------------------------------------------
# single instance


def initial_surrogate(observed: QcqpInstance, layout: PackLayout, cfg: TrainConfig) -> np.ndarray:
    """Nominal coefficients (factor blocks from P0 where available) plus noise."""
    factors = {}
    for i, k in enumerate(observed.constraints):
        name = f"A{i}"
        if name in layout.index and isinstance(k.uncertainty, PEllipsoid):
            P0 = k.uncertainty.P0
            shape = layout.index[name][1]
            M = np.zeros(shape)
            r = min(shape[0], P0.shape[0])
            M[:r] = P0[:r]
            factors[name] = M
    vec = layout.from_instance(observed.certain(), factors)
    if cfg.init_noise > 0:
        rng = np.random.default_rng(cfg.seed)
        vec = vec + cfg.init_noise * rng.normal(size=vec.size)
    return vec


def fit_single_instance(observed: QcqpInstance, layout: PackLayout, cfg: TrainConfig, init=None):
    """Adam on the surrogate coefficients of one uncertain instance.

    Returns (final parameter vector, BestFeasible, list of StepRecord). The
    decision at every iterate (including the final one) is checked with the
    exact robust oracle; the best robust-feasible one is kept.
    """
    vec = initial_surrogate(observed, layout, cfg) if init is None else np.array(init, dtype=float)
    adam = pr.AdamState(lr=cfg.lr)
    best = BestFeasible()
    records = []
    sample = Sample(None, observed)
    for step in range(cfg.steps + 1):
        grad, rec = train_step(vec, sample, layout, cfg)
        rec.step = step
        records.append(rec)
        if rec.skipped:
            continue
        if rec.feasible and rec.objective < best.objective:
            best = BestFeasible(rec.x.copy(), rec.objective, step)
        if step < cfg.steps:
            vec = pr.adam_step(adam, vec, grad)
    if not best.found:
        log.warning("no robust-feasible decision found in %d steps", cfg.steps)
    return vec, best, records


# ---------------------------------------------------------------------------
# contextual


def evaluate(net: pr.PredictorNet, layout: PackLayout, samples, cfg: TrainConfig) -> dict:
    rows = []
    for j, s in enumerate(samples):
        vec, _ = pr.forward(net, s.z)
        sol = solve_det(layout.to_instance(vec), cfg.solver)
        if not sol.ok:
            rows.append({"sample": j, "status": sol.solve_status.value})
            continue
        x = sol.x_star
        nominal_ok = bool(np.all(eval_constraints(s.observed, x) <= cfg.robust_tol))
        robust_ok, worst = robust_feasible(s.observed, x, cfg.robust_tol)
        rows.append(
            {
                "sample": j,
                "status": "optimal",
                "objective": eval_objective(s.observed, x),
                "nominal_feasible": nominal_ok,
                "robust_feasible": robust_ok,
                "max_worst_violation": float(worst.max(initial=-np.inf)),
            }
        )
    solved = [r for r in rows if r["status"] == "optimal"]
    return {
        "n_samples": len(samples),
        "n_solved": len(solved),
        "nominal_feasible": sum(r["nominal_feasible"] for r in solved),
        "robust_feasible": sum(r["robust_feasible"] for r in solved),
        "mean_objective": float(np.mean([r["objective"] for r in solved])) if solved else float("nan"),
        "rows": rows,
    }


def fit_contextual(dataset, net: pr.PredictorNet, layout: PackLayout, cfg: TrainConfig):
    """Mini-batch Adam over the first ``cfg.n_train`` samples, evaluate on the rest.

    Batch gradients are summed. Returns (trained net, records, eval report).
    """
    train_set, test_set = list(dataset[: cfg.n_train]), list(dataset[cfg.n_train :])
    if not train_set:
        raise ValueError("empty training set")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    adam = pr.AdamState(lr=cfg.lr)
    theta = net.get_params()
    order = rng.permutation(len(train_set))
    cursor = 0
    records = []
    for step in range(cfg.steps):
        batch = []
        while len(batch) < min(cfg.batch_size, len(train_set)):
            if cursor == len(order):
                order = rng.permutation(len(train_set))
                cursor = 0
            batch.append(train_set[order[cursor]])
            cursor += 1
        g_sum = np.zeros_like(theta)
        loss = obj = pen = 0.0
        n_feas = n_ok = 0
        nondiff = repeated = False
        for s in batch:
            g, rec = train_step(None, s, layout, cfg, net=net)
            if rec.skipped:
                continue
            n_ok += 1
            g_sum += g
            loss += rec.loss
            obj += rec.objective
            pen += rec.penalty_sum
            n_feas += rec.feasible
            nondiff |= rec.nondifferentiable
            repeated |= rec.repeated_eigenvalue
        records.append(
            StepRecord(
                step,
                loss,
                obj / max(n_ok, 1),
                pen,
                n_ok > 0 and n_feas == n_ok,
                nondifferentiable=nondiff,
                repeated_eigenvalue=repeated,
                skipped=n_ok == 0,
            )
        )
        if n_ok:
            theta = pr.adam_step(adam, theta, g_sum)
            net.set_params(theta)
    report = {
        "train": evaluate(net, layout, train_set, cfg),
        "test": evaluate(net, layout, test_set, cfg) if test_set else None,
    }
    return net, records, report
