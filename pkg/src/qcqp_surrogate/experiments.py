"""Problem generators, metrics and experiment runners."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group, wishart

from . import __version__
from . import predictor as pr
from .det_layer import SolverConfig, solve_det
from .qcqp_core import (
    FrobeniusBall,
    PackLayout,
    PEllipsoid,
    PTriple,
    QcqpInstance,
    QuadConstraint,
)
from .robust_oracle import CuttingPlaneConfig, cutting_plane_robust, robust_feasible
from .train import Sample, TrainConfig, fit_contextual, fit_single_instance, write_step_records

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# experiment 1: single uncertain instances with factor-ellipsoid sets


@dataclass(frozen=True)
class Exp1Config:
    sizes: tuple = (10, 20, 30, 40, 50)
    n_constraints: int = 5
    L: int = 4
    seed: int = 0
    steps: int = 200
    generator_scale: float = 0.1
    lr: float = 1e-2
    penalty: float = 1.0
    init_noise: float = 0.05
    vanilla_loss: bool = False  # ablation: nominal constraint penalty instead of the worst case

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sizes must be positive")
        if self.n_constraints < 1 or self.L < 1 or self.steps < 0:
            raise ValueError("n_constraints and L must be >= 1, steps >= 0")
        if self.generator_scale < 0:
            raise ValueError("generator_scale must be non-negative")

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _exp1_instance(n, cfg: Exp1Config, rng) -> QcqpInstance:
    c = rng.normal(size=n)
    c /= np.linalg.norm(c)
    cons = []
    for _ in range(cfg.n_constraints):
        P0 = rng.normal(size=(n, n)) / np.sqrt(n)
        b0 = rng.normal(size=n) / np.sqrt(n)
        g0 = -1.0
        gens = []
        for _ in range(cfg.L):
            G = rng.normal(size=(n, n))
            gb = rng.normal(size=n)
            s = cfg.generator_scale
            gens.append(
                PTriple(
                    s * np.linalg.norm(P0) * G / np.linalg.norm(G),
                    s * np.linalg.norm(b0) * gb / np.linalg.norm(gb),
                    s * abs(g0) * rng.choice([-1.0, 1.0]),
                )
            )
        cons.append(QuadConstraint.from_p_ellipsoid(PEllipsoid(P0, b0, g0, tuple(gens))))
    return QcqpInstance(np.zeros((n, n)), c, 0.0, tuple(cons))


def gen_exp1(cfg: Exp1Config) -> list:
    """One instance per size: linear objective, PEllipsoid constraints.

    Each instance is checked to be robustly strictly feasible at x = 0.
    """
    rng = np.random.default_rng(cfg.seed)
    out = []
    for n in cfg.sizes:
        for _ in range(100):
            inst = _exp1_instance(n, cfg, rng)
            ok, worst = robust_feasible(inst, np.zeros(n), tol=0.0)
            if ok and worst.max() < 0:
                out.append(inst)
                break
        else:
            raise RuntimeError(f"could not generate a robustly feasible instance of size {n}")
    return out


def exp1_layout(inst: QcqpInstance) -> PackLayout:
    """Learn c and every (A_i, b_i, gamma_i); Q and q stay at zero."""
    blocks = ["c"]
    for i in range(inst.n_constraints):
        blocks += [f"A{i}", f"b{i}", f"gamma{i}"]
    return PackLayout(inst.certain(), tuple(blocks))


def relative_gap(surrogate_obj: float, robust_obj: float) -> float:
    if abs(robust_obj) < 1e-12:
        raise ZeroDivisionError("robust objective too close to zero for a relative gap")
    return (surrogate_obj - robust_obj) / abs(robust_obj)


@dataclass
class GapRow:
    size: int
    rc_opt: float
    sur_opt: float
    rel_gap: float
    det_seconds: float = float("nan")
    rc_seconds: float = float("nan")
    best_step: int = -1
    status: str = "ok"
    x_best: list | None = None
    unbounded_events: int = 0


def run_exp1(cfg: Exp1Config, out_dir=None, solver: SolverConfig | None = None) -> list:
    """Gap table: cutting-plane robust optimum vs best feasible surrogate decision."""
    solver = solver or SolverConfig()
    rows = []
    for inst in gen_exp1(cfg):
        n = inst.n_vars
        try:
            t0 = time.perf_counter()
            rc = cutting_plane_robust(inst, CuttingPlaneConfig(solver=solver))
            rc_s = time.perf_counter() - t0
            t0 = time.perf_counter()
            solve_det(inst.certain(), solver)
            det_s = time.perf_counter() - t0
            tcfg = TrainConfig(
                mode="single_instance",
                loss_case="p",
                penalty=cfg.penalty,
                steps=cfg.steps,
                lr=cfg.lr,
                seed=cfg.seed + n,
                init_noise=cfg.init_noise,
                vanilla_loss=cfg.vanilla_loss,
                solver=solver,
            )
            _, best, records = fit_single_instance(inst, exp1_layout(inst), tcfg)
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_step_records(records, Path(out_dir) / f"exp1_steps_n{n}.csv")
            n_unb = sum(r.n_unbounded for r in records)
            if n_unb:
                log.warning("size %d: %d unbounded certificate events", n, n_unb)
            if not best.found:
                rows.append(GapRow(n, rc.objective, float("nan"), float("nan"), det_s, rc_s, -1, "no_feasible", unbounded_events=n_unb))
                continue
            gap = relative_gap(best.objective, rc.objective)
            rows.append(GapRow(n, rc.objective, best.objective, gap, det_s, rc_s, best.step, x_best=best.x.tolist(), unbounded_events=n_unb))
        except Exception as exc:  # a failed row must not abort the table
            log.exception("size %d failed", n)
            rows.append(GapRow(n, float("nan"), float("nan"), float("nan"), status=f"error: {exc}"))
    if out_dir is not None:
        _write_exp1(rows, cfg, Path(out_dir))
    return rows


def _write_exp1(rows, cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "exp1_gap_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "rc_opt", "sur_opt", "rel_gap"])
        for r in rows:
            w.writerow([r.size, r.rc_opt, r.sur_opt, r.rel_gap])
    manifest = {
        "experiment": "exp1",
        "version": __version__,
        "config": asdict(cfg),
        "rows": [asdict(r) for r in rows],
        "notes": "robust baseline: cutting-plane solver with exact pessimisation",
    }
    (out / "exp1_manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# experiment 2: contextual portfolio problem with Frobenius-ball sets


@dataclass(frozen=True)
class Exp2Config:
    n_samples: int = 100
    n_context: int = 4
    wishart_df: int = 50
    n_assets: int = 5
    risk: float = 1.0
    cost_low: float = 0.5
    cost_high: float = 1.5
    n_train: int = 70
    radius: float = 1.0
    seed: int = 0
    covariance_convention: str = "inverse"  # "inverse": D^-1/2 C D^-1/2, "standard": D^1/2 C D^1/2
    hidden: int = 32
    steps: int = 150
    batch_size: int = 10
    lr: float = 1e-2
    penalty: float = 1.0

    def __post_init__(self):
        if self.covariance_convention not in ("inverse", "standard"):
            raise ValueError("covariance_convention must be 'inverse' or 'standard'")
        if not 0 < self.n_train < self.n_samples:
            raise ValueError("n_train must be between 0 and n_samples")
        if self.wishart_df < self.n_assets:
            raise ValueError("wishart_df must be at least n_assets")
        if self.radius <= 0 or self.risk <= 0:
            raise ValueError("radius and risk must be positive")

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class Exp2Data:
    C: np.ndarray
    weights: np.ndarray
    cost: np.ndarray
    contexts: np.ndarray
    sigma_cond: list
    sigma_real: list
    samples: list = field(default_factory=list)


def correlation_matrix(n, rng) -> np.ndarray:
    eig = rng.uniform(0.1, 1.0, size=n)
    V = ortho_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))
    C = (V * eig) @ V.T
    d = np.sqrt(np.diag(C))
    C = C / np.outer(d, d)
    np.fill_diagonal(C, 1.0)
    return C


def portfolio_instance(sigma, cost, risk, radius) -> QcqpInstance:
    """min -c'x s.t. x'Sigma x <= r (uncertain), 1'x <= 1, x >= 0."""
    n = cost.size
    cons = [QuadConstraint(sigma, np.zeros(n), -risk, FrobeniusBall(radius))]
    cons.append(QuadConstraint(np.zeros((n, n)), np.ones(n), -1.0))
    for k in range(n):
        e = np.zeros(n)
        e[k] = -1.0
        cons.append(QuadConstraint(np.zeros((n, n)), e, 0.0))
    return QcqpInstance(np.zeros((n, n)), -cost, 0.0, tuple(cons))


def gen_exp2(cfg: Exp2Config) -> Exp2Data:
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_assets, cfg.n_context
    C = correlation_matrix(n, rng)
    weights = rng.dirichlet(np.ones(k), size=n)
    cost = rng.uniform(cfg.cost_low, cfg.cost_high, size=n)
    contexts = rng.uniform(0.1, 1.0, size=(cfg.n_samples, k))
    sig_cond, sig_real, samples = [], [], []
    for z in contexts:
        var = weights @ z
        s = var ** (-0.5) if cfg.covariance_convention == "inverse" else var**0.5
        sigma = C * np.outer(s, s)
        for _ in range(10):
            real = wishart(df=cfg.wishart_df, scale=sigma).rvs(random_state=rng) / cfg.wishart_df
            real = np.atleast_2d(real)
            if np.linalg.eigvalsh(real)[0] >= -1e-10:
                break
        else:
            raise RuntimeError("Wishart draw was not PSD")
        sig_cond.append(sigma)
        sig_real.append(real)
        samples.append(Sample(z, portfolio_instance(real, cost, cfg.risk, cfg.radius)))
    return Exp2Data(C, weights, cost, contexts, sig_cond, sig_real, samples)


def exp2_layout(data: Exp2Data, cfg: Exp2Config) -> PackLayout:
    """Learn the cost vector and the factor of the risk matrix."""
    template = data.samples[0].observed.certain()
    return PackLayout(template, ("c", "A0"))


def exp2_net(data: Exp2Data, layout: PackLayout, cfg: Exp2Config, rng) -> pr.PredictorNet:
    """Two-layer ReLU net; output bias puts the factor at a scaled identity
    and the cost head at the template cost."""
    train = data.sigma_real[: cfg.n_train]
    scale = float(np.sqrt(np.mean([np.mean(np.diag(s)) for s in train])))
    n = cfg.n_assets
    bias = layout.pack({"c": layout.template.c, "A0": scale * np.eye(n)})
    heads = dict(layout.index)
    return pr.PredictorNet.init([cfg.n_context, cfg.hidden, layout.size], ["relu", "identity"], rng, bias, heads)


def run_exp2(cfg: Exp2Config, out_dir=None, solver: SolverConfig | None = None, arms=("robust", "vanilla")) -> dict:
    """Train the robust-loss and vanilla-loss arms from the same initial net."""
    solver = solver or SolverConfig()
    data = gen_exp2(cfg)
    layout = exp2_layout(data, cfg)
    net0 = exp2_net(data, layout, cfg, np.random.default_rng(cfg.seed + 1))
    report = {"config": asdict(cfg), "version": __version__, "arms": {}}
    for arm in arms:
        tcfg = TrainConfig(
            mode="contextual",
            loss_case="a",
            penalty=cfg.penalty,
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            seed=cfg.seed,
            n_train=cfg.n_train,
            vanilla_loss=(arm == "vanilla"),
            solver=solver,
        )
        try:
            t0 = time.perf_counter()
            _, records, ev = fit_contextual(data.samples, net0, layout, tcfg)
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_step_records(records, Path(out_dir) / f"exp2_steps_{arm}.csv")
            report["arms"][arm] = {
                "test": ev["test"],
                "train": {k: v for k, v in ev["train"].items() if k != "rows"},
                "seconds": time.perf_counter() - t0,
                "loss_trace": [r.loss for r in records],
            }
        except Exception as exc:
            log.exception("arm %s failed", arm)
            report["arms"][arm] = {"error": str(exc)}
    if out_dir is not None:
        _write_exp2(report, Path(out_dir))
    return report


def _write_exp2(report, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "exp2_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "n_test", "nominal_feasible", "robust_feasible", "mean_objective"])
        for arm, r in report["arms"].items():
            t = r.get("test")
            if t:
                w.writerow([arm, t["n_samples"], t["nominal_feasible"], t["robust_feasible"], t["mean_objective"]])
    (out / "exp2_manifest.json").write_text(json.dumps(report, indent=1, default=float), encoding="utf-8")
