"""Command-line entry point: ``qcqp-surrogate <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .det_layer import SolverConfig, solve_det
from .experiments import ConfigError, Exp1Config, Exp2Config, run_exp1, run_exp2
from .qcqp_core import PEllipsoid
from .robust_oracle import CuttingPlaneConfig, RobustSolveError, cutting_plane_robust, worst_case_value
from .serialize import SchemaError, load_instance
from .wc_layer import certificate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return d


def _seed(text) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _parse_x(text, n) -> np.ndarray:
    p = Path(text)
    if p.is_file():
        vals = json.loads(p.read_text(encoding="utf-8"))
    else:
        vals = [float(v) for v in text.replace(",", " ").split()]
    x = np.asarray(vals, dtype=float).ravel()
    if x.shape != (n,):
        raise ConfigError(f"x has {x.size} entries, the instance has {n} variables")
    return x


def _write_json(obj, out, name):
    text = json.dumps(obj, indent=1, default=float)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text, encoding="utf-8")
    print(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_exp1(args) -> int:
    cfg = Exp1Config.from_dict(_load_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.loss_case not in (None, "p"):
        raise ConfigError("exp1 uses factor-ellipsoid sets; only --loss-case p applies")
    if args.ablation_vanilla_loss:
        cfg = replace(cfg, vanilla_loss=True)
    rows = run_exp1(cfg, args.out)
    print("size,rc_opt,sur_opt,rel_gap,status")
    for r in rows:
        print(f"{r.size},{r.rc_opt:.6f},{r.sur_opt:.6f},{r.rel_gap:.6f},{r.status}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_NUMERIC


def cmd_exp2(args) -> int:
    cfg = Exp2Config.from_dict(_load_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.loss_case not in (None, "a"):
        raise ConfigError("exp2 uses a Frobenius-ball set; only --loss-case a applies")
    arms = ("vanilla",) if args.ablation_vanilla_loss else ("robust", "vanilla")
    report = run_exp2(cfg, args.out, arms=arms)
    print("arm,n_test,nominal_feasible,robust_feasible,mean_objective")
    failed = False
    for arm, r in report["arms"].items():
        t = r.get("test")
        if not t:
            print(f"{arm},error,{r.get('error')}")
            failed = True
            continue
        print(f"{arm},{t['n_samples']},{t['nominal_feasible']},{t['robust_feasible']},{t['mean_objective']:.6f}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    try:
        solver = SolverConfig(**_load_config(args.config).get("solver", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad solver config: {exc}") from exc
    if args.robust:
        try:
            rep = cutting_plane_robust(inst, CuttingPlaneConfig(solver=solver))
        except RobustSolveError as exc:
            print(json.dumps({"status": "numerical_failure", "error": str(exc)}))
            return EXIT_NUMERIC
        _write_json(rep.to_dict(), args.out, "robust_solution.json")
        return EXIT_OK if rep.status == "converged" else EXIT_NUMERIC
    sol = solve_det(inst.certain(), solver)
    out = {
        "status": sol.solve_status.value,
        "x": sol.x_star.tolist(),
        "mu": sol.mu.tolist(),
        "objective": sol.objective,
        "stationarity_residual": sol.stationarity_residual,
        "comp_slack_residual": sol.comp_slack_residual,
        "newton_iterations": sol.newton_iterations,
    }
    _write_json(out, args.out, "solution.json")
    return EXIT_OK if sol.ok else EXIT_NUMERIC


def cmd_pessimize(args) -> int:
    inst = load_instance(args.instance)
    x = _parse_x(args.x, inst.n_vars)
    rows = []
    for i, con in enumerate(inst.constraints):
        val, theta = worst_case_value(con, x)
        row = {
            "constraint": i,
            "set": type(con.uncertainty).__name__ if con.uncertainty is not None else None,
            "nominal_value": con.value(x),
            "worst_value": val,
            "feasible": bool(val <= args.tol),
            "worst_A": theta.A.tolist(),
            "worst_b": theta.b.tolist(),
            "worst_gamma": theta.gamma,
        }
        if isinstance(con.uncertainty, PEllipsoid):
            cert = certificate(con.uncertainty, x, i)
            row["certificate"] = {"l_star": cert.l_star, "lambda_min": cert.lambda_min, "unbounded": cert.unbounded}
        rows.append(row)
    report = {"x": x.tolist(), "robust_feasible": all(r["feasible"] for r in rows), "constraints": rows}
    _write_json(report, args.out, "pessimize.json")
    return EXIT_OK if all(math.isfinite(r["worst_value"]) for r in rows) else EXIT_NUMERIC


def cmd_check_grads(args) -> int:
    cfg = {"n_instances": 10, "n_chain": 5, "tol_vjp": 1e-4, "tol_chain": 1e-3, "tol_net": 1e-6}
    user = _load_config(args.config)
    unknown = set(user) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown check-grads fields: {sorted(unknown)}")
    cfg.update(user)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    results = {"kkt_vjp": [], "predictor": [], "train_step": []}
    for _ in range(int(cfg["n_instances"])):
        inst, sol = gradcheck.sample_instance(rng)
        results["kkt_vjp"].append(max(gradcheck.check_kkt_vjp(inst, sol, rng).values()))
    for _ in range(3):
        results["predictor"].append(gradcheck.check_predictor(rng))
    for _ in range(int(cfg["n_chain"])):
        err, _ = gradcheck.check_train_step(rng)
        results["train_step"].append(err)
    tols = {"kkt_vjp": cfg["tol_vjp"], "predictor": cfg["tol_net"], "train_step": cfg["tol_chain"]}
    ok = True
    summary = {}
    for name, errs in results.items():
        # a skipped (nan) check counts as a failure
        worst = float(np.max(np.nan_to_num(errs, nan=np.inf))) if errs else 0.0
        passed = bool(worst <= tols[name])
        ok &= passed
        summary[name] = {"max_rel_err": worst, "tol": tols[name], "n": len(errs), "pass": passed}
        print(f"{name:11s} max rel err {worst:.2e} (tol {tols[name]:.0e}, n={len(errs)}) {'PASS' if passed else 'FAIL'}")
    if args.out is not None:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "check_grads.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcqp-surrogate", description="Deterministic surrogates for robust QCQPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=_seed)
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("exp1", help="surrogate vs robust optimum gap table")
    common(sp, "results/exp1")
    sp.add_argument("--loss-case", choices=("p", "a"))
    sp.add_argument("--ablation-vanilla-loss", action="store_true")
    sp.set_defaults(func=cmd_exp1)

    sp = sub.add_parser("exp2", help="contextual portfolio experiment")
    common(sp, "results/exp2")
    sp.add_argument("--loss-case", choices=("p", "a"))
    sp.add_argument("--ablation-vanilla-loss", action="store_true")
    sp.set_defaults(func=cmd_exp2)

    sp = sub.add_parser("solve", help="solve one instance file")
    sp.add_argument("instance")
    sp.add_argument("--robust", action="store_true", help="cutting-plane robust solve instead of nominal")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("pessimize", help="worst-case report for a decision")
    sp.add_argument("instance")
    sp.add_argument("--x", required=True, help="comma-separated values or a JSON file")
    sp.add_argument("--tol", type=float, default=1e-6)
    common(sp)
    sp.set_defaults(func=cmd_pessimize)

    sp = sub.add_parser("check-grads", help="finite-difference gradient suites")
    common(sp)
    sp.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, RobustSolveError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
