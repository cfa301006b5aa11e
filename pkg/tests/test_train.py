import csv

import numpy as np
import pytest

from qcqp_surrogate import gradcheck
from qcqp_surrogate import predictor as pr
from qcqp_surrogate.det_layer import kkt_vjp, solve_det
from qcqp_surrogate.qcqp_core import FrobeniusBall, QuadConstraint, full_layout
from qcqp_surrogate.train import (
    Sample,
    TrainConfig,
    chain_loss,
    fit_contextual,
    fit_single_instance,
    initial_surrogate,
    train_step,
    worst_case_loss,
    write_step_records,
)


def setup(seed=0, n=4, **kw):
    rng = np.random.default_rng(seed)
    obs = gradcheck.random_p_instance(rng, n)
    layout = full_layout(obs.certain(), learn_Q=False)
    cfg = TrainConfig(**{"loss_case": "p", "penalty": 1.0, **kw})
    return obs, layout, cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="online")
    with pytest.raises(ValueError):
        TrainConfig(loss_case="q")
    with pytest.raises(ValueError):
        TrainConfig(penalty_sign=0.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_zero_penalty_reduces_to_objective():
    obs, layout, cfg = setup(penalty=0.0, init_noise=0.3)
    vec = initial_surrogate(obs, layout, cfg)
    grad, rec = train_step(vec, Sample(None, obs), layout, cfg)
    assert rec.penalty_sum == 0.0 and rec.loss == rec.objective
    sur = layout.to_instance(vec)
    sol = solve_det(sur)
    # plain objective gradient pulled back through the solver
    ref = layout.pullback(vec, kkt_vjp(sur, sol, 2 * obs.Q @ sol.x_star + obs.c))
    assert np.allclose(grad, ref, atol=1e-12)


def test_zero_penalty_every_step():
    obs, layout, cfg = setup(seed=5, penalty=0.0, steps=5, init_noise=0.3)
    _, _, recs = fit_single_instance(obs, layout, cfg)
    assert all(r.loss == r.objective and r.penalty_sum == 0.0 for r in recs if not r.skipped)


def test_certain_problem_has_no_penalty():
    rng = np.random.default_rng(6)
    obs = gradcheck.random_p_instance(rng, 3).certain()
    layout = full_layout(obs, learn_Q=False)
    cfg = TrainConfig(loss_case="a", penalty=10.0)
    vec = layout.from_instance()
    grad, rec = train_step(vec, Sample(None, obs), layout, cfg)
    assert rec.penalty_sum == 0.0 and rec.feasible
    sol = solve_det(obs)
    ref = layout.pullback(vec, kkt_vjp(obs, sol, obs.c))
    assert np.allclose(grad, ref, atol=1e-12)


def test_chain_rule_factorisation():
    # dL/dx by finite differences, pushed through the separately validated VJP
    obs, layout, cfg = setup(seed=8, init_noise=0.3)
    vec = initial_surrogate(obs, layout, cfg)
    grad, rec = train_step(vec, Sample(None, obs), layout, cfg)
    x = rec.x
    h = 1e-4
    gx = np.array([(worst_case_loss(obs, x + h * e, cfg)[0].total - worst_case_loss(obs, x - h * e, cfg)[0].total) / (2 * h) for e in np.eye(x.size)])
    sur = layout.to_instance(vec)
    ref = layout.pullback(vec, kkt_vjp(sur, solve_det(sur), gx))
    assert np.linalg.norm(grad - ref) <= 1e-3 * max(1.0, np.linalg.norm(ref))


def test_loss_case_p_requires_factor_sets():
    obs, _, cfg = setup()
    k = obs.constraints[0]
    bad = obs.replace(constraints=(QuadConstraint(k.A, k.b, k.gamma, FrobeniusBall(0.1)),))
    with pytest.raises(TypeError):
        worst_case_loss(bad, np.zeros(4), cfg)


def test_vanilla_loss_ignores_uncertainty():
    obs, _, _ = setup()
    cfg = TrainConfig(vanilla_loss=True, penalty=2.0)
    x = np.full(4, 0.4)
    bd, gx = worst_case_loss(obs, x, cfg)
    viol = np.array([k.value(x) for k in obs.constraints])
    assert np.allclose(bd.penalty_terms, 2.0 * np.maximum(viol, 0.0))
    assert gx.shape == (4,)


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    err, rec = gradcheck.check_train_step(rng)
    assert not rec.skipped
    assert err <= 1e-3


def test_end_to_end_with_predictor():
    rng = np.random.default_rng(7)
    obs, layout, cfg = setup(seed=7, init_noise=0.2)
    bias = initial_surrogate(obs, layout, cfg)
    net = pr.PredictorNet.init([3, 6, layout.size], ["tanh", "identity"], rng, output_bias=bias)
    net.weights[-1] *= 0.05
    sample = Sample(rng.normal(size=3), obs)
    theta = net.get_params()
    grad, rec = train_step(None, sample, layout, cfg, net=net)
    assert grad.shape == theta.shape
    for _ in range(3):
        v = rng.normal(size=theta.size)
        h = 1e-5
        fd = (chain_loss(theta + h * v, sample, layout, cfg, net) - chain_loss(theta - h * v, sample, layout, cfg, net)) / (2 * h)
        assert gradcheck.rel_err(fd, grad @ v) <= 1e-3


def test_frozen_decision_bypasses_solver():
    obs, layout, cfg = setup()
    vec = initial_surrogate(obs, layout, cfg)
    x = np.full(4, 0.1)
    seen = {}

    def vjp(gx):
        seen["gx"] = gx
        return np.ones(layout.size)

    grad, rec = train_step(vec, Sample(None, obs), layout, cfg, frozen_x=x, frozen_vjp=vjp)
    assert np.array_equal(rec.x, x) and np.array_equal(grad, np.ones(layout.size))
    assert np.allclose(seen["gx"], worst_case_loss(obs, x, cfg)[1])
    grad, _ = train_step(vec, Sample(None, obs), layout, cfg, frozen_x=x)
    assert np.array_equal(grad, np.zeros(layout.size))


def test_failed_solve_is_skipped():
    obs, layout, cfg = setup()
    vals = layout.unpack(initial_surrogate(obs, layout, cfg))
    # x'A0x + b0'x <= -100 has no solution for A0 = I, b0 = 0
    vals["A0"] = np.eye(4)
    vals["b0"] = np.zeros(4)
    vals["gamma0"] = 100.0
    grad, rec = train_step(layout.pack(vals), Sample(None, obs), layout, cfg)
    assert grad is None and rec.skipped
    vec, best, recs = fit_single_instance(obs, layout, TrainConfig(steps=0), init=layout.pack(vals))
    assert recs[0].skipped and not best.found


def test_fit_is_deterministic_and_best_is_monotone():
    obs, layout, cfg = setup(seed=0, steps=15, init_noise=0.05, lr=0.05)
    v1, b1, r1 = fit_single_instance(obs, layout, cfg)
    v2, b2, r2 = fit_single_instance(obs, layout, cfg)
    assert np.array_equal(v1, v2) and [r.loss for r in r1] == [r.loss for r in r2]
    assert len(r1) == cfg.steps + 1
    # the tracked best is the lowest feasible objective seen so far
    feas = [r.objective for r in r1 if r.feasible and not r.skipped]
    running = np.minimum.accumulate([r.objective if r.feasible else np.inf for r in r1])
    assert np.all(running[1:] <= running[:-1])
    assert feas and b1.found
    assert b1.objective == min(feas) and r1[b1.step].feasible


def test_shrunk_uncertainty_feasible_at_step_zero():
    rng = np.random.default_rng(2)
    obs = gradcheck.random_p_instance(rng, 4, scale=1e-9)
    layout = full_layout(obs.certain(), learn_Q=False)
    _, best, recs = fit_single_instance(obs, layout, TrainConfig(steps=0))
    # the nominal optimum is robust up to the solver's boundary slack
    assert best.found and best.step == 0
    assert abs(best.objective - solve_det(obs.certain()).objective) <= 1e-6


def test_vanilla_and_robust_share_step_zero():
    obs, layout, cfg = setup(seed=3, steps=2, init_noise=0.2)
    _, _, rob = fit_single_instance(obs, layout, cfg)
    _, _, van = fit_single_instance(obs, layout, TrainConfig(loss_case="p", penalty=1.0, steps=2, init_noise=0.2, vanilla_loss=True))
    assert rob[0].objective == van[0].objective
    assert rob[0].penalty_sum >= van[0].penalty_sum


def test_contextual_memorises_identical_samples():
    rng = np.random.default_rng(4)
    obs = gradcheck.random_p_instance(rng, 3, scale=0.0)
    layout = full_layout(obs.certain(), learn_Q=False)
    cfg = TrainConfig(mode="contextual", steps=30, batch_size=2, n_train=4, lr=0.02, penalty=5.0)
    bias = initial_surrogate(obs, layout, cfg)
    net = pr.PredictorNet.init([2, 4, layout.size], ["tanh", "identity"], rng, output_bias=bias)
    net.weights[-1] *= 0.0
    z = np.array([0.3, -0.2])
    data = [Sample(z.copy(), obs) for _ in range(5)]
    trained, records, report = fit_contextual(data, net, layout, cfg)
    assert len(records) == cfg.steps
    # smoothed loss over the last 20 steps does not go up
    loss = np.array([r.loss for r in records])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")[-20:]
    assert smooth[-1] <= smooth[0] + 1e-9
    again = fit_contextual(data, net, layout, cfg)[1]
    assert [r.loss for r in again] == [r.loss for r in records]
    assert report["test"]["n_samples"] == 1 and report["train"]["n_samples"] == 4
    objs = [r["objective"] for r in report["train"]["rows"]]
    assert np.ptp(objs) <= 1e-12
    # identical inputs, identical decisions: the test sample equals the training ones
    assert abs(report["test"]["mean_objective"] - objs[0]) <= 1e-12
    assert not np.array_equal(trained.get_params(), net.get_params())


def test_fit_contextual_needs_training_data():
    obs, layout, _ = setup()
    net = pr.PredictorNet.init([1, layout.size], ["identity"], np.random.default_rng(0))
    with pytest.raises(ValueError):
        fit_contextual([], net, layout, TrainConfig(mode="contextual", n_train=0))


def test_write_step_records(tmp_path):
    obs, layout, cfg = setup(steps=3, init_noise=0.2)
    _, _, recs = fit_single_instance(obs, layout, cfg)
    path = tmp_path / "steps.csv"
    write_step_records(recs, path)
    rows = list(csv.DictReader(path.open()))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[0]["loss"]) == recs[0].loss
    assert set(rows[0]) == {"step", "loss", "objective", "feasible", "penalty_sum", "skipped", "nondifferentiable", "unbounded"}
