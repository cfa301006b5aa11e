import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcqp_surrogate import wc_layer
from qcqp_surrogate.qcqp_core import (
    FrobeniusBall,
    PEllipsoid,
    PTriple,
    QcqpInstance,
    QuadConstraint,
    ThetaEllipsoid,
    Triple,
    eval_objective,
)
from qcqp_surrogate.robust_oracle import trs_worst_case
from qcqp_surrogate.wc_layer import (
    SCertificate,
    certificate,
    loss_a,
    loss_grad_x,
    loss_p,
    maximize_lambda_min,
    nominal_realizations,
    rob2_a,
    rob2_p,
    s_matrix,
    theta_worst_case,
)


def point_set(P0, b0, g0, L=1):
    n = P0.shape[1]
    gens = tuple(PTriple(np.zeros_like(P0), np.zeros(n), 0.0) for _ in range(L))
    return PEllipsoid(P0, b0, g0, gens)


def rand_p_set(rng, n=3, L=2, rows=None, scale=0.5, gamma0=None):
    rows = n if rows is None else rows
    gens = tuple(PTriple(scale * rng.normal(size=(rows, n)), scale * rng.normal(size=n), scale * rng.normal()) for _ in range(L))
    g0 = rng.normal() if gamma0 is None else gamma0
    return PEllipsoid(rng.normal(size=(rows, n)), rng.normal(size=n), g0, gens)


def rand_theta_set(rng, n=2, L=3, scale=0.3):
    M = rng.normal(size=(n, n))
    center = Triple(M.T @ M, rng.normal(size=n), -1.0)
    gens = []
    for _ in range(L):
        V = rng.normal(size=(n, n))
        gens.append(Triple(scale * (V + V.T) / 2, scale * rng.normal(size=n), scale * rng.normal()))
    return ThetaEllipsoid(center, tuple(gens))


def sphere(rng, N, d):
    u = rng.normal(size=(N, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def ball(rng, N, d):
    return sphere(rng, N, d) * rng.uniform(size=(N, 1)) ** (1.0 / d)


# ---------------------------------------------------------------------------
# S matrix and certificates


def test_s_matrix_boundary_example():
    U = point_set(np.eye(2), np.zeros(2), -1.0)
    S = s_matrix(U, np.zeros(2), 0.0)
    assert np.array_equal(S, np.diag([1.0, 0.0, 1.0, 1.0]))
    assert np.linalg.eigvalsh(S)[0] == 0.0
    S = s_matrix(U, np.zeros(2), 0.5)
    assert np.array_equal(S, np.diag([0.5, 0.5, 1.0, 1.0]))
    assert abs(np.linalg.eigvalsh(S)[0] - 0.5) <= 1e-15


def test_s_matrix_affine_and_symmetric():
    rng = np.random.default_rng(0)
    U = rand_p_set(rng)
    x = rng.normal(size=3)
    l1, l2 = 0.3, 1.7
    S = s_matrix(U, x, l1) + s_matrix(U, x, l2) - s_matrix(U, x, 0.0)
    assert np.allclose(S, s_matrix(U, x, l1 + l2), atol=1e-14)
    assert np.array_equal(S, S.T)
    y = rng.normal(size=3)
    mid = s_matrix(U, 0.5 * (x + y), 1.0)
    assert np.allclose(mid, 0.5 * (s_matrix(U, x, 1.0) + s_matrix(U, y, 1.0)), atol=1e-12)
    with pytest.raises(ValueError):
        s_matrix(U, np.zeros(4), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 50), st.floats(0, 50))
def test_lambda_min_concave_in_l(seed, l1, l2):
    rng = np.random.default_rng(seed)
    U = rand_p_set(rng)
    x = rng.normal(size=3)
    f = lambda l: np.linalg.eigvalsh(s_matrix(U, x, l))[0]
    assert f(0.5 * (l1 + l2)) >= 0.5 * (f(l1) + f(l2)) - 1e-10


def test_maximize_lambda_min_against_grid():
    rng = np.random.default_rng(1)
    for _ in range(10):
        U = rand_p_set(rng)
        x = 0.5 * rng.normal(size=3)
        l_star, val, unbounded = maximize_lambda_min(U, x)
        assert not unbounded
        grid = np.concatenate([[0.0], np.geomspace(1e-6, 1e4, 4000)])
        vals = [np.linalg.eigvalsh(s_matrix(U, x, l))[0] for l in grid]
        assert val >= max(vals) - 1e-9
        assert abs(val - np.linalg.eigvalsh(s_matrix(U, x, l_star))[0]) <= 1e-15


def test_certificate_trivial_verdicts():
    far = point_set(np.eye(2), np.zeros(2), -10.0)
    c = certificate(far, np.zeros(2))
    assert c.feasible and c.lambda_min > 0
    bad = point_set(np.eye(2), np.zeros(2), 1.0)
    c = certificate(bad, np.zeros(2))
    assert not c.feasible and c.lambda_min < 0


def test_certificate_agrees_with_trs_oracle():
    rng = np.random.default_rng(2)
    disagree = 0
    for _ in range(200):
        U = rand_p_set(rng)
        x = rng.normal(size=3)
        cert = rob2_p([U], x)[0]
        worst = trs_worst_case(U, x).worst_value
        if cert.feasible != (worst <= 0.0):
            disagree += 1
            assert abs(worst) <= 1e-6
    assert disagree <= 5


def test_rob2_p_keeps_indices_and_rejects_other_sets():
    rng = np.random.default_rng(3)
    U = rand_p_set(rng)
    out = rob2_p([(4, U)], np.zeros(3))
    assert out[0].constraint_index == 4
    with pytest.raises(TypeError):
        rob2_p([FrobeniusBall(1.0)], np.zeros(3))


def test_unbounded_sentinel(monkeypatch):
    # with a tiny l_max the still-improving search hits the sentinel
    monkeypatch.setattr(wc_layer, "L_MAX", 1.0)
    U = point_set(np.eye(2), np.zeros(2), -10.0)
    cert = certificate(U, np.zeros(2))
    assert cert.unbounded and cert.feasible
    inst = QcqpInstance(np.zeros((2, 2)), np.ones(2), 0.0, (QuadConstraint.from_p_ellipsoid(U),))
    bd = loss_p(inst, np.zeros(2), [cert], 10.0)
    assert bd.total == bd.objective_term and bd.n_unbounded == 1


# ---------------------------------------------------------------------------
# case A


def test_frobenius_examples():
    r = 0.3
    center = Triple(np.eye(2), np.zeros(2), -r)
    theta, val = theta_worst_case(center, FrobeniusBall(1.0), np.array([1.0, 0.0]))
    assert abs(val - (2.0 - r)) <= 1e-15
    assert np.allclose(theta.A, np.diag([2.0, 1.0]))
    for U in (FrobeniusBall(2.0), rand_theta_set(np.random.default_rng(4))):
        c = U.center if isinstance(U, ThetaEllipsoid) else center
        theta, val = theta_worst_case(c, U, np.zeros(2))
        assert val == c.gamma or abs(val - c.gamma) <= np.linalg.norm([g.gamma for g in U.generators])


def test_theta_ellipsoid_zero_x_value():
    rng = np.random.default_rng(5)
    U = rand_theta_set(rng)
    gam = np.array([g.gamma for g in U.generators])
    _, val = theta_worst_case(U.center, U, np.zeros(2))
    assert abs(val - (U.center.gamma + np.linalg.norm(gam))) <= 1e-14


def test_theta_ellipsoid_monte_carlo():
    rng = np.random.default_rng(6)
    for _ in range(5):
        U = rand_theta_set(rng)
        x = rng.normal(size=2)
        theta, val = theta_worst_case(U.center, U, x)
        assert abs(theta.value(x) - val) <= 1e-12

        def g(u):
            A = U.center.A + sum(uk * t.A for uk, t in zip(u, U.generators))
            b = U.center.b + sum(uk * t.b for uk, t in zip(u, U.generators))
            c = U.center.gamma + sum(uk * t.gamma for uk, t in zip(u, U.generators))
            return x @ A @ x + b @ x + c

        inside = [g(u) for u in ball(rng, 10_000, 3)]
        assert max(inside) <= val + 1e-12
        # the objective is affine in u, so its maximum lies on the sphere
        surface = [g(u) for u in sphere(rng, 10_000, 3)]
        assert max(surface) <= val + 1e-12 and val - max(surface) <= 1e-3


def test_frobenius_monte_carlo():
    rng = np.random.default_rng(7)
    center = Triple(np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([0.2, -0.1]), -1.0)
    for rho in (0.5, 1.0):
        x = rng.normal(size=2)
        _, val = theta_worst_case(center, FrobeniusBall(rho), x)
        # symmetric 2x2 matrices with ||D||_F = rho  <->  (a, sqrt(2) b, c) on a sphere
        w = sphere(rng, 10_000, 3) * rho
        s = [x @ np.array([[a, b / np.sqrt(2)], [b / np.sqrt(2), c]]) @ x for a, b, c in w]
        assert max(s) + center.value(x) <= val + 1e-12
        assert val - (max(s) + center.value(x)) <= 1e-3


def test_frobenius_monotone_in_radius():
    rng = np.random.default_rng(8)
    center = Triple(np.eye(3), rng.normal(size=3), -1.0)
    x = rng.normal(size=3)
    vals = [theta_worst_case(center, FrobeniusBall(r), x)[1] for r in (0.1, 0.5, 1.0, 3.0)]
    assert np.all(np.diff(vals) >= 0)


def test_case_a_decomposes_over_constraints():
    rng = np.random.default_rng(9)
    sets = [rand_theta_set(rng) for _ in range(2)]
    cons = [QuadConstraint.from_theta_ellipsoid(U) for U in sets]
    x = rng.normal(size=2)
    total = sum(r.violation for r in rob2_a(cons, x))
    joint = 0.0
    for _ in range(10_000):
        s = 0.0
        for U in sets:
            u = ball(rng, 1, 3)[0]
            s += sum(uk * t.value(x) for uk, t in zip(u, U.generators)) + U.center.value(x)
        joint = max(joint, s)
    assert joint <= total + 1e-12


# ---------------------------------------------------------------------------
# losses


def simple_inst(n=2, cons=()):
    return QcqpInstance(0.5 * np.eye(n), np.zeros(n), 0.0, tuple(cons))


def test_loss_p_examples():
    inst = simple_inst()
    x = np.array([0.3, -0.2])
    feasible = certificate(point_set(np.eye(2), np.zeros(2), -10.0), x)
    bd = loss_p(inst, x, [feasible], 5.0)
    assert bd.total == eval_objective(inst, x) and bd.penalty_terms[0] == 0.0
    fake = SCertificate(0, 0.0, np.diag([-0.5, 1.0, 2.0]), np.array([-0.5, 1.0, 2.0]), np.eye(3), False)
    bd = loss_p(inst, x, [fake], 2.0)
    assert bd.penalty_terms[0] == 1.0
    with pytest.raises(ValueError):
        loss_p(inst, x, [fake], -1.0)


def test_loss_p_recomputation():
    rng = np.random.default_rng(10)
    sets = [rand_p_set(rng, gamma0=0.5) for _ in range(3)]
    inst = QcqpInstance(np.eye(3), rng.normal(size=3), 0.1, tuple(QuadConstraint.from_p_ellipsoid(U) for U in sets))
    x = rng.normal(size=3)
    certs = rob2_p(sets, x)
    tau = np.array([1.0, 2.0, 3.0])
    bd = loss_p(inst, x, certs, tau)
    ref = eval_objective(inst, x) + sum(t * np.sum(np.maximum(0.0, -c.eigvals)) for t, c in zip(tau, certs))
    assert abs(bd.total - ref) <= 1e-12 * (1 + abs(ref))


def test_loss_a_examples():
    inst = simple_inst()
    x = np.array([0.1, 0.1])
    real = [wc_layer.WorstCaseRealization(0, Triple(np.eye(2), np.zeros(2), -1.0), -0.5)]
    assert loss_a(inst, x, real, 10.0).total == eval_objective(inst, x)
    real = [wc_layer.WorstCaseRealization(0, Triple(np.eye(2), np.zeros(2), -1.0), 0.3)]
    assert abs(loss_a(inst, x, real, 10.0).penalty_terms[0] - 3.0) <= 1e-15
    # the literal negative-coefficient reading penalises feasible points instead
    real = [wc_layer.WorstCaseRealization(0, Triple(np.eye(2), np.zeros(2), -1.0), -0.3)]
    assert abs(loss_a(inst, x, real, -10.0).penalty_terms[0] - 3.0) <= 1e-15


def test_loss_a_recomputation():
    rng = np.random.default_rng(11)
    cons = [QuadConstraint.from_theta_ellipsoid(rand_theta_set(rng)) for _ in range(3)]
    inst = QcqpInstance(np.eye(2), rng.normal(size=2), 0.0, tuple(cons))
    x = rng.normal(size=2)
    real = rob2_a(cons, x)
    lam = np.array([0.5, 1.0, 7.0])
    ref = eval_objective(inst, x) + sum(max(0.0, l * r.violation) for l, r in zip(lam, real))
    assert abs(loss_a(inst, x, real, lam).total - ref) <= 1e-12 * (1 + abs(ref))


def test_nominal_realizations_use_observed_coefficients():
    rng = np.random.default_rng(12)
    k = QuadConstraint.from_theta_ellipsoid(rand_theta_set(rng))
    x = rng.normal(size=2)
    r = nominal_realizations([k], x)[0]
    assert r.violation == k.value(x) and np.array_equal(r.theta_star.A, k.A)


def test_grad_no_penalty_closed_form():
    inst = simple_inst(cons=(QuadConstraint(np.eye(2), np.zeros(2), -10.0, FrobeniusBall(0.1)),))
    x = np.array([0.4, -0.7])
    real = rob2_a(list(inst.constraints), x)
    bd = loss_a(inst, x, real, 1.0)
    assert np.allclose(loss_grad_x(bd, inst, x, real), x, atol=1e-15)


def test_grad_frobenius_closed_form():
    inst = QcqpInstance(np.zeros((2, 2)), np.zeros(2), 0.0, (QuadConstraint(np.eye(2), np.zeros(2), -0.5, FrobeniusBall(1.0)),))
    x = np.array([1.0, 0.0])
    real = rob2_a(list(inst.constraints), x)
    bd = loss_a(inst, x, real, 1.0)
    assert np.allclose(loss_grad_x(bd, inst, x, real), [4.0, 0.0], atol=1e-14)


def _fd_grad(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_grad_case_a_finite_differences():
    rng = np.random.default_rng(13)
    checked = 0
    while checked < 10:
        cons = [QuadConstraint.from_theta_ellipsoid(rand_theta_set(rng)), QuadConstraint(np.eye(2), rng.normal(size=2), -0.5, FrobeniusBall(0.7))]
        inst = QcqpInstance(np.eye(2), rng.normal(size=2), 0.0, tuple(cons))
        x = rng.normal(size=2)
        real = rob2_a(cons, x)
        if min(abs(r.violation) for r in real) <= 1e-3:
            continue  # kink of the ReLU
        checked += 1

        def L(z):
            return loss_a(inst, z, rob2_a(cons, z), 3.0).total

        an = loss_grad_x(loss_a(inst, x, real, 3.0), inst, x, real)
        fd = _fd_grad(L, x)
        assert np.linalg.norm(an - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))


def test_grad_case_p_finite_differences():
    rng = np.random.default_rng(14)
    checked = 0
    while checked < 15:
        sets = [rand_p_set(rng, gamma0=rng.uniform(-1.0, 0.5)) for _ in range(2)]
        inst = QcqpInstance(np.eye(3), rng.normal(size=3), 0.0, tuple(QuadConstraint.from_p_ellipsoid(U) for U in sets))
        x = 0.5 * rng.normal(size=3)
        certs = rob2_p(sets, x)
        gaps = [np.min(np.abs(np.diff(c.eigvals))) for c in certs]
        if min(np.min(np.abs(c.eigvals)) for c in certs) <= 1e-3 or min(gaps) <= 1e-3:
            continue  # eigenvalue kink or near-repeated spectrum
        if all(c.feasible for c in certs):
            continue
        checked += 1

        def L(z):
            return loss_p(inst, z, rob2_p(sets, z), 2.0).total

        bd = loss_p(inst, x, certs, 2.0)
        an = loss_grad_x(bd, inst, x, certs)
        # l* is only located to ~1e-8 (lambda_min is flat at its maximum), so a
        # small step would amplify that noise through the lower eigenvalues
        fd = _fd_grad(L, x, h=1e-4)
        assert np.linalg.norm(an - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd)), (an, fd)


def test_repeated_eigenvalue_flag():
    V = np.eye(3)
    cert = SCertificate(0, 0.5, np.diag([-1.0, -1.0, 2.0]), np.array([-1.0, -1.0, 2.0]), V, False)
    bd = loss_p(simple_inst(3), np.zeros(3), [cert], 1.0)
    assert bd.repeated_eigenvalue
    assert bd.penalty_terms[0] == 2.0
