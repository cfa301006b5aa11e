"""QCQP data model, quadratic evaluation and the factor parameterisation.

An instance is

    min  x'Qx + c'x + q
    s.t. x'A_i x + b_i'x + gamma_i <= 0,   i = 1..m

where each constraint may carry an uncertainty set describing how
(A_i, b_i, gamma_i) can move around its nominal value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

SYM_TOL = 1e-12
PSD_TOL = 1e-9


def _frozen(a, ndim=None, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def min_eig(A) -> float:
    if A.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(A)[0])


# ---------------------------------------------------------------------------
# uncertainty sets


@dataclass(frozen=True)
class Triple:
    """A packed (A, b, gamma) coefficient triple."""

    A: np.ndarray
    b: np.ndarray
    gamma: float

    def __post_init__(self):
        A = _frozen(symmetrize(self.A), 2)
        b = _frozen(self.b, 1)
        if A.shape != (b.size, b.size):
            raise ValueError(f"triple shapes disagree: A {A.shape}, b {b.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "gamma", float(self.gamma))

    def value(self, x) -> float:
        return float(x @ self.A @ x + self.b @ x + self.gamma)


@dataclass(frozen=True)
class ThetaEllipsoid:
    """{theta_0 + sum_k u_k theta_k : ||u||_2 <= 1} in (A, b, gamma) space."""

    center: Triple
    generators: tuple

    def __post_init__(self):
        gens = tuple(g if isinstance(g, Triple) else Triple(*g) for g in self.generators)
        if not gens:
            raise ValueError("ThetaEllipsoid needs at least one generator")
        n = self.center.b.size
        for g in gens:
            if g.b.size != n:
                raise ValueError("generator dimension does not match the center")
        object.__setattr__(self, "generators", gens)

    @property
    def n_generators(self) -> int:
        return len(self.generators)


@dataclass(frozen=True)
class FrobeniusBall:
    """{A + D : D = D', ||D||_F <= radius}; b and gamma stay certain."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("FrobeniusBall radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class PTriple:
    P: np.ndarray
    b: np.ndarray
    gamma: float

    def __post_init__(self):
        P = _frozen(self.P, 2)
        b = _frozen(self.b, 1)
        if P.shape[1] != b.size:
            raise ValueError(f"P has {P.shape[1]} columns but b has {b.size} entries")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "gamma", float(self.gamma))


@dataclass(frozen=True)
class PEllipsoid:
    """Ellipsoidal uncertainty on the factor P of A = P'P.

    (P, b, gamma) = (P0, b0, gamma0) + sum_k u_k (P_k, b_k, gamma_k),
    ||u||_2 <= 1, and the constraint function is x'P'Px + b'x + gamma.
    """

    P0: np.ndarray
    b0: np.ndarray
    gamma0: float
    generators: tuple

    def __post_init__(self):
        P0 = _frozen(self.P0, 2)
        b0 = _frozen(self.b0, 1)
        if P0.shape[1] != b0.size:
            raise ValueError("P0 and b0 disagree on the number of variables")
        gens = tuple(g if isinstance(g, PTriple) else PTriple(*g) for g in self.generators)
        if not gens:
            raise ValueError("PEllipsoid needs at least one generator")
        for g in gens:
            if g.P.shape != P0.shape:
                raise ValueError(f"generator P shape {g.P.shape} != P0 shape {P0.shape}")
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "gamma0", float(self.gamma0))
        object.__setattr__(self, "generators", gens)

    @property
    def n_vars(self) -> int:
        return self.b0.size

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def n_rows(self) -> int:
        return self.P0.shape[0]

    def nominal(self) -> Triple:
        return Triple(self.P0.T @ self.P0, self.b0, self.gamma0)


UncertaintySet = Union[None, ThetaEllipsoid, FrobeniusBall, PEllipsoid]


# ---------------------------------------------------------------------------
# instance


@dataclass(frozen=True)
class QuadConstraint:
    A: np.ndarray
    b: np.ndarray
    gamma: float
    uncertainty: UncertaintySet = None

    def __post_init__(self):
        A = _frozen(symmetrize(self.A), 2)
        b = _frozen(self.b, 1)
        if A.shape != (b.size, b.size):
            raise ValueError(f"constraint shapes disagree: A {A.shape}, b {b.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "gamma", float(self.gamma))
        u = self.uncertainty
        if isinstance(u, PEllipsoid):
            _check_center(self, u.nominal(), "PEllipsoid")
        elif isinstance(u, ThetaEllipsoid):
            _check_center(self, u.center, "ThetaEllipsoid")
        elif u is not None and not isinstance(u, FrobeniusBall):
            raise TypeError(f"unsupported uncertainty set {type(u).__name__}")

    @classmethod
    def from_p_ellipsoid(cls, U: PEllipsoid) -> "QuadConstraint":
        nom = U.nominal()
        return cls(nom.A, nom.b, nom.gamma, U)

    @classmethod
    def from_theta_ellipsoid(cls, U: ThetaEllipsoid) -> "QuadConstraint":
        return cls(U.center.A, U.center.b, U.center.gamma, U)

    @property
    def triple(self) -> Triple:
        return Triple(self.A, self.b, self.gamma)

    def value(self, x) -> float:
        return float(x @ self.A @ x + self.b @ x + self.gamma)

    def grad(self, x) -> np.ndarray:
        return 2.0 * self.A @ x + self.b

    def certain(self) -> "QuadConstraint":
        return QuadConstraint(self.A, self.b, self.gamma)


def _check_center(con, center: Triple, what: str):
    scale = 1.0 + np.abs(con.A).max(initial=0.0)
    if (
        np.abs(con.A - center.A).max(initial=0.0) > 1e-9 * scale
        or np.abs(con.b - center.b).max(initial=0.0) > 1e-9 * (1 + np.abs(con.b).max(initial=0.0))
        or abs(con.gamma - center.gamma) > 1e-9 * (1 + abs(con.gamma))
    ):
        raise ValueError(f"{what} center does not match the nominal constraint coefficients")


@dataclass(frozen=True)
class QcqpInstance:
    Q: np.ndarray
    c: np.ndarray
    q: float = 0.0
    constraints: tuple = ()
    allow_indefinite_constraints: bool = False

    def __post_init__(self):
        Q = _frozen(symmetrize(self.Q), 2)
        c = _frozen(self.c, 1)
        n = c.size
        if Q.shape != (n, n):
            raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
        cons = tuple(self.constraints)
        for i, con in enumerate(cons):
            if not isinstance(con, QuadConstraint):
                raise TypeError(f"constraint {i} is not a QuadConstraint")
            if con.b.size != n:
                raise ValueError(f"constraint {i} has {con.b.size} variables, expected {n}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "q", float(self.q))
        object.__setattr__(self, "constraints", cons)
        if min_eig(Q) < -PSD_TOL:
            raise ValueError("objective matrix Q is not positive semidefinite")
        for i, con in enumerate(cons):
            if min_eig(con.A) < -PSD_TOL:
                indefinite_ok = self.allow_indefinite_constraints and isinstance(
                    con.uncertainty, (ThetaEllipsoid, FrobeniusBall)
                )
                if not indefinite_ok:
                    raise ValueError(f"constraint {i} has an indefinite quadratic term")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def is_convex(self) -> bool:
        return min_eig(self.Q) >= -PSD_TOL and all(min_eig(k.A) >= -PSD_TOL for k in self.constraints)

    def replace(self, **changes) -> "QcqpInstance":
        kw = dict(
            Q=self.Q,
            c=self.c,
            q=self.q,
            constraints=self.constraints,
            allow_indefinite_constraints=self.allow_indefinite_constraints,
        )
        kw.update(changes)
        return QcqpInstance(**kw)

    def certain(self) -> "QcqpInstance":
        """Copy with every uncertainty set stripped."""
        return self.replace(constraints=tuple(k.certain() for k in self.constraints))


def _check_x(inst: QcqpInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({inst.n_vars},)")
    return x


def eval_objective(inst: QcqpInstance, x) -> float:
    x = _check_x(inst, x)
    return float(x @ inst.Q @ x + inst.c @ x + inst.q)


def eval_constraint(inst: QcqpInstance, i: int, x) -> float:
    x = _check_x(inst, x)
    if not 0 <= i < inst.n_constraints:
        raise IndexError(f"constraint index {i} out of range for {inst.n_constraints} constraints")
    return inst.constraints[i].value(x)


def eval_constraints(inst: QcqpInstance, x) -> np.ndarray:
    x = _check_x(inst, x)
    return np.array([k.value(x) for k in inst.constraints])


def psd_from_factor(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M.T @ M


def factor_grad(M, G) -> np.ndarray:
    """Pull a gradient w.r.t. A = M'M back to the factor M."""
    M = np.asarray(M, dtype=float)
    G = np.asarray(G, dtype=float)
    if G.shape != (M.shape[1], M.shape[1]):
        raise ValueError(f"G has shape {G.shape}, expected {(M.shape[1],) * 2}")
    return M @ (G + G.T)


def psd_sqrt(A) -> np.ndarray:
    """Symmetric square root S with S'S = A (negative eigenvalues clipped)."""
    w, V = np.linalg.eigh(symmetrize(A))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


# ---------------------------------------------------------------------------
# parameter packing


@dataclass
class ParamGrad:
    """Gradient of a scalar loss w.r.t. every coefficient of an instance."""

    Q: np.ndarray
    c: np.ndarray
    q: float
    A: list
    b: list
    gamma: np.ndarray
    nondifferentiable: bool = False

    @classmethod
    def zeros(cls, n: int, m: int) -> "ParamGrad":
        return cls(
            Q=np.zeros((n, n)),
            c=np.zeros(n),
            q=0.0,
            A=[np.zeros((n, n)) for _ in range(m)],
            b=[np.zeros(n) for _ in range(m)],
            gamma=np.zeros(m),
        )


def _block_kind(name: str):
    if name in ("Q", "c", "q"):
        return name, None
    for prefix in ("gamma", "A", "b"):
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            return prefix, int(name[len(prefix):])
    raise ValueError(f"unknown parameter block {name!r}")


@dataclass(frozen=True)
class PackLayout:
    """Index map between a flat parameter vector and instance coefficients.

    ``blocks`` names the learnable coefficients: ``"Q"``, ``"c"``, ``"q"``
    and ``"A{i}"``, ``"b{i}"``, ``"gamma{i}"`` per constraint. Matrix blocks
    ``Q``/``A{i}`` are stored as factors M (k x n) and materialised as
    M'M + jitter*I. Everything not listed is copied from ``template``.
    """

    template: QcqpInstance
    blocks: tuple
    factor_rows: int | None = None
    jitter: float = 0.0
    index: dict = field(init=False, repr=False, compare=False)
    size: int = field(init=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(set(blocks)) != len(blocks):
            raise ValueError("duplicate parameter blocks")
        n, m = self.template.n_vars, self.template.n_constraints
        k = n if self.factor_rows is None else int(self.factor_rows)
        index = {}
        start = 0
        for name in blocks:
            kind, i = _block_kind(name)
            if i is not None and not 0 <= i < m:
                raise ValueError(f"block {name!r} refers to a missing constraint")
            shape = {"Q": (k, n), "A": (k, n), "c": (n,), "b": (n,), "q": (), "gamma": ()}[kind]
            size = int(np.prod(shape, dtype=int))
            index[name] = (slice(start, start + size), shape)
            start += size
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "factor_rows", k)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "size", start)

    def pack(self, values: dict) -> np.ndarray:
        vec = np.empty(self.size)
        for name, (sl, shape) in self.index.items():
            v = np.asarray(values[name], dtype=float)
            if v.shape != shape:
                raise ValueError(f"block {name!r} has shape {v.shape}, expected {shape}")
            vec[sl] = v.ravel()
        return vec

    def unpack(self, vec) -> dict:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {vec.shape}, expected ({self.size},)")
        return {name: vec[sl].reshape(shape).copy() for name, (sl, shape) in self.index.items()}

    def from_instance(self, inst: QcqpInstance | None = None, factors: dict | None = None) -> np.ndarray:
        """Pack the coefficients of ``inst`` (default: the template).

        Matrix blocks use ``factors[name]`` if given, else the symmetric
        square root of (matrix - jitter*I).
        """
        inst = self.template if inst is None else inst
        factors = factors or {}
        n = inst.n_vars
        vals = {}
        for name in self.blocks:
            kind, i = _block_kind(name)
            if kind in ("Q", "A"):
                if name in factors:
                    vals[name] = np.asarray(factors[name], dtype=float)
                    continue
                mat = inst.Q if kind == "Q" else inst.constraints[i].A
                root = psd_sqrt(mat - self.jitter * np.eye(n))
                M = np.zeros((self.factor_rows, n))
                r = min(self.factor_rows, n)
                M[:r] = root[:r]
                vals[name] = M
            elif kind == "c":
                vals[name] = inst.c
            elif kind == "q":
                vals[name] = inst.q
            elif kind == "b":
                vals[name] = inst.constraints[i].b
            else:
                vals[name] = inst.constraints[i].gamma
        return self.pack(vals)

    def to_instance(self, vec) -> QcqpInstance:
        vals = self.unpack(vec)
        t = self.template
        n = t.n_vars
        eye = np.eye(n)
        Q = psd_from_factor(vals["Q"]) + self.jitter * eye if "Q" in vals else t.Q
        c = vals.get("c", t.c)
        q = float(vals["q"]) if "q" in vals else t.q
        cons = []
        for i, con in enumerate(t.constraints):
            A = psd_from_factor(vals[f"A{i}"]) + self.jitter * eye if f"A{i}" in vals else con.A
            b = vals.get(f"b{i}", con.b)
            g = float(vals[f"gamma{i}"]) if f"gamma{i}" in vals else con.gamma
            cons.append(QuadConstraint(A, b, g))
        return QcqpInstance(Q, c, q, tuple(cons))

    def pullback(self, vec, grad: ParamGrad) -> np.ndarray:
        """Map an instance-space gradient onto the flat parameter vector."""
        vals = self.unpack(vec)
        out = {}
        for name in self.blocks:
            kind, i = _block_kind(name)
            if kind == "Q":
                out[name] = factor_grad(vals[name], grad.Q)
            elif kind == "A":
                out[name] = factor_grad(vals[name], grad.A[i])
            elif kind == "c":
                out[name] = grad.c
            elif kind == "q":
                out[name] = grad.q
            elif kind == "b":
                out[name] = grad.b[i]
            else:
                out[name] = grad.gamma[i]
        return self.pack(out)


def full_layout(template: QcqpInstance, jitter: float = 0.0, learn_Q: bool = True) -> PackLayout:
    """Layout with every coefficient of ``template`` learnable."""
    blocks = (["Q"] if learn_Q else []) + ["c", "q"]
    for i in range(template.n_constraints):
        blocks += [f"A{i}", f"b{i}", f"gamma{i}"]
    return PackLayout(template, tuple(blocks), jitter=jitter)

