"""JSON round-tripping for instances and uncertainty sets.

Schema::

    {"n_vars": n, "Q": [[...]], "c": [...], "q": 0.0,
     "constraints": [{"A": [[...]], "b": [...], "gamma": g,
                      "uncertainty": null | {...}}]}

Uncertainty objects carry a ``"type"`` tag: ``theta_ellipsoid``,
``frobenius_ball`` or ``p_ellipsoid``. Matrices are row-major nested lists.
"""
import json

import numpy as np

from .qcqp_core import (
    FrobeniusBall,
    PEllipsoid,
    PTriple,
    QcqpInstance,
    QuadConstraint,
    ThetaEllipsoid,
    Triple,
)


class SchemaError(ValueError):
    pass


def _triple_to_dict(t: Triple):
    return {"A": t.A.tolist(), "b": t.b.tolist(), "gamma": t.gamma}


def uncertainty_to_dict(u):
    if u is None:
        return None
    if isinstance(u, FrobeniusBall):
        return {"type": "frobenius_ball", "radius": u.radius}
    if isinstance(u, ThetaEllipsoid):
        return {
            "type": "theta_ellipsoid",
            "center": _triple_to_dict(u.center),
            "generators": [_triple_to_dict(g) for g in u.generators],
        }
    if isinstance(u, PEllipsoid):
        return {
            "type": "p_ellipsoid",
            "P0": u.P0.tolist(),
            "b0": u.b0.tolist(),
            "gamma0": u.gamma0,
            "generators": [{"P": g.P.tolist(), "b": g.b.tolist(), "gamma": g.gamma} for g in u.generators],
        }
    raise SchemaError(f"unsupported uncertainty set {type(u).__name__}")


def uncertainty_from_dict(d):
    if d is None:
        return None
    kind = d.get("type")
    try:
        if kind == "frobenius_ball":
            return FrobeniusBall(d["radius"])
        if kind == "theta_ellipsoid":
            center = Triple(d["center"]["A"], d["center"]["b"], d["center"]["gamma"])
            gens = [Triple(g["A"], g["b"], g["gamma"]) for g in d["generators"]]
            return ThetaEllipsoid(center, tuple(gens))
        if kind == "p_ellipsoid":
            gens = [PTriple(g["P"], g["b"], g["gamma"]) for g in d["generators"]]
            return PEllipsoid(d["P0"], d["b0"], d["gamma0"], tuple(gens))
    except KeyError as exc:
        raise SchemaError(f"uncertainty set of type {kind!r} is missing field {exc}") from exc
    raise SchemaError(f"unknown uncertainty type {kind!r}")


def instance_to_dict(inst: QcqpInstance) -> dict:
    return {
        "n_vars": inst.n_vars,
        "Q": inst.Q.tolist(),
        "c": inst.c.tolist(),
        "q": inst.q,
        "constraints": [
            {
                "A": k.A.tolist(),
                "b": k.b.tolist(),
                "gamma": k.gamma,
                "uncertainty": uncertainty_to_dict(k.uncertainty),
            }
            for k in inst.constraints
        ],
    }


def instance_from_dict(d: dict) -> QcqpInstance:
    try:
        n = int(d["n_vars"])
        cons = []
        for k in d.get("constraints", []):
            cons.append(QuadConstraint(k["A"], k["b"], k["gamma"], uncertainty_from_dict(k.get("uncertainty"))))
        Q = np.asarray(d["Q"], dtype=float).reshape(n, n) if n else np.zeros((0, 0))
        inst = QcqpInstance(Q, d["c"], d.get("q", 0.0), tuple(cons), d.get("allow_indefinite_constraints", False))
    except KeyError as exc:
        raise SchemaError(f"instance is missing field {exc}") from exc
    if inst.n_vars != n:
        raise SchemaError(f"n_vars={n} but c has {inst.n_vars} entries")
    return inst


def dump_instance(inst: QcqpInstance, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(inst), fh, indent=1)


def load_instance(path) -> QcqpInstance:
    with open(path, encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))
