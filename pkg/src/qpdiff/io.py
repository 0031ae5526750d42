"""
JSON encoding of problems, solutions, gradient bundles and layer specs.

Arrays are written as dense row-major nested lists. Python's ``json`` emits
floats with ``repr``, so a round trip is exact and identical objects always
serialize to identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backward import GradientBundle
from .layers import LpLayerSpec, SocpLayerSpec
from .qp import QpProblem, Solution, Status


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def _mat(x, cols):
    a = np.asarray(x, dtype=float)
    return a.reshape(-1, cols) if a.size else np.zeros((0, cols))


def to_dict(obj) -> dict:
    if isinstance(obj, QpProblem):
        return {"P": _arr(obj.P), "q": _arr(obj.q), "A": _arr(obj.A), "b": _arr(obj.b),
                "G": _arr(obj.G), "c": _arr(obj.c)}
    if isinstance(obj, Solution):
        return {"z_star": _arr(obj.z_star), "nu_star": _arr(obj.nu_star),
                "lambda_star": _arr(obj.lambda_star), "status": obj.status.value,
                "iterations": int(obj.iterations), "prim_res": float(obj.prim_res),
                "dual_res": float(obj.dual_res), "polished": bool(obj.polished)}
    if isinstance(obj, GradientBundle):
        return {"dP": _arr(obj.dP), "dq": _arr(obj.dq), "dA": _arr(obj.dA), "db": _arr(obj.db),
                "dG": _arr(obj.dG), "dc": _arr(obj.dc), "active": list(obj.active),
                "kkt_norm": obj.kkt_norm}
    if isinstance(obj, LpLayerSpec):
        p = obj.lower()
        return {"family": "LP", "theta": _arr(obj.theta), "A": _arr(p.A), "b": _arr(p.b),
                "G": _arr(p.G), "h": _arr(p.c), "eps": float(obj.eps)}
    if isinstance(obj, SocpLayerSpec):
        return {"family": "SOCP", "q": _arr(obj.q), "a": _arr(obj.a), "b": _arr(obj.b)}
    raise TypeError(f"cannot encode {type(obj).__name__}")


def from_dict(data: dict):
    """Inverse of ``to_dict``; the object type is inferred from the keys."""
    family = data.get("family")
    if family == "LP":
        d = len(data["theta"])
        return LpLayerSpec(np.asarray(data["theta"]), _mat(data["A"], d), np.asarray(data["b"]),
                           _mat(data["G"], d), np.asarray(data["h"]), data.get("eps", 1e-6))
    if family == "SOCP":
        d = len(data["q"])
        return SocpLayerSpec(np.asarray(data["q"]), _mat(data["a"], d), np.asarray(data["b"]))
    if "P" in data:
        d = len(data["q"])
        return QpProblem(np.asarray(data["P"]), np.asarray(data["q"]),
                         _mat(data.get("A", []), d), np.asarray(data.get("b", []), dtype=float),
                         _mat(data.get("G", []), d), np.asarray(data.get("c", []), dtype=float))
    if "z_star" in data:
        return Solution(np.asarray(data["z_star"], dtype=float), np.asarray(data["nu_star"], dtype=float),
                        np.asarray(data["lambda_star"], dtype=float), Status(data["status"]),
                        int(data.get("iterations", 0)), float(data.get("prim_res", 0.0)),
                        float(data.get("dual_res", 0.0)), bool(data.get("polished", False)))
    if "dq" in data:
        d = len(data["dq"])
        return GradientBundle(np.asarray(data["dP"], dtype=float), np.asarray(data["dq"], dtype=float),
                              _mat(data["dA"], d), np.asarray(data["db"], dtype=float),
                              _mat(data["dG"], d), np.asarray(data["dc"], dtype=float),
                              tuple(data.get("active", ())), data.get("kkt_norm"))
    raise ValueError("unrecognized JSON object")


def dumps(obj) -> str:
    return json.dumps(to_dict(obj))


def loads(text: str):
    return from_dict(json.loads(text))


def dump(obj, path):
    path = Path(path)
    try:
        path.write_text(dumps(obj))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load(path):
    return loads(Path(path).read_text())
