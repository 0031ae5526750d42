"""
Seeded random problem families.

Each instance is drawn from its own ``numpy.random.Generator`` seeded with
``(seed, index)`` so that problem ``k`` of a batch can be regenerated on its
own, independent of batch size or generation order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LpLayerSpec, SocpLayerSpec
from .qp import QpProblem

FAMILIES = ("QP", "LP", "SOCP")


@dataclass(frozen=True)
class GenSpec:
    family: str
    d: int
    m_eq: int = 0
    n_ineq: int = 0
    seed: int = 0
    eps: float = 1e-6
    delta: float = 1e-6

    def __post_init__(self):
        fam = self.family.upper()
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if self.d < 1 or self.m_eq < 0 or self.n_ineq < 0:
            raise ValueError("dimensions must satisfy d >= 1, m_eq >= 0, n_ineq >= 0")


def rng_for(seed, index=0):
    """Independent PCG64 stream for instance ``index`` of batch ``seed``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def gen_qp(spec: GenSpec, index: int = 0) -> QpProblem:
    """P = P0'P0 + delta*I; c = G z0 so every inequality is tight at z0."""
    if spec.family != "QP":
        raise ValueError("gen_qp needs family QP")
    rng = rng_for(spec.seed, index)
    d, m, n = spec.d, spec.m_eq, spec.n_ineq
    P0 = rng.standard_normal((d, d))
    P = P0.T @ P0 + spec.delta * np.eye(d)
    P = 0.5 * (P + P.T)
    q = rng.standard_normal(d)
    A = rng.standard_normal((m, d))
    b = rng.standard_normal(m)
    G = rng.standard_normal((n, d))
    z0 = rng.standard_normal(d)
    return QpProblem(P, q, A, b, G, G @ z0)


def gen_lp(spec: GenSpec, index: int = 0) -> LpLayerSpec:
    if spec.family != "LP":
        raise ValueError("gen_lp needs family LP")
    rng = rng_for(spec.seed, index)
    d, m, n = spec.d, spec.m_eq, spec.n_ineq
    theta = rng.standard_normal(d)
    A = rng.standard_normal((m, d))
    b = rng.standard_normal(m)
    G = rng.standard_normal((n, d))
    z0 = rng.standard_normal(d)
    return LpLayerSpec(theta, A, b, G, G @ z0, eps=spec.eps)


def gen_socp(spec: GenSpec, index: int = 0) -> SocpLayerSpec:
    """a_i = 0 and m = 1; the radius b_1 is redrawn until positive."""
    if spec.family != "SOCP":
        raise ValueError("gen_socp needs family SOCP")
    rng = rng_for(spec.seed, index)
    q = rng.standard_normal(spec.d)
    b1 = rng.standard_normal()
    while b1 <= 0:
        b1 = rng.standard_normal()
    return SocpLayerSpec(q, np.zeros((1, spec.d)), np.array([b1]))


def generate(spec: GenSpec, index: int = 0):
    return {"QP": gen_qp, "LP": gen_lp, "SOCP": gen_socp}[spec.family](spec, index)


def generate_batch(spec: GenSpec, count: int):
    return [generate(spec, k) for k in range(count)]
