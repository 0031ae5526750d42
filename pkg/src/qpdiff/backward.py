"""
Backward pass of a QP layer as an equality-constrained QP.

Given a solved QP ``(z*, nu*, lambda*)`` and an upstream gradient ``g = dL/dz*``,
the vector-Jacobian product is obtained from the solution ``(z~, lambda~, nu~)``
of

    minimize    1/2 z~' P z~ + g' z~
    subject to  A z~ = 0,  G_+ z~ = 0

where ``G_+`` keeps the rows of ``G`` that are active at ``z*``. Its KKT
matrix is symmetric quasi-definite after regularization, so one factorization
plus iterative refinement suffices.

A dense reference path (``exact_backward_oracle``) solves the full
nonsymmetric differentiated KKT system by explicit inversion instead; it is
slower and only used for validation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .exceptions import (DegenerateActiveSetWarning, RefinementStalled, SingularBackwardSystem,
                         SingularMatrix, ZeroVector)
from .qp import QpProblem, Solution, kkt_residual_norm

DEFAULT_EPS_ACTIVE = 1e-6
BACKWARD_REFINE_STEPS = 50
BACKWARD_REFINE_TOL = 1e-12


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple
    eps_active: float

    def __len__(self):
        return len(self.indices)

    @property
    def array(self):
        return np.asarray(self.indices, dtype=int)


@dataclass(frozen=True)
class BackwardProblem:
    P_prime: np.ndarray
    q_prime: np.ndarray
    A_prime: np.ndarray
    G_plus: np.ndarray

    @property
    def rhs_b(self):
        return np.zeros(self.A_prime.shape[0])

    @property
    def rhs_c(self):
        return np.zeros(self.G_plus.shape[0])

    def kkt_system(self, delta=linalg.DEFAULT_DELTA):
        return linalg.KktSystem.from_blocks(self.P_prime, self.G_plus, self.A_prime, delta)


@dataclass(frozen=True)
class BackwardSolution:
    z_tilde: np.ndarray
    lambda_tilde: np.ndarray
    nu_tilde: np.ndarray


@dataclass(frozen=True)
class GradientBundle:
    """
    Gradients of the loss with respect to every QP parameter.

    ``dG`` and ``dc`` cover all ``n`` inequality rows; rows outside
    ``active`` are zero. ``kkt_norm`` records the KKT residual norm of the
    forward point the gradients were computed at.
    """

    dP: np.ndarray
    dq: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dc: np.ndarray
    active: tuple = ()
    kkt_norm: Optional[float] = field(default=None, compare=False)

    @property
    def dG_plus(self):
        return self.dG[list(self.active)]

    @property
    def dc_plus(self):
        return self.dc[list(self.active)]


def detect_active_set(problem: QpProblem, sol: Solution, eps_active=DEFAULT_EPS_ACTIVE) -> ActiveSet:
    """
    Inequality ``i`` is active when ``lambda_i >= eps`` or ``(G z - c)_i >= -eps``,
    with ``eps = eps_active * (1 + ||lambda||_inf)``. Weakly active rows (both
    the multiplier and the slack below ``eps``) are kept and reported with a
    ``DegenerateActiveSetWarning``.
    """
    lam = sol.lambda_star
    eps = eps_active * (1.0 + np.max(np.abs(lam), initial=0.0))
    slack = problem.G @ sol.z_star - problem.c
    mask = (lam >= eps) | (slack >= -eps)
    weak = (lam < eps) & (np.abs(slack) < eps)
    if np.any(weak):
        warnings.warn(f"weakly active inequalities {np.flatnonzero(weak).tolist()}",
                      DegenerateActiveSetWarning, stacklevel=2)
    return ActiveSet(tuple(int(i) for i in np.flatnonzero(mask)), float(eps))


def build_backward_problem(problem: QpProblem, sol: Solution, active: ActiveSet, dL_dz) -> BackwardProblem:
    dL_dz = np.asarray(dL_dz, dtype=float).ravel()
    if dL_dz.size != problem.d:
        raise ValueError(f"dL_dz has length {dL_dz.size}, expected {problem.d}")
    return BackwardProblem(problem.P, dL_dz, problem.A, problem.G[active.array].reshape(-1, problem.d))


def solve_backward(bp: BackwardProblem, delta=linalg.DEFAULT_DELTA, factor=None,
                   tol=BACKWARD_REFINE_TOL, max_steps=BACKWARD_REFINE_STEPS) -> BackwardSolution:
    """
    Solve the backward QP through its regularized KKT system.

    ``factor`` may be a cached ``KktFactor`` of the same matrix (for instance
    the one built while polishing the forward solution). Refinement targets
    ``||K t - rhs||_inf <= tol * (1 + ||rhs||_inf)``; if it stalls first, the
    iterate is still accepted when its residual is at the rounding floor
    ``64 eps ||K|| ||t||``.
    """
    system = bp.kkt_system(delta)
    if factor is None or factor.system.kkt.shape != system.kkt.shape \
            or not np.array_equal(factor.system.kkt, system.kkt):
        try:
            factor = linalg.factorize(system)
        except SingularMatrix as exc:
            raise SingularBackwardSystem(str(exc)) from exc

    d, mp = bp.P_prime.shape[0], bp.G_plus.shape[0]
    rhs = np.concatenate([-bp.q_prime, bp.rhs_c, bp.rhs_b])
    try:
        t = linalg.refine_to_floor(system, rhs, factor, tol, max_steps)
    except RefinementStalled as exc:
        raise SingularBackwardSystem(
            f"backward refinement stalled (residual {exc.residual:.2e}); "
            "active constraints may be linearly dependent") from exc
    return BackwardSolution(t[:d], t[d:d + mp], t[d + mp:])


def assemble_qp_gradients(sol: Solution, active: ActiveSet, bs: BackwardSolution,
                          kkt_norm=None) -> GradientBundle:
    """
    Parameter gradients from the backward solution.

    The multiplier ``lambda~`` of the symmetric active-set system already
    carries the ``D(lambda*)`` scaling of the nonsymmetric formulation, so the
    inequality terms read ``dG_+ = lambda~ z*' + lambda*_+ z~'`` and
    ``dc_+ = -lambda~``.
    """
    z, zt = sol.z_star, bs.z_tilde
    idx = active.array
    outer = np.outer(zt, z)
    dP = 0.5 * (outer + outer.T)
    dA = np.outer(bs.nu_tilde, z) + np.outer(sol.nu_star, zt)
    dG = np.zeros((sol.lambda_star.size, z.size))
    dc = np.zeros(sol.lambda_star.size)
    dG[idx] = np.outer(bs.lambda_tilde, z) + np.outer(sol.lambda_star[idx], zt)
    dc[idx] = -bs.lambda_tilde
    return GradientBundle(dP, zt.copy(), dA, -bs.nu_tilde, dG, dc, active.indices, kkt_norm)


def exact_kkt_matrix(problem: QpProblem, sol: Solution) -> np.ndarray:
    """Transposed differentiated KKT matrix, ordered (z, lambda, nu)."""
    d, m, n = problem.d, problem.m, problem.n
    lam = sol.lambda_star
    K = np.zeros((d + n + m, d + n + m))
    K[:d, :d] = problem.P
    K[:d, d:d + n] = problem.G.T * lam
    K[:d, d + n:] = problem.A.T
    K[d:d + n, :d] = problem.G
    K[d:d + n, d:d + n] = np.diag(problem.G @ sol.z_star - problem.c)
    K[d + n:, :d] = problem.A
    return K


def exact_backward_oracle(problem: QpProblem, sol: Solution, dL_dz, tol=1e-12,
                          max_steps=5) -> GradientBundle:
    """
    Reference gradients from the full differentiated KKT system.

    The matrix is inverted explicitly and the solution refined with the
    inverse until the normwise residual is below ``tol``.

    Raises
    ------
    SingularMatrix
        When the system is (numerically) singular, typically because strict
        complementarity fails at the forward solution.
    """
    d, m, n = problem.d, problem.m, problem.n
    g = np.asarray(dL_dz, dtype=float).ravel()
    K = exact_kkt_matrix(problem, sol)
    rhs = np.concatenate([-g, np.zeros(n + m)])
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("differentiated KKT matrix is singular") from exc
    x = Kinv @ rhs
    knorm = np.max(np.sum(np.abs(K), axis=1))
    for _ in range(max_steps):
        r = rhs - K @ x
        if np.max(np.abs(r)) <= tol * (knorm * np.max(np.abs(x)) + np.max(np.abs(rhs))):
            break
        x = x + Kinv @ r
    if not np.all(np.isfinite(x)) or \
            np.max(np.abs(rhs - K @ x)) > 1e-8 * (knorm * np.max(np.abs(x)) + np.max(np.abs(rhs))):
        raise SingularMatrix("differentiated KKT system could not be solved accurately")

    zt, lt, nt = x[:d], x[d:d + n], x[d + n:]
    z, lam = sol.z_star, sol.lambda_star
    outer = np.outer(zt, z)
    scaled = lam * lt
    return GradientBundle(
        dP=0.5 * (outer + outer.T),
        dq=zt.copy(),
        dA=np.outer(nt, z) + np.outer(sol.nu_star, zt),
        db=-nt,
        dG=np.outer(scaled, z) + np.outer(lam, zt),
        dc=-scaled,
        active=tuple(range(n)),
        kkt_norm=kkt_residual_norm(problem, z, sol.nu_star, lam),
    )


def bpqp_backward(problem: QpProblem, sol: Solution, dL_dz, eps_active=DEFAULT_EPS_ACTIVE,
                  delta=linalg.DEFAULT_DELTA, factor=None) -> GradientBundle:
    """Active-set detection, backward QP solve and gradient assembly in one call."""
    active = detect_active_set(problem, sol, eps_active)
    bp = build_backward_problem(problem, sol, active, dL_dz)
    bs = solve_backward(bp, delta, factor=factor)
    norm = kkt_residual_norm(problem, sol.z_star, sol.nu_star, sol.lambda_star)
    return assemble_qp_gradients(sol, active, bs, norm)


def gradient_cos_sim(a, b, zero_tol) -> float:
    """
    Cosine similarity that tolerates vanishing gradients: two vectors both
    below ``zero_tol`` in norm agree (1.0); exactly one below disagrees (0.0).
    """
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= zero_tol and nb <= zero_tol:
        return 1.0
    if na <= zero_tol or nb <= zero_tol:
        return 0.0
    return cosine_similarity(a, b)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))
