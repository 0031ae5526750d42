"""
Differentiable layers built on the forward solver and the backward QP.

Each ``*_forward`` returns the optimal point and a ``LayerTape``; the matching
``*_backward`` maps an upstream gradient ``dL/dz*`` to parameter gradients.
Tapes can also be produced from an externally computed primal-dual point via
``attach_external_solution``, since the backward pass only needs the problem
data and the optimum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import linalg
from .backward import (DEFAULT_EPS_ACTIVE, ActiveSet, BackwardProblem, GradientBundle,
                       assemble_qp_gradients, build_backward_problem, detect_active_set,
                       solve_backward)
from .exceptions import (InvalidExternalSolution, LayerForwardFailed, SingularBackwardSystem,
                         SingularMatrix, UnsupportedSocp)
from .qp import QpProblem, Solution, SolverSettings, Status, _solve_with_cache, kkt_residual_norm

EXTERNAL_KKT_TOL = 1e-4


@dataclass(frozen=True)
class LpLayerSpec:
    """``minimize theta'z + eps ||z||^2  s.t.  A z = b, G z <= h``."""

    theta: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    eps: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())

    def lower(self) -> QpProblem:
        d = self.theta.size
        return QpProblem(2.0 * self.eps * np.eye(d), self.theta, self.A, self.b, self.G, self.h)


@dataclass(frozen=True)
class SocpLayerSpec:
    """``minimize q'z  s.t.  a_i'z + ||z||_2 <= b_i`` for each row ``a_i`` of ``a``."""

    q: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).reshape(-1, q.size)
        b = np.asarray(self.b, dtype=float).ravel()
        if a.shape[0] < 1 or a.shape[0] != b.size:
            raise ValueError("need m >= 1 cone constraints with matching a and b")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def d(self):
        return self.q.size

    @property
    def m(self):
        return self.b.size


@dataclass
class LayerTape:
    """State saved by a forward pass for the matching backward pass."""

    problem: Any
    solution: Solution
    active: ActiveSet
    factor: Optional[linalg.KktFactor] = field(default=None, repr=False)
    delta: float = linalg.DEFAULT_DELTA


@dataclass(frozen=True)
class SocpGradients:
    dq: np.ndarray
    da: np.ndarray
    db: np.ndarray
    active: tuple

    @property
    def da_plus(self):
        return self.da[list(self.active)]

    @property
    def db_plus(self):
        return self.db[list(self.active)]


def _qp_tape(problem, sol, cache, settings):
    active = detect_active_set(problem, sol, DEFAULT_EPS_ACTIVE)
    factor = None
    # polishing factored exactly the backward KKT matrix when the active sets agree
    if cache is not None and cache.active == active.indices and cache.system.delta == settings.delta:
        factor = cache.factor
    return LayerTape(problem, sol, active, factor, settings.delta)


def qp_layer_forward(problem: QpProblem, settings: SolverSettings = None):
    settings = settings or SolverSettings()
    sol, cache = _solve_with_cache(problem, settings)
    if sol.status != Status.SOLVED:
        raise LayerForwardFailed(f"forward solve ended with status {sol.status.value}", sol.status)
    return sol.z_star, _qp_tape(problem, sol, cache, settings)


def qp_layer_backward(tape: LayerTape, dL_dz):
    """
    Gradients of the loss with respect to ``(P, q, A, b, G, c)``.

    A 2-D ``dL_dz`` of shape ``(d, k)`` is treated as ``k`` separate
    vector-Jacobian products sharing one factorization; a list is returned.
    """
    problem, sol = tape.problem, tape.solution
    dL_dz = np.asarray(dL_dz, dtype=float)
    norm = kkt_residual_norm(problem, sol.z_star, sol.nu_star, sol.lambda_star)
    cols = dL_dz.reshape(problem.d, -1) if dL_dz.ndim == 2 else dL_dz.reshape(problem.d, 1)
    out = []
    for j in range(cols.shape[1]):
        bp = build_backward_problem(problem, sol, tape.active, cols[:, j])
        if tape.factor is None:
            tape.factor = linalg.factorize(bp.kkt_system(tape.delta))
        bs = solve_backward(bp, tape.delta, factor=tape.factor)
        out.append(assemble_qp_gradients(sol, tape.active, bs, norm))
    return out if dL_dz.ndim == 2 else out[0]


def lp_layer_forward(spec: LpLayerSpec, settings: SolverSettings = None):
    return qp_layer_forward(spec.lower(), settings)


def lp_layer_backward(tape: LayerTape, dL_dz) -> np.ndarray:
    return qp_layer_backward(tape, dL_dz).dq


def socp_layer_forward(spec: SocpLayerSpec, settings: SolverSettings = None):
    """
    Closed-form solve for the single-ball case ``a_1 = 0``::

        z* = -b_1 q / ||q||,   lambda*_1 = ||q||

    The multiplier follows from stationarity ``q + lambda z*/||z*|| = 0``.
    Other instances need ``attach_external_solution``.
    """
    if spec.m != 1 or np.any(spec.a != 0):
        raise UnsupportedSocp("closed-form forward covers only a_i = 0 with m = 1; "
                              "use attach_external_solution for other instances")
    qn = np.linalg.norm(spec.q)
    if qn == 0:
        raise UnsupportedSocp("q = 0 leaves the optimum non-unique")
    if spec.b[0] <= 0:
        raise UnsupportedSocp("b_1 <= 0 leaves at most the single point z = 0")
    z = -spec.b[0] * spec.q / qn
    lam = np.array([qn])
    sol = Solution(z, np.zeros(0), lam, Status.SOLVED, 0, 0.0, 0.0)
    return z, lam, LayerTape(spec, sol, _socp_active(lam))


def _socp_active(lam, eps_active=DEFAULT_EPS_ACTIVE):
    eps = eps_active * (1.0 + np.max(np.abs(lam), initial=0.0))
    return ActiveSet(tuple(int(i) for i in np.flatnonzero(lam >= eps)), float(eps))


def socp_backward_problem(spec: SocpLayerSpec, z, lam, active: ActiveSet, dL_dz) -> BackwardProblem:
    """
    Backward QP for the robust LP with Hessian
    ``(t1/t0) I - (t1/t0^3) z* z*'`` (``t0 = ||z*||``, ``t1`` the sum of active
    multipliers) and equality rows ``(a_i + z*/t0)' z~ = 0``.
    """
    t0 = np.linalg.norm(z)
    if t0 == 0:
        raise SingularBackwardSystem("z* is at the cone vertex; ||z|| is not differentiable there")
    idx = active.array
    t1 = lam[idx].sum()
    H = (t1 / t0) * np.eye(z.size) - (t1 / t0 ** 3) * np.outer(z, z)
    rows = spec.a[idx] + z / t0
    return BackwardProblem(H, np.asarray(dL_dz, dtype=float).ravel(), rows.reshape(-1, z.size),
                           np.zeros((0, z.size)))


def socp_layer_backward(tape: LayerTape, dL_dz) -> SocpGradients:
    spec, sol = tape.problem, tape.solution
    z, lam = sol.z_star, sol.lambda_star
    bp = socp_backward_problem(spec, z, lam, tape.active, dL_dz)
    bs = solve_backward(bp, tape.delta)
    idx = tape.active.array
    # the active cone rows sit in the equality block of the backward problem
    lt = bs.nu_tilde
    da = np.zeros_like(spec.a)
    db = np.zeros(spec.m)
    da[idx] = lam[idx, None] * bs.z_tilde + lt[:, None] * z
    db[idx] = -lt
    return SocpGradients(bs.z_tilde.copy(), da, db, tape.active.indices)


def socp_exact_oracle(spec: SocpLayerSpec, z, lam, dL_dz, tol=1e-12, max_steps=5) -> SocpGradients:
    """
    Reference SOCP gradients from the full differentiated KKT system.

    With ``u = z/||z||`` and rows ``r_i = a_i + u`` the transposed Jacobian of
    the KKT map is ``[[t1 H, R' D(lambda)], [R, D(g)]]`` where
    ``H = (I - u u')/||z||`` and ``g = a z + ||z|| - b``. It is inverted
    explicitly; the multiplier enters the bound and cone-row gradients
    scaled by ``lambda``.
    """
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    g_L = np.asarray(dL_dz, dtype=float).ravel()
    d, m = spec.d, spec.m
    t0 = np.linalg.norm(z)
    if t0 == 0:
        raise SingularBackwardSystem("z* is at the cone vertex")
    u = z / t0
    R = spec.a + u
    K = np.zeros((d + m, d + m))
    K[:d, :d] = lam.sum() * (np.eye(d) - np.outer(u, u)) / t0
    K[:d, d:] = R.T * lam
    K[d:, :d] = R
    K[d:, d:] = np.diag(spec.a @ z + t0 - spec.b)
    rhs = np.concatenate([-g_L, np.zeros(m)])
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("differentiated SOCP KKT matrix is singular") from exc
    x = Kinv @ rhs
    for _ in range(max_steps):
        r = rhs - K @ x
        if np.max(np.abs(r)) <= tol * (1.0 + np.max(np.abs(rhs))):
            break
        x = x + Kinv @ r
    if not np.all(np.isfinite(x)):
        raise SingularMatrix("differentiated SOCP KKT system could not be solved")
    zt, lt = x[:d], x[d:]
    scaled = lam * lt
    return SocpGradients(zt.copy(), lam[:, None] * zt + scaled[:, None] * z, -scaled,
                         tuple(range(m)))


def socp_kkt_residual_norm(spec: SocpLayerSpec, z, lam) -> float:
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    t0 = np.linalg.norm(z)
    unit = z / t0 if t0 > 0 else np.zeros_like(z)
    r_dual = spec.q + spec.a.T @ lam + lam.sum() * unit
    r_cent = lam * (spec.a @ z + t0 - spec.b)
    return float(np.sqrt(r_dual @ r_dual + r_cent @ r_cent))


def attach_external_solution(spec, z, nu=None, lam=None, settings: SolverSettings = None,
                             tol=EXTERNAL_KKT_TOL) -> LayerTape:
    """
    Build a tape from a primal-dual point computed by any solver.

    ``spec`` may be a ``QpProblem``, ``LpLayerSpec`` or ``SocpLayerSpec``.
    The point is rejected when its KKT residual norm, primal infeasibility or
    dual sign violation exceeds ``tol``.
    """
    settings = settings or SolverSettings()
    z = np.asarray(z, dtype=float).ravel()
    if isinstance(spec, SocpLayerSpec):
        lam = np.asarray(lam, dtype=float).ravel()
        res = socp_kkt_residual_norm(spec, z, lam)
        viol = max(np.max(spec.a @ z + np.linalg.norm(z) - spec.b), np.max(-lam, initial=0.0))
        if not res <= tol or viol > tol:
            raise InvalidExternalSolution(f"KKT residual {res:.2e}, violation {viol:.2e} exceed {tol:g}")
        sol = Solution(z, np.zeros(0), lam, Status.SOLVED, 0, max(viol, 0.0), res)
        return LayerTape(spec, sol, _socp_active(lam), None, settings.delta)

    problem = spec.lower() if isinstance(spec, LpLayerSpec) else spec
    nu = np.zeros(problem.m) if nu is None else np.asarray(nu, dtype=float).ravel()
    lam = np.zeros(problem.n) if lam is None else np.asarray(lam, dtype=float).ravel()
    res = kkt_residual_norm(problem, z, nu, lam)
    viol = max(np.max(problem.G @ z - problem.c, initial=0.0), np.max(-lam, initial=0.0))
    if not res <= tol or viol > tol:
        raise InvalidExternalSolution(f"KKT residual {res:.2e}, violation {viol:.2e} exceed {tol:g}")
    sol = Solution(z, nu, lam, Status.SOLVED, 0, viol, res)
    return LayerTape(problem, sol, detect_active_set(problem, sol), None, settings.delta)
