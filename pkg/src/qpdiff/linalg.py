"""
Dense kernels for regularized quasi-definite KKT systems.

The matrices handled here have the saddle-point layout::

    K = [ H   C^T ]
        [ C   E   ]

with ``H`` symmetric positive semidefinite (d x d), ``C`` the stacked constraint
rows and ``E`` usually zero. Adding ``+delta`` on the primal diagonal and
``-delta`` on the constraint diagonal makes the matrix quasi-definite, which
admits an LDL^T factorization with a +/-1 diagonal for the natural ordering.
We compute it blockwise: a Cholesky factor of ``H + delta I`` followed by a
Cholesky factor of the Schur complement ``delta I - E + C (H + delta I)^-1 C^T``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .exceptions import RefinementStalled, SingularMatrix

DEFAULT_DELTA = 1e-6
DEFAULT_REFINE_STEPS = 10
DEFAULT_REFINE_TOL = 1e-10


@dataclass(frozen=True)
class KktSystem:
    """
    Unregularized KKT matrix plus the regularization used to factor it.

    Attributes
    ----------
    kkt : ndarray, shape (N, N)
        The exact (unregularized) symmetric KKT matrix.
    blocks : tuple of int
        ``(d, m_plus, m)``: primal, active-inequality and equality block sizes.
    delta : float
        Diagonal shift; ``+delta`` on the primal block, ``-delta`` elsewhere.
    """

    kkt: np.ndarray
    blocks: tuple
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        kkt = np.asarray(self.kkt, dtype=float)
        n = sum(self.blocks)
        if kkt.shape != (n, n):
            raise ValueError(f"kkt has shape {kkt.shape}, blocks {self.blocks} imply {(n, n)}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "kkt", kkt)
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))

    @classmethod
    def from_blocks(cls, P, G_plus=None, A=None, delta=DEFAULT_DELTA):
        """Assemble ``[[P, G+^T, A^T], [G+, 0, 0], [A, 0, 0]]`` symmetrically."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        d = P.shape[0]
        G_plus = np.zeros((0, d)) if G_plus is None else np.asarray(G_plus, dtype=float).reshape(-1, d)
        A = np.zeros((0, d)) if A is None else np.asarray(A, dtype=float).reshape(-1, d)
        C = np.vstack([G_plus, A])
        n = d + C.shape[0]
        K = np.zeros((n, n))
        K[:d, :d] = P
        K[d:, :d] = C
        K[:d, d:] = C.T
        return cls(K, (d, G_plus.shape[0], A.shape[0]), delta)

    @property
    def size(self):
        return self.kkt.shape[0]

    @property
    def n_primal(self):
        return self.blocks[0]

    def shift(self):
        """Diagonal of the regularization ``Delta K``."""
        d = self.n_primal
        s = np.full(self.size, -self.delta)
        s[:d] = self.delta
        return s

    def regularized(self):
        return self.kkt + np.diag(self.shift())


@dataclass
class KktFactor:
    """Factorization of ``K + Delta K``; reusable across right-hand sides."""

    system: KktSystem
    method: str
    _data: tuple = field(repr=False)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.system.size:
            raise ValueError(f"rhs has length {rhs.shape[0]}, system has size {self.system.size}")
        if self.method == "lu":
            return sla.lu_solve(self._data, rhs, check_finite=False)

        L, W, M = self._data
        d = self.system.n_primal
        r1, r2 = rhs[:d], rhs[d:]
        # forward: [L 0; W M] u = rhs
        u1 = sla.solve_triangular(L, r1, lower=True, check_finite=False)
        u2 = sla.solve_triangular(M, r2 - W @ u1, lower=True, check_finite=False)
        # diag(I, -I) then back substitution with the transpose
        x2 = sla.solve_triangular(M.T, -u2, lower=False, check_finite=False)
        x1 = sla.solve_triangular(L.T, u1 - W.T @ x2, lower=False, check_finite=False)
        return np.concatenate([x1, x2], axis=0)


def factorize(system: KktSystem) -> KktFactor:
    """
    Factor ``K + Delta K``.

    The signed block Cholesky path is tried first; if either block is not
    numerically positive definite (possible only with ``delta == 0`` or an
    indefinite primal block) a pivoted LU of the full matrix is used instead.
    """
    d = system.n_primal
    K = system.kkt
    H = K[:d, :d] + system.delta * np.eye(d)
    C = K[d:, :d]
    E = K[d:, d:]
    try:
        L = np.linalg.cholesky(H) if d else np.zeros((0, 0))
        W = sla.solve_triangular(L, C.T, lower=True, check_finite=False).T if d else C
        S = W @ W.T + system.delta * np.eye(K.shape[0] - d) - E
        M = np.linalg.cholesky(S) if S.size else np.zeros((0, 0))
        return KktFactor(system, "ldl", (L, W, M))
    except np.linalg.LinAlgError:
        pass

    Kr = system.regularized()
    with warnings.catch_warnings():
        # an exact zero pivot is reported as SingularMatrix below
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(Kr, check_finite=False)
    pivots = np.abs(np.diag(lu))
    scale = max(np.abs(Kr).max(), 1.0) if Kr.size else 1.0
    if Kr.size and (not np.all(np.isfinite(pivots)) or pivots.min() <= np.finfo(float).eps * scale * Kr.shape[0]):
        raise SingularMatrix(f"zero pivot in KKT factorization (delta={system.delta:g})")
    return KktFactor(system, "lu", (lu, piv))


def factor_and_solve(system: KktSystem, rhs) -> np.ndarray:
    """Solve ``(K + Delta K) t = rhs`` with one factorization."""
    return factorize(system).solve(rhs)


@dataclass(frozen=True)
class RefinementInfo:
    steps: int
    residual: float


def iterative_refinement(system: KktSystem, rhs, max_steps=DEFAULT_REFINE_STEPS,
                         tol=DEFAULT_REFINE_TOL, factor=None, return_info=False):
    """
    Recover the solution of the unregularized system ``K t = rhs``.

    Starting from ``t = (K + Delta K)^-1 rhs`` the correction
    ``(K + Delta K) dt = rhs - K t`` is applied until ``||K t - rhs||_inf <= tol``.
    The initial solve counts as the first step.

    Raises
    ------
    RefinementStalled
        If the residual fails to decrease for 3 consecutive steps, or
        ``max_steps`` solves are used without reaching ``tol``. The best
        iterate is attached as ``exc.best``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if factor is None:
        factor = factorize(system)
    K = system.kkt

    t = factor.solve(rhs)
    res = np.max(np.abs(K @ t - rhs), initial=0.0)
    best, best_res = t, res
    stalls = 0
    steps = 1
    while res > tol:
        if steps >= max_steps or stalls >= 3:
            exc = RefinementStalled(
                f"residual {best_res:.3e} > tol {tol:.1e} after {steps} steps")
            exc.best = best
            exc.residual = best_res
            raise exc
        t = t + factor.solve(rhs - K @ t)
        steps += 1
        new_res = np.max(np.abs(K @ t - rhs), initial=0.0)
        stalls = stalls + 1 if new_res >= res else 0
        res = new_res
        if res < best_res:
            best, best_res = t, res

    if return_info:
        return t, RefinementInfo(steps, float(res))
    return t


def refine_to_floor(system: KktSystem, rhs, factor=None, tol=DEFAULT_REFINE_TOL,
                    max_steps=50) -> np.ndarray:
    """
    Iterative refinement that also accepts a stalled iterate whose residual
    sits at the rounding floor ``64 eps (||K||_inf ||t||_inf + ||rhs||_inf)``.
    ``tol`` is scaled by ``1 + ||rhs||_inf``.
    """
    rhs = np.asarray(rhs, dtype=float)
    rhs_norm = np.max(np.abs(rhs), initial=0.0)
    try:
        return iterative_refinement(system, rhs, max_steps, tol * (1.0 + rhs_norm), factor=factor)
    except RefinementStalled as exc:
        t = exc.best
        knorm = np.max(np.sum(np.abs(system.kkt), axis=1), initial=0.0)
        floor = 64 * np.finfo(float).eps * (knorm * np.max(np.abs(t), initial=0.0) + rhs_norm)
        if exc.residual <= floor:
            return t
        raise
