"""
Forward solver for convex quadratic programs

    minimize    1/2 z' P z + q' z
    subject to  A z = b
                G z <= c

The solver is an operator-splitting (ADMM) method on the stacked constraint
form ``l <= [A; G] z <= u`` with ``l = [b; -inf]`` and ``u = [b; c]``,
followed by an optional polishing step that re-solves the KKT system on the
guessed active set.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import linalg
from .exceptions import RefinementStalled, SingularMatrix


def _as_matrix(M, cols):
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((0, cols))
    return M.reshape(-1, cols)


@dataclass(frozen=True)
class QpProblem:
    """Dense QP data. Empty constraint blocks may be passed as ``None``."""

    P: np.ndarray
    q: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        d = q.size
        P = np.asarray(self.P, dtype=float).reshape(d, d)
        A = _as_matrix(self.A if self.A is not None else [], d)
        b = np.asarray(self.b if self.b is not None else [], dtype=float).ravel()
        G = _as_matrix(self.G if self.G is not None else [], d)
        c = np.asarray(self.c if self.c is not None else [], dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has length {b.size}")
        if G.shape[0] != c.size:
            raise ValueError(f"G has {G.shape[0]} rows but c has length {c.size}")
        for name, arr in (("P", P), ("q", q), ("A", A), ("b", b), ("G", G), ("c", c)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-10 * max(1.0, np.abs(P).max(initial=0.0)):
            raise ValueError("P is not symmetric")
        if d and np.linalg.eigvalsh(P)[0] < -1e-8:
            raise ValueError("P is not positive semidefinite")
        for name, arr in (("P", P), ("q", q), ("A", A), ("b", b), ("G", G), ("c", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self):
        return self.q.size

    @property
    def m(self):
        return self.b.size

    @property
    def n(self):
        return self.c.size

    def objective(self, z):
        return 0.5 * z @ self.P @ z + self.q @ z


class Status(str, enum.Enum):
    SOLVED = "Solved"
    SOLVED_INACCURATE = "SolvedInaccurate"
    MAX_ITER_REACHED = "MaxIterReached"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


@dataclass(frozen=True)
class SolverSettings:
    """
    ADMM settings.

    ``rho`` is the step size on inequality rows; equality rows use
    ``rho * eq_rho_scale``. With ``adaptive_rho`` the step is rescaled at
    check iterations by the square root of the normalized primal/dual residual
    ratio whenever that changes it by more than ``adaptive_rho_tolerance``.
    The rule depends only on iterates, so solves stay deterministic.
    """

    eps_abs: float = 1e-3
    eps_rel: float = 1e-3
    eps_prim_inf: float = 1e-4
    eps_dual_inf: float = 1e-4
    check_interval: int = 25
    max_iter: int = 4000
    sigma: float = 1e-6
    rho: float = 0.1
    alpha_relax: float = 1.6
    polish: bool = True
    eq_rho_scale: float = 1e3
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    delta: float = linalg.DEFAULT_DELTA
    polish_refine_steps: int = 50
    polish_max_rounds: int = 10
    polish_refine_tol: float = linalg.DEFAULT_REFINE_TOL

    def __post_init__(self):
        for name in ("eps_abs", "eps_rel", "eps_prim_inf", "eps_dual_inf", "sigma", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha_relax < 2:
            raise ValueError("alpha_relax must lie in (0, 2)")
        if np.any(np.asarray(self.rho) <= 0):
            raise ValueError("rho must be positive")
        if self.check_interval < 1 or self.max_iter < 1:
            raise ValueError("check_interval and max_iter must be >= 1")

    @classmethod
    def high_accuracy(cls, **kw):
        """Tighter tolerances used for long-only portfolio solves."""
        opts = dict(eps_abs=1e-5, eps_rel=1e-5, eps_prim_inf=1e-5, eps_dual_inf=1e-5)
        opts.update(kw)
        return cls(**opts)


@dataclass(frozen=True)
class Solution:
    z_star: np.ndarray
    nu_star: np.ndarray
    lambda_star: np.ndarray
    status: Status
    iterations: int
    prim_res: float
    dual_res: float
    polished: bool = False

    @property
    def solved(self):
        return self.status == Status.SOLVED


def kkt_residual_norm(problem: QpProblem, z, nu, lam) -> float:
    """Euclidean norm of the stacked (stationarity, complementarity, equality) residuals."""
    z = np.asarray(z, dtype=float)
    nu = np.asarray(nu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    r_dual = problem.P @ z + problem.q + problem.A.T @ nu + problem.G.T @ lam
    r_cent = lam * (problem.G @ z - problem.c)
    r_prim = problem.A @ z - problem.b
    return float(np.sqrt(r_dual @ r_dual + r_cent @ r_cent + r_prim @ r_prim))


def _residuals(problem, x, nu, lam):
    """Infinity-norm primal/dual residuals against the true constraint set."""
    r_prim = max(np.max(np.abs(problem.A @ x - problem.b), initial=0.0),
                 np.max(problem.G @ x - problem.c, initial=0.0))
    r_dual = np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ nu + problem.G.T @ lam),
                    initial=0.0)
    return float(r_prim), float(r_dual)


def _tolerances(settings, Px, Ax, z, ATy, q):
    inf = lambda v: np.max(np.abs(v), initial=0.0)
    eps_prim = settings.eps_abs + settings.eps_rel * max(inf(Ax), inf(z))
    eps_dual = settings.eps_abs + settings.eps_rel * max(inf(Px), inf(ATy), inf(q))
    return eps_prim, eps_dual


def admm_solve(problem: QpProblem, settings: SolverSettings = None,
               callback: Callable = None) -> Solution:
    """
    Run ADMM until the residual test passes, an infeasibility certificate is
    found, or ``max_iter`` is reached. No polishing is applied here.

    ``callback(k, x, y)`` is invoked after every iteration with the primal
    iterate and the stacked dual ``y = [nu; lambda]``.
    """
    settings = settings or SolverSettings()
    d, m, n = problem.d, problem.m, problem.n
    P, q = problem.P, problem.q
    Abar = np.vstack([problem.A, problem.G])
    lo = np.concatenate([problem.b, np.full(n, -np.inf)])
    hi = np.concatenate([problem.b, problem.c])

    rho = np.broadcast_to(np.asarray(settings.rho, dtype=float), (m + n,)).copy()
    rho[:m] *= settings.eq_rho_scale
    sigma, alpha = settings.sigma, settings.alpha_relax

    def factor(rho):
        # reduced form of the ADMM linear system (Schur complement on the v block)
        M = P + sigma * np.eye(d) + Abar.T @ (rho[:, None] * Abar)
        return sla.cho_factor(M, lower=True, check_finite=False)

    chol = factor(rho)
    # a strictly convex objective cannot be unbounded below; the absolute
    # certificate test would misfire on tiny-curvature objectives such as eps*||z||^2
    try:
        np.linalg.cholesky(P)
        strictly_convex = True
    except np.linalg.LinAlgError:
        strictly_convex = False

    x = np.zeros(d)
    z = np.zeros(m + n)
    y = np.zeros(m + n)
    status = Status.MAX_ITER_REACHED
    r_prim = r_dual = np.inf
    k = 0
    for k in range(1, settings.max_iter + 1):
        x_prev, y_prev = x, y
        xt = sla.cho_solve(chol, sigma * x - q + Abar.T @ (rho * z - y), check_finite=False)
        zt = Abar @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zh = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zh + y / rho, lo, hi)
        y = y + rho * (zh - z_new)
        z = z_new
        if callback is not None:
            callback(k, x, y)

        if k % settings.check_interval and k != settings.max_iter:
            continue

        Ax = Abar @ x
        Px = P @ x
        ATy = Abar.T @ y
        r_prim = np.max(np.abs(Ax - z), initial=0.0)
        r_dual = np.max(np.abs(Px + q + ATy), initial=0.0)
        eps_prim, eps_dual = _tolerances(settings, Px, Ax, z, ATy, q)
        if r_prim <= eps_prim and r_dual <= eps_dual:
            status = Status.SOLVED
            break
        if _primal_infeasible(Abar, lo, hi, y - y_prev, settings.eps_prim_inf):
            status = Status.PRIMAL_INFEASIBLE
            break
        if not strictly_convex and _dual_infeasible(P, q, Abar, m, x - x_prev, settings.eps_dual_inf):
            status = Status.DUAL_INFEASIBLE
            break
        if k == settings.max_iter and r_prim <= 10 * eps_prim and r_dual <= 10 * eps_dual:
            status = Status.SOLVED_INACCURATE
        elif settings.adaptive_rho:
            num = r_prim / max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-10)
            den = r_dual / max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(ATy), initial=0.0),
                               np.max(np.abs(q), initial=0.0), 1e-10)
            scale = np.sqrt(num / max(den, 1e-10))
            new_rho = np.clip(rho * scale, 1e-6, 1e6)
            tol = settings.adaptive_rho_tolerance
            if scale > tol or scale < 1.0 / tol:
                rho = new_rho
                chol = factor(rho)

    return Solution(x, y[:m].copy(), y[m:].copy(), status, k, float(r_prim), float(r_dual))


def _primal_infeasible(Abar, lo, hi, dy, eps):
    norm = np.max(np.abs(dy), initial=0.0)
    if norm < 1e-12:
        return False
    if np.max(np.abs(Abar.T @ dy), initial=0.0) > eps * norm:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((pos > 0) & ~np.isfinite(hi)) or np.any((neg < 0) & ~np.isfinite(lo)):
        return False
    support = np.where(pos > 0, hi, 0.0) @ pos + np.where(neg < 0, lo, 0.0) @ neg
    return support < -eps * norm


def _dual_infeasible(P, q, Abar, m, dx, eps):
    norm = np.max(np.abs(dx), initial=0.0)
    if norm < 1e-12:
        return False
    if np.max(np.abs(P @ dx), initial=0.0) > eps * norm or q @ dx > -eps * norm:
        return False
    Adx = Abar @ dx
    return bool(np.all(np.abs(Adx[:m]) <= eps * norm) and np.all(Adx[m:] <= eps * norm))


@dataclass
class PolishCache:
    """Factorization of the active-set KKT matrix built during polishing."""

    active: tuple
    system: linalg.KktSystem
    factor: linalg.KktFactor = field(repr=False)


def _violation(problem, z, lam):
    return max(np.max(problem.G @ z - problem.c, initial=0.0), np.max(-lam, initial=0.0))


def _active_set_solve(problem, active, settings):
    system = linalg.KktSystem.from_blocks(problem.P, problem.G[active], problem.A, settings.delta)
    rhs = np.concatenate([-problem.q, problem.c[active], problem.b])
    factor = linalg.factorize(system)
    try:
        t = linalg.refine_to_floor(system, rhs, factor, settings.polish_refine_tol,
                                   settings.polish_refine_steps)
    except RefinementStalled as exc:
        t = exc.best
    d, k = problem.d, active.size
    lam = np.zeros(problem.n)
    lam[active] = t[d:d + k]
    return t[:d], t[d + k:], lam, system, factor


def _polish(problem, raw, settings):
    if raw.status not in (Status.SOLVED, Status.SOLVED_INACCURATE):
        return raw, None
    z, lam = raw.z_star, raw.lambda_star
    active = np.flatnonzero(problem.c - problem.G @ z < lam)
    seen = set()
    for _ in range(settings.polish_max_rounds):
        seen.add(tuple(active))
        try:
            zp, nu_p, lam_p, system, factor = _active_set_solve(problem, active, settings)
        except SingularMatrix:
            return raw, None
        if not np.all(np.isfinite(zp)):
            return raw, None
        Gz = problem.G @ zp
        # primal and dual quantities live on different scales (|z| ~ 1/eps for LPs)
        tol_p = 1e-7 * (1.0 + max(np.max(np.abs(problem.c), initial=0.0),
                                  np.max(np.abs(Gz), initial=0.0)))
        tol_d = 1e-7 * (1.0 + max(np.max(np.abs(lam_p), initial=0.0),
                                  np.max(np.abs(problem.q), initial=0.0)))
        violated = np.flatnonzero(Gz - problem.c > tol_p)
        negative = np.flatnonzero(lam_p < -tol_d)
        if violated.size == 0 and negative.size == 0:
            break
        # primal-dual active set correction: drop wrong-signed rows, add violated ones
        nxt = np.union1d(np.setdiff1d(active, negative), violated)
        if tuple(nxt) in seen:
            return raw, None
        active = nxt
    else:
        return raw, None

    if kkt_residual_norm(problem, zp, nu_p, lam_p) > kkt_residual_norm(problem, z, raw.nu_star, lam):
        return raw, None
    # clip the tiny negative multipliers produced by weakly active rows
    lam_p = np.maximum(lam_p, 0.0)
    r_prim, r_dual = _residuals(problem, zp, nu_p, lam_p)
    polished = Solution(zp, nu_p, lam_p, Status.SOLVED, raw.iterations, r_prim, r_dual, True)
    return polished, PolishCache(tuple(int(i) for i in active), system, factor)


def polish(problem: QpProblem, raw: Solution, settings: SolverSettings = None) -> Solution:
    """
    Sharpen an ADMM solution by solving the equality-constrained KKT system on
    the active set guessed from ``raw``.

    If the guess yields violated constraints or negative multipliers, the set
    is corrected (violated rows added, wrong-signed rows dropped) for at most
    ``settings.polish_max_rounds`` rounds. Returns ``raw`` unchanged when no
    consistent set is found or the polished KKT residual is larger.
    """
    return _polish(problem, raw, settings or SolverSettings())[0]


def solve(problem: QpProblem, settings: SolverSettings = None) -> Solution:
    """ADMM followed by polishing (when ``settings.polish`` is on)."""
    return _solve_with_cache(problem, settings)[0]


def _solve_with_cache(problem, settings=None):
    settings = settings or SolverSettings()
    raw = admm_solve(problem, settings)
    if not settings.polish:
        return raw, None
    return _polish(problem, raw, settings)


def is_kkt_consistent(problem: QpProblem, sol: Solution, settings: SolverSettings = None) -> bool:
    """Check the residual test that defines the Solved status."""
    settings = settings or SolverSettings()
    x, nu, lam = sol.z_star, sol.nu_star, sol.lambda_star
    Px = problem.P @ x
    Abar = np.vstack([problem.A, problem.G])
    y = np.concatenate([nu, lam])
    Ax = Abar @ x
    ATy = Abar.T @ y
    zproj = np.concatenate([problem.b, np.minimum(problem.G @ x, problem.c)])
    eps_prim, eps_dual = _tolerances(settings, Px, Ax, zproj, ATy, problem.q)
    r_prim, r_dual = _residuals(problem, x, nu, lam)
    # lambda_i > 0 only on rows within eps_prim of their bound
    r_cent = np.max(np.abs(lam * (problem.G @ x - problem.c)), initial=0.0)
    cent_tol = eps_prim * max(1.0, np.max(np.abs(lam), initial=0.0))
    return bool(r_prim <= eps_prim and r_dual <= eps_dual and r_cent <= cent_tol
                and np.min(lam, initial=0.0) >= -1e-6)


__all__ = ["QpProblem", "SolverSettings", "Solution", "Status", "admm_solve", "polish",
           "solve", "kkt_residual_norm", "is_kkt_consistent", "PolishCache"]
