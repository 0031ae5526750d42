import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpdiff import (ActiveSet, BackwardProblem, DegenerateActiveSetWarning, GenSpec, QpProblem,
                    SingularBackwardSystem, ZeroVector, assemble_qp_gradients, bpqp_backward,
                    build_backward_problem, cosine_similarity, detect_active_set,
                    exact_backward_oracle, gen_qp, gradient_cos_sim, qp_layer_backward,
                    qp_layer_forward, solve, solve_backward)
from qpdiff.backward import exact_kkt_matrix

from oracles import enumerate_qp


def loss_of(problem):
    return float(np.sum(solve(problem).z_star))


def strictly_complementary(p, sol, tol=1e-3):
    slack = p.G @ sol.z_star - p.c
    active = sol.lambda_star > 0
    return np.all(sol.lambda_star[active] >= tol) and np.all(slack[~active] <= -tol) \
        and np.all(np.abs(slack[active]) < 1e-8)


def strict_instances(spec, count, start=0):
    out, k = [], start
    while len(out) < count:
        p = gen_qp(spec, k)
        sol = solve(p)
        if sol.solved and strictly_complementary(p, sol):
            out.append((k, p, sol))
        k += 1
    return out


# ------------------------------------------------------------------ active set

def test_active_single_constraint():
    p = QpProblem([[1.0]], [0.0], G=[[-1.0]], c=[-1.0])
    assert detect_active_set(p, solve(p)).indices == (0,)


def test_inactive_constraint():
    p = QpProblem([[1.0]], [2.0], G=[[1.0]], c=[5.0])
    sol = solve(p)
    assert sol.z_star[0] == pytest.approx(-2.0)
    assert detect_active_set(p, sol).indices == ()


def test_active_set_matches_exact_oracle_slacks():
    p = gen_qp(GenSpec("qp", 10, 0, 10, seed=0))
    z, _, _ = enumerate_qp(p.P, p.q, p.A, p.b, p.G, p.c)
    expect = tuple(int(i) for i in np.flatnonzero(p.G @ z - p.c >= -1e-6))
    assert detect_active_set(p, solve(p)).indices == expect


def test_weakly_active_row_warns_and_is_kept():
    # unconstrained minimum z = 1 sits exactly on z <= 1
    p = QpProblem([[1.0]], [-1.0], G=[[1.0]], c=[1.0])
    with pytest.warns(DegenerateActiveSetWarning):
        act = detect_active_set(p, solve(p))
    assert act.indices == (0,)


# ------------------------------------------------------------------ backward problem

def test_build_equality_example():
    p = QpProblem([[1.0]], [0.0], A=[[1.0]], b=[1.0])
    sol = solve(p)
    bp = build_backward_problem(p, sol, detect_active_set(p, sol), [1.0])
    np.testing.assert_array_equal(bp.P_prime, [[1.0]])
    np.testing.assert_array_equal(bp.q_prime, [1.0])
    np.testing.assert_array_equal(bp.A_prime, [[1.0]])
    assert bp.G_plus.shape == (0, 1)
    assert not bp.rhs_b.any() and bp.rhs_c.size == 0


def test_unconstrained_backward_is_linear_solve():
    rng = np.random.default_rng(2)
    P0 = rng.standard_normal((4, 4))
    P = P0.T @ P0 + np.eye(4)
    g = rng.standard_normal(4)
    bs = solve_backward(BackwardProblem(P, g, np.zeros((0, 4)), np.zeros((0, 4))))
    np.testing.assert_allclose(bs.z_tilde, -np.linalg.solve(P, g), rtol=1e-10)


def test_built_kkt_matches_oracle_matrix_on_active_rows():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=0))
    sol = solve(p)
    act = detect_active_set(p, sol)
    K = build_backward_problem(p, sol, act, np.ones(10)).kkt_system().kkt
    E = exact_kkt_matrix(p, sol)
    d, n = p.d, p.n
    keep = list(range(d)) + [d + i for i in act.indices] + list(range(d + n, d + n + p.m))
    R = E[np.ix_(keep, keep)].copy()
    # the oracle scales the active G columns by lambda_+; undo it to compare
    k = len(act)
    R[:d, d:d + k] /= sol.lambda_star[act.array]
    np.testing.assert_allclose(K, R, atol=1e-9, rtol=0)


def test_solve_backward_scalar_cases():
    bs = solve_backward(BackwardProblem(np.eye(1), np.ones(1), np.zeros((0, 1)), np.zeros((0, 1))))
    assert bs.z_tilde[0] == pytest.approx(-1.0, abs=1e-12)
    bs = solve_backward(BackwardProblem(np.eye(1), np.ones(1), np.eye(1), np.zeros((0, 1))))
    assert abs(bs.z_tilde[0]) <= 1e-12
    assert bs.nu_tilde[0] == pytest.approx(-1.0, abs=1e-12)


def test_backward_residual_50x10():
    p = gen_qp(GenSpec("qp", 50, 10, 10, seed=0))
    sol = solve(p)
    act = detect_active_set(p, sol)
    g = np.ones(50)
    bs = solve_backward(build_backward_problem(p, sol, act, g))
    Gp = p.G[act.array]
    r_stat = p.P @ bs.z_tilde + g + Gp.T @ bs.lambda_tilde + p.A.T @ bs.nu_tilde
    res = np.concatenate([r_stat, Gp @ bs.z_tilde, p.A @ bs.z_tilde])
    assert np.linalg.norm(res) <= 1e-8
    assert np.max(np.abs(p.A @ bs.z_tilde)) <= 1e-8
    assert np.max(np.abs(Gp @ bs.z_tilde), initial=0.0) <= 1e-8


def test_singular_backward_system():
    bp = BackwardProblem(np.zeros((1, 1)), np.ones(1), np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(SingularBackwardSystem):
        solve_backward(bp)


# ------------------------------------------------------------------ gradients

def test_scalar_dq():
    p = QpProblem([[1.0]], [2.0])
    g = bpqp_backward(p, solve(p), [1.0])
    assert g.dq[0] == pytest.approx(-1.0, abs=1e-12)
    assert exact_backward_oracle(p, solve(p), [1.0]).dq[0] == pytest.approx(-1.0, abs=1e-12)


def test_equality_db():
    p = QpProblem([[1.0]], [0.0], A=[[1.0]], b=[1.0])
    g = bpqp_backward(p, solve(p), [1.0])
    assert g.db[0] == pytest.approx(1.0, abs=1e-12)


def test_zero_upstream_gradient():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=0))
    g = bpqp_backward(p, solve(p), np.zeros(10))
    for arr in (g.dP, g.dq, g.dA, g.db, g.dG, g.dc):
        assert not np.any(arr)


def test_dP_is_exactly_symmetric():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=3))
    g = bpqp_backward(p, solve(p), np.arange(10.0))
    assert np.array_equal(g.dP, g.dP.T)


def _replace(p, **kw):
    data = dict(P=p.P, q=p.q, A=p.A, b=p.b, G=p.G, c=p.c)
    data.update(kw)
    return QpProblem(**data)


def _fd(p, name, h=1e-5, sym=False):
    base = np.array(getattr(p, name), dtype=float)
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        if sym and idx[0] > idx[1]:
            continue
        vals = []
        for s in (h, -h):
            arr = base.copy()
            arr[idx] += s
            if sym and idx[0] != idx[1]:
                arr[idx[::-1]] += s
            vals.append(loss_of(_replace(p, **{name: arr})))
        out[idx] = (vals[0] - vals[1]) / (2 * h)
        if sym:
            out[idx[::-1]] = out[idx]
    return out


def test_all_blocks_match_finite_differences():
    (k, p, sol), = strict_instances(GenSpec("qp", 10, 5, 5, seed=0), 1)
    g = bpqp_backward(p, sol, np.ones(10))
    for name in ("q", "b", "c", "A", "G"):
        fd = _fd(p, name)
        got = getattr(g, "d" + name)
        assert np.linalg.norm(got - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12), name
    # a symmetric perturbation of P_ij and P_ji picks up dP_ij + dP_ji
    fd = _fd(p, "P", sym=True)
    sym_grad = g.dP + g.dP.T - np.diag(np.diag(g.dP))
    assert np.linalg.norm(sym_grad - fd) <= 1e-4 * np.linalg.norm(fd)


def test_inactive_rows_have_zero_gradients():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=0))
    sol = solve(p)
    g = bpqp_backward(p, sol, np.ones(10))
    inactive = np.setdiff1d(np.arange(p.n), g.active)
    assert not g.dG[inactive].any() and not g.dc[inactive].any()
    assert g.dG_plus.shape == (len(g.active), 10)


def test_no_inequalities_oracle_agrees():
    p = gen_qp(GenSpec("qp", 8, 3, 0, seed=4))
    sol = solve(p)
    a = bpqp_backward(p, sol, np.ones(8))
    b = exact_backward_oracle(p, sol, np.ones(8))
    for x, y in ((a.dq, b.dq), (a.db, b.db), (a.dA, b.dA), (a.dP, b.dP)):
        np.testing.assert_allclose(x, y, atol=1e-8)


def test_oracle_equivalence_per_block():
    for k, p, sol in strict_instances(GenSpec("qp", 10, 5, 5, seed=0), 10):
        g = np.random.default_rng(k).standard_normal(10)
        a = bpqp_backward(p, sol, g)
        b = exact_backward_oracle(p, sol, g)
        for x, y in ((a.dq, b.dq), (a.db, b.db), (a.dA, b.dA), (a.dP, b.dP), (a.dG, b.dG),
                     (a.dc, b.dc)):
            assert gradient_cos_sim(x.ravel(), y.ravel(), 1e-9) >= 0.999


def test_cached_factor_matches_fresh_factor():
    p = gen_qp(GenSpec("qp", 50, 10, 10, seed=1))
    z, tape = qp_layer_forward(p)
    assert tape.factor is not None  # reused from polishing
    cached = qp_layer_backward(tape, np.ones(50))
    fresh = bpqp_backward(p, tape.solution, np.ones(50))
    np.testing.assert_allclose(cached.dq, fresh.dq, rtol=1e-9, atol=1e-12)


def test_multi_column_upstream_gradient():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=2))
    _, tape = qp_layer_forward(p)
    Gm = np.random.default_rng(0).standard_normal((10, 3))
    bundles = qp_layer_backward(tape, Gm)
    assert len(bundles) == 3
    for j, b in enumerate(bundles):
        np.testing.assert_allclose(b.dq, bpqp_backward(p, tape.solution, Gm[:, j]).dq, atol=1e-10)


def test_kkt_norm_attached():
    p = gen_qp(GenSpec("qp", 10, 5, 5, seed=0))
    g = bpqp_backward(p, solve(p), np.ones(10))
    assert g.kkt_norm is not None and g.kkt_norm < 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_feasible_direction_property(seed):
    p = gen_qp(GenSpec("qp", 8, 3, 4, seed=seed))
    sol = solve(p)
    if not sol.solved:
        return
    act = detect_active_set(p, sol)
    g = np.random.default_rng(seed).standard_normal(8)
    bs = solve_backward(build_backward_problem(p, sol, act, g))
    assert np.max(np.abs(p.A @ bs.z_tilde)) <= 1e-8
    assert np.max(np.abs(p.G[act.array] @ bs.z_tilde), initial=0.0) <= 1e-8


# ------------------------------------------------------------------ cosine similarity

@pytest.mark.parametrize("a,b,expect", [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0),
                                        ((1, 2, 3), (2, 4, 6), 1.0)])
def test_cosine_similarity(a, b, expect):
    assert cosine_similarity(a, b) == pytest.approx(expect, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def test_gradient_cos_sim_zero_convention():
    assert gradient_cos_sim([1e-15, 0], [0, -1e-15], 1e-9) == 1.0
    assert gradient_cos_sim([1e-15, 0], [1, 0], 1e-9) == 0.0
    assert gradient_cos_sim([1, 1], [2, 2], 1e-9) == pytest.approx(1.0)


def test_active_set_container():
    a = ActiveSet((1, 3), 1e-6)
    assert len(a) == 2 and a.array.tolist() == [1, 3]
