import math
import warnings

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from safemarl.errors import DegenerateDualError, InvalidInputError, RecoveryRequired
from safemarl.trust_region import (backtracking_line_search, conjugate_gradient, dual_function, primal_step,
                                   recovery_direction, recovery_step, solve_lqclp_multi, solve_lqclp_single,
                                   solve_trust_region)


def random_spd(rng, n, cond=20.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def cvx_primal(g, B, c, H, delta):
    """max g^T x  s.t.  B^T x + c <= 0,  x^T H x <= delta, solved by a generic conic solver."""
    x = cp.Variable(len(g))
    L = np.linalg.cholesky(H)
    cons = [cp.sum_squares(L.T @ x) <= delta, B.T @ x + c <= 0]
    prob = cp.Problem(cp.Maximize(g @ x), cons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    # "optimal_inaccurate" only reports the solver's own gap tolerance; callers still compare x and the value
    status = "optimal" if prob.status in ("optimal", "optimal_inaccurate") else prob.status
    return status, x.value, prob.value


def products(g, B, H):
    hg, hB = np.linalg.solve(H, g), np.linalg.solve(H, B)
    return hg, hB, float(g @ hg), g @ hB, B.T @ hB


def test_cg_identity_converges_in_one_step():
    b = np.array([3.0, -1.0, 2.0])
    res = conjugate_gradient(lambda v: v, b, iters=10)
    assert res.converged and res.iterations == 1
    assert np.allclose(res.x, b)


def test_cg_diagonal():
    res = conjugate_gradient(lambda v: np.array([2.0, 4.0]) * v, np.array([2.0, 4.0]), iters=10)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cg_matches_direct_solve(seed):
    rng = np.random.default_rng(seed)
    H = random_spd(rng, 50, cond=100.0)
    b = rng.normal(size=50)
    res = conjugate_gradient(lambda v: H @ v, b, iters=200)
    assert np.linalg.norm(res.x - np.linalg.solve(H, b)) / np.linalg.norm(b) < 1e-8


def test_inactive_constraint_gives_plain_natural_gradient():
    sol = solve_lqclp_single(4.0, 0.3, 1.0, -math.inf, 0.25)
    assert sol.case == "inactive" and sol.nu[0] == 0
    assert sol.lam == pytest.approx(math.sqrt(4.0 / 0.25))
    far = solve_lqclp_single(4.0, 0.3, 1.0, -10.0, 0.25)
    assert far.nu[0] == 0 and far.lam == pytest.approx(4.0)


def test_tangent_plane_instance_against_dual_grid():
    # q = s = 1, r = 0, c = 0, delta = 0.5: optimum value sqrt(0.5) with the constraint just touching
    sol = solve_lqclp_single(1.0, 0.0, 1.0, 0.0, 0.5)
    lam = np.linspace(1e-3, 5, 2001)[:, None]
    nu = np.linspace(0, 5, 2001)[None, :]
    grid = (1 - 2 * 0 * nu + nu ** 2) / (2 * lam) - 0 * nu + lam * 0.5 / 2
    assert sol.bound() == pytest.approx(grid.min(), abs=1e-5)
    assert sol.bound() == pytest.approx(math.sqrt(0.5), rel=1e-9)
    x = primal_step(sol, np.array([1.0, 0.0]), np.array([[0.0], [1.0]]))
    assert np.allclose(x, [math.sqrt(0.5), 0.0])


def test_single_constraint_errors():
    with pytest.raises(RecoveryRequired):
        solve_lqclp_single(1.0, 0.0, 1.0, 2.0, 0.5)
    with pytest.raises(RecoveryRequired):
        solve_lqclp_single(1.0, 0.0, 0.0, 0.1, 0.5)
    with pytest.raises(DegenerateDualError):
        solve_lqclp_single(0.0, 0.0, 1.0, -0.1, 0.5)
    with pytest.raises(InvalidInputError):
        solve_lqclp_single(1.0, 0.0, 1.0, -0.1, 0.0)


@pytest.mark.parametrize("seed", range(200))
def test_single_constraint_matches_conic_primal(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    H = random_spd(rng, n)
    g, b = rng.normal(size=n), rng.normal(size=n)
    delta = float(rng.uniform(0.01, 1.0))
    hg, hB, q, r, S = products(g, b[:, None], H)
    s = float(S[0, 0])
    # offsets on both sides, all inside the region where a step exists
    c = float(rng.uniform(-1.5, 0.95) * math.sqrt(delta * s))
    assert q * s >= r[0] ** 2 - 1e-10
    sol = solve_lqclp_single(q, r[0], s, c, delta)
    x = primal_step(sol, hg, hB)
    status, x_ref, val_ref = cvx_primal(g, b[:, None], np.array([c]), H, delta)
    assert status == "optimal"
    assert g @ x == pytest.approx(val_ref, abs=1e-6 * max(1, abs(val_ref)))
    assert sol.bound() == pytest.approx(val_ref, abs=1e-6 * max(1, abs(val_ref)))
    assert np.linalg.norm(x - x_ref) < 1e-4 * max(1, np.linalg.norm(x_ref))
    # primal feasibility and complementary slackness
    assert x @ H @ x <= delta * (1 + 1e-9)
    assert b @ x + c <= 1e-9 * max(1, abs(c))
    assert abs(sol.nu[0] * (b @ x + c)) < 1e-8


@given(st.floats(0.1, 10), st.floats(-0.99, 0.99), st.floats(0.1, 10), st.floats(-3, 0.9), st.floats(0.05, 2),
       st.floats(0.01, 5), st.floats(0, 5))
def test_weak_duality(q, corr, s, cfrac, delta, lam, nu):
    r = corr * math.sqrt(q * s)
    c = cfrac * math.sqrt(delta * s)
    sol = solve_lqclp_single(q, r, s, c, delta)
    assert sol.bound() <= dual_function(q, r, s, c, delta, lam, nu) + 1e-9 * max(1.0, abs(sol.bound()))


def test_duplicate_constraints_match_single():
    rng = np.random.default_rng(0)
    H = random_spd(rng, 4)
    g, b = rng.normal(size=4), rng.normal(size=4)
    B = np.stack([b, b], 1)
    hg, hB, q, r, S = products(g, B, H)
    c = -0.3 * math.sqrt(0.5 * S[0, 0])
    single = solve_lqclp_single(q, r[0], S[0, 0], c, 0.5)
    multi = solve_lqclp_multi(q, r, S, np.array([c, c]), 0.5)
    assert multi.bound() == pytest.approx(single.bound(), rel=1e-7)
    assert multi.nu.sum() == pytest.approx(single.nu[0], rel=1e-5, abs=1e-9)
    assert np.allclose(primal_step(multi, hg, hB), primal_step(single, hg, hB[:, :1]), atol=1e-6)


def test_vacuous_constraint_is_ignored():
    rng = np.random.default_rng(1)
    H = random_spd(rng, 4)
    g, B = rng.normal(size=4), rng.normal(size=(4, 2))
    hg, hB, q, r, S = products(g, B, H)
    c1 = 0.2 * math.sqrt(0.5 * S[0, 0])
    multi = solve_lqclp_multi(q, r, S, np.array([c1, -1e6]), 0.5)
    single = solve_lqclp_single(q, r[0], S[0, 0], c1, 0.5)
    assert multi.nu[1] == 0
    assert multi.bound() == pytest.approx(single.bound(), rel=1e-7)


@pytest.mark.parametrize("seed", range(30))
def test_two_constraints_match_conic_primal(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(3, 7))
    H = random_spd(rng, n)
    g, B = rng.normal(size=n), rng.normal(size=(n, 2))
    delta = float(rng.uniform(0.05, 1.0))
    hg, hB, q, r, S = products(g, B, H)
    c = rng.uniform(-1.0, 0.4, size=2) * np.sqrt(delta * np.diag(S))
    status, x_ref, val_ref = cvx_primal(g, B, c, H, delta)
    if status != "optimal":
        with pytest.raises(RecoveryRequired):
            solve_lqclp_multi(q, r, S, c, delta)
        return
    sol = solve_lqclp_multi(q, r, S, c, delta)
    x = primal_step(sol, hg, hB)
    assert sol.bound() == pytest.approx(val_ref, abs=1e-5 * max(1, abs(val_ref)))
    assert g @ x == pytest.approx(val_ref, abs=1e-5 * max(1, abs(val_ref)))
    assert np.all(B.T @ x + c <= 1e-6)
    assert np.all(np.abs(sol.nu * (B.T @ x + c)) < 1e-6)


def test_multi_detects_empty_feasible_set():
    S = np.eye(2)
    # x1 <= -1 and -x1 <= -1 cannot both hold
    S[0, 1] = S[1, 0] = -1.0
    with pytest.raises(RecoveryRequired):
        solve_lqclp_multi(1.0, np.zeros(2), S, np.array([1.0, 1.0]), 0.5)


def test_solve_trust_region_halves_the_kl_radius():
    # H = I, no active constraint: x = sqrt(2 delta_kl / q) g, so 0.5 x^T x = delta_kl
    g = np.array([3.0, 4.0])
    x, dual, _, _ = solve_trust_region(g, np.array([0.0, 1.0]), [-100.0], 0.01, lambda v: v)
    assert 0.5 * x @ x == pytest.approx(0.01)
    assert np.allclose(x / np.linalg.norm(x), g / 5)
    assert dual.nu[0] == 0


def line_eval(accept_from):
    calls = []

    def evaluate(step):
        j = len(calls)
        calls.append(step)
        return (1.0 if j >= accept_from else -1.0), 0.0, np.zeros(1)
    return evaluate, calls


def test_line_search_accepts_full_step():
    evaluate, calls = line_eval(0)
    theta, res = backtracking_line_search(np.zeros(2), np.ones(2), evaluate, 0.1)
    assert res.exponent == 0 and np.array_equal(theta, np.ones(2)) and len(calls) == 1


def test_line_search_backtracks_to_quarter():
    evaluate, calls = line_eval(2)
    theta, res = backtracking_line_search(np.zeros(2), np.ones(2), evaluate, 0.1)
    assert res.exponent == 2 and np.allclose(theta, 0.25)


def test_line_search_rejects_and_keeps_theta():
    evaluate, calls = line_eval(100)
    start = np.array([1.0, 2.0])
    theta, res = backtracking_line_search(start, np.ones(2), evaluate, 0.1, max_backtracks=5)
    assert not res.accepted and np.array_equal(theta, start) and len(calls) == 6


def test_line_search_checks_kl_and_constraint():
    def evaluate(step):
        size = np.abs(step).max()
        return 1.0, size, np.array([0.3 - size])
    theta, res = backtracking_line_search(np.zeros(1), np.ones(1), evaluate, delta=0.5)
    assert res.exponent == 2
    _, res = backtracking_line_search(np.zeros(1), np.ones(1), lambda s: (-1.0, 0.0, 0.0), 0.5,
                                      require_improvement=False)
    assert res.exponent == 0


def test_recovery_direction_lies_on_trust_region_boundary():
    rng = np.random.default_rng(0)
    H = random_spd(rng, 5)
    b = rng.normal(size=5)
    hb = np.linalg.solve(H, b)
    s = b @ hb
    x = recovery_direction(hb, s, 0.02)
    assert 0.5 * x @ H @ x == pytest.approx(0.02)
    assert b @ x < 0
    for alpha in (0.5, 0.25):
        assert 0.5 * (alpha * x) @ H @ (alpha * x) == pytest.approx(alpha ** 2 * 0.02)
    hid = np.ones(3)
    assert np.linalg.norm(recovery_direction(hid, 1.0, 0.02)) == pytest.approx(math.sqrt(2 * 0.02) * math.sqrt(3))


def test_recovery_step_needs_cost_decrease_and_kl():
    hb, s = np.array([1.0]), 1.0
    theta, res = recovery_step(np.zeros(1), hb, s, 0.5, lambda st: 1.0 if abs(st[0]) > 0.3 else -1.0)
    assert res.mode == "recover" and res.exponent == 2
    theta, res = recovery_step(np.zeros(1), hb, s, 0.5, lambda st: -1.0, evaluate_kl=lambda st: 1.0)
    assert not res.accepted and theta[0] == 0
    with pytest.raises(DegenerateDualError):
        recovery_direction(hb, 0.0, 0.5)
