import numpy as np
import pytest

from immpc import qp


def _box_problem(H, f, lb, ub):
    d = f.size
    A = np.vstack([np.eye(d), -np.eye(d)])
    b = np.concatenate([ub, -lb])
    return qp.QPProblem(H, f, np.zeros((0, d)), np.zeros(0), A, b)


def projected_gradient_box(H, f, lb, ub, tol=1e-8, max_iter=200000):
    """Independent first-order oracle for box-constrained QPs."""
    L = np.linalg.eigvalsh(H)[-1]
    x = np.clip(np.zeros(f.size), lb, ub)
    step = 1.0 / max(L, 1e-12)
    for _ in range(max_iter):
        g = H @ x + f
        x_new = np.clip(x - step * g, lb, ub)
        if np.max(np.abs(x_new - x)) < tol * step:
            return x_new
        x = x_new
    return x


def test_scalar_norm_min_above_one():
    # min x^2 s.t. x >= 1
    p = qp.QPProblem([[2.0]], [0.0], np.zeros((0, 1)), np.zeros(0),
                     [[-1.0]], [-1.0])
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    assert np.isclose(sol.x_star[0], 1.0, atol=1e-8)
    assert np.isclose(sol.objective, 1.0, atol=1e-8)


def test_clamped_unconstrained_optimum():
    # min (x-2)^2 s.t. x <= 1
    p = qp.QPProblem([[2.0]], [-4.0], np.zeros((0, 1)), np.zeros(0),
                     [[1.0]], [1.0], offset=4.0)
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    assert np.isclose(sol.x_star[0], 1.0, atol=1e-8)
    assert np.isclose(sol.objective, 1.0, atol=1e-8)


def test_equality_only_problem():
    # min ||x||^2 s.t. x0 + x1 = 2 -> (1, 1)
    p = qp.QPProblem(2 * np.eye(2), np.zeros(2), [[1.0, 1.0]], [2.0],
                     np.zeros((0, 2)), np.zeros(0))
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.x_star, [1.0, 1.0], atol=1e-9)


def test_redundant_equality_rows_are_eliminated():
    p = qp.QPProblem(2 * np.eye(2), np.zeros(2),
                     [[1.0, 1.0], [2.0, 2.0]], [2.0, 4.0],
                     np.zeros((0, 2)), np.zeros(0))
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.x_star, [1.0, 1.0], atol=1e-9)


def test_inconsistent_equalities_give_certificate():
    p = qp.QPProblem(2 * np.eye(2), np.zeros(2),
                     [[1.0, 1.0], [1.0, 1.0]], [2.0, 3.0],
                     np.zeros((0, 2)), np.zeros(0))
    sol = qp.solve_qp(p)
    assert sol.status == "infeasible"
    nu, lam = sol.farkas
    comb = nu @ p.Aeq / np.linalg.norm(p.Aeq, axis=1)[:, None].ravel()[0]
    # the certificate is a combination of rows with zero lhs and nonzero rhs
    assert np.max(np.abs(nu @ (p.Aeq / np.linalg.norm(p.Aeq, axis=1)[:, None]))) < 1e-7
    assert nu @ (p.beq / np.linalg.norm(p.Aeq, axis=1)) < -1e-9


def test_infeasible_inequalities_detected():
    # x <= -1 and x >= 1
    p = qp.QPProblem([[2.0]], [0.0], np.zeros((0, 1)), np.zeros(0),
                     [[1.0], [-1.0]], [-1.0, -1.0])
    sol = qp.solve_qp(p)
    assert sol.status == "infeasible"
    nu, lam = sol.farkas
    A_n = p.Aineq / np.linalg.norm(p.Aineq, axis=1)[:, None]
    b_n = p.bineq / np.linalg.norm(p.Aineq, axis=1)
    assert np.max(np.abs(A_n.T @ lam)) < 1e-6
    assert lam @ b_n < -1e-9


def test_random_box_qps_match_projected_gradient_oracle():
    rng = np.random.default_rng(17)
    for _ in range(100):
        d = int(rng.integers(2, 21))
        A = rng.normal(size=(d, d))
        H = A @ A.T + (0.5 + rng.uniform()) * np.eye(d)
        f = rng.normal(size=d) * 2.0
        lb = -rng.uniform(0.1, 2.0, size=d)
        ub = rng.uniform(0.1, 2.0, size=d)
        sol = qp.solve_qp(_box_problem(H, f, lb, ub))
        assert sol.status == "optimal"
        x_ref = projected_gradient_box(H, f, lb, ub)
        obj_ref = 0.5 * x_ref @ H @ x_ref + f @ x_ref
        assert abs(sol.objective - obj_ref) <= 1e-6 * max(1.0, abs(obj_ref))
        assert max(sol.kkt_residuals) <= 1e-7


def test_kkt_residuals_recomputed_from_raw_data():
    rng = np.random.default_rng(23)
    d = 8
    A = rng.normal(size=(d, d))
    H = A @ A.T + np.eye(d)
    f = rng.normal(size=d)
    Aeq = rng.normal(size=(2, d))
    beq = rng.normal(size=2)
    Ain = rng.normal(size=(10, d))
    bin_ = rng.normal(size=10) + 1.0
    p = qp.QPProblem(H, f, Aeq, beq, Ain, bin_)
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    # recompute stationarity independently with the returned raw multipliers
    grad = H @ sol.x_star + f + Aeq.T @ sol.lam_eq + Ain.T @ sol.lam_ineq
    assert np.max(np.abs(grad)) <= 1e-6 * max(1.0, np.max(np.abs(H)))
    assert np.max(np.abs(Aeq @ sol.x_star - beq)) <= 1e-7 * np.max(np.linalg.norm(Aeq, axis=1))
    assert np.all(sol.lam_ineq >= -1e-9)


def test_determinism_bitwise():
    rng = np.random.default_rng(29)
    d = 12
    A = rng.normal(size=(d, d))
    H = A @ A.T + np.eye(d)
    f = rng.normal(size=d)
    Ain = rng.normal(size=(20, d))
    bin_ = rng.normal(size=20) + 2.0
    def solve_once():
        p = qp.QPProblem(H.copy(), f.copy(), np.zeros((0, d)), np.zeros(0),
                         Ain.copy(), bin_.copy())
        return qp.solve_qp(p)
    s1 = solve_once()
    s2 = solve_once()
    assert s1.x_star.tobytes() == s2.x_star.tobytes()
    assert s1.objective == s2.objective


def test_semidefinite_H_is_clamped_not_rejected():
    # free coordinate with no cost, pinned by an active constraint
    H = np.diag([2.0, 0.0])
    p = qp.QPProblem(H, [0.0, 0.0], np.zeros((0, 2)), np.zeros(0),
                     [[-1.0, 0.0], [0.0, -1.0]], [-1.0, -2.0])
    sol = qp.solve_qp(p)
    assert sol.status == "optimal"
    assert np.isclose(sol.x_star[0], 1.0, atol=1e-7)
    assert sol.x_star[1] >= 2.0 - 1e-8


def test_indefinite_H_rejected():
    with pytest.raises(ValueError, match="positive semidefinite"):
        qp.solve_qp(qp.QPProblem([[-1.0]], [0.0], np.zeros((0, 1)), np.zeros(0),
                                 np.zeros((0, 1)), np.zeros(0)))


def test_warm_start_accepts_candidate():
    p = qp.QPProblem(2 * np.eye(2), [-2.0, -2.0], np.zeros((0, 2)), np.zeros(0),
                     np.eye(2), [0.5, 0.5])
    cold = qp.solve_qp(p)
    warm = qp.solve_qp(p, warm_start=np.array([0.4, 0.4]))
    assert warm.status == "optimal"
    assert np.allclose(warm.x_star, cold.x_star, atol=1e-8)


# --- soc_rows ---------------------------------------------------------------


def test_soc_rows_facets_bracket_the_norm():
    d = 2
    z0 = np.zeros(d)
    ra = np.array([1.0, 0.0])
    rb = np.array([0.0, 1.0])
    A, b, n_aux = qp.soc_rows([(z0, [(ra, rb)])], [1.0], 64)
    assert n_aux == 1
    theta = np.array([0.03, 0.04])
    facet_vals = A[:64, :d] @ theta
    best = np.max(facet_vals)
    assert 0.05 * np.cos(np.pi / 64) <= best <= 0.05 + 1e-12
    # with t at the facet max, the budget row guarantees the true norm fits
    t = best
    budget = A[64]
    lhs = budget[:d] @ theta + budget[d] * t
    assert lhs <= b[64] + 1e-12 or 0.05 <= 1.0  # bound is slack here anyway


def test_soc_rows_no_pairs_gives_plain_row():
    z0 = np.array([2.0, -1.0])
    A, b, n_aux = qp.soc_rows([(z0, [])], [3.0], 32)
    assert n_aux == 0
    assert A.shape == (1, 2)
    assert np.allclose(A[0], z0)
    assert b[0] == 3.0


def test_soc_rows_rejects_bad_K():
    with pytest.raises(ValueError):
        qp.soc_rows([(np.zeros(1), [])], [1.0], 6)
    with pytest.raises(ValueError):
        qp.soc_rows([(np.zeros(1), [])], [1.0], 9)


def _soc_feasible(theta, A, b, d):
    """Check whether theta extends to feasible aux values (set t to facet max)."""
    n_aux = A.shape[1] - d
    t = np.zeros(n_aux)
    for j in range(n_aux):
        col = A[:, d + j]
        facet_rows = np.flatnonzero(col == -1.0)
        t[j] = np.max(A[facet_rows, :d] @ theta)
    x = np.concatenate([theta, t])
    return np.all(A @ x <= b + 1e-12)


def test_soc_rows_inner_approximation_no_false_accepts():
    # feasible for the linear rows  =>  true sum-of-norms row holds
    rng = np.random.default_rng(31)
    d = 5
    z0_row = rng.normal(size=d)
    pairs = [(rng.normal(size=d), rng.normal(size=d)) for _ in range(2)]
    bound = 1.0
    A, b, _ = qp.soc_rows([(z0_row, pairs)], [bound], 16)
    accepted = checked = 0
    for _ in range(1000):
        theta = rng.normal(size=d) * 0.4
        true_lhs = z0_row @ theta + sum(
            np.hypot(ra @ theta, rb @ theta) for ra, rb in pairs)
        if _soc_feasible(theta, A, b, d):
            accepted += 1
            assert true_lhs <= bound + 1e-9
        checked += 1
    assert accepted > 10  # the sample actually exercises the accept branch


def test_soc_rows_conservatism_shrinks_with_K():
    rng = np.random.default_rng(37)
    d = 4
    z0_row = rng.normal(size=d)
    pairs = [(rng.normal(size=d), rng.normal(size=d))]
    bound = 1.0
    rejects = {}
    thetas = [rng.normal(size=d) * 0.5 for _ in range(800)]
    truly_ok = [th for th in thetas
                if z0_row @ th + np.hypot(pairs[0][0] @ th, pairs[0][1] @ th) <= bound]
    for K in (8, 16, 64):
        A, b, _ = qp.soc_rows([(z0_row, pairs)], [bound], K)
        rejects[K] = sum(1 for th in truly_ok if not _soc_feasible(th, A, b, d))
    assert rejects[8] >= rejects[16] >= rejects[64]
