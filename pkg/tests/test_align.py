import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import explicit_projection_product, min_inf_by_vertices
from spfq import align as align_mod
from spfq.align import (RankDeficientError, SimplexError, align_closed_form, align_first_pass, align_order_r,
                        solve_min_inf)
from spfq.analysis import adversarial_instance
from spfq.linalg import ProjectionProduct, projection_product_norm


def perturbed(rng, m, N, scale=0.3):
    X = rng.standard_normal((m, N))
    return X, X + scale * rng.standard_normal((m, N))


class TestFirstPass:
    def test_identical_data_keeps_weights(self, rng):
        X = rng.standard_normal((6, 20))
        w = rng.standard_normal(20)
        res = align_first_pass(X, X, w)
        np.testing.assert_allclose(res.w_tilde, w, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(res.residual, 0.0, atol=1e-10)

    def test_single_column(self, rng):
        X, Xt = perturbed(rng, 5, 1)
        w = np.array([1.7])
        res = align_first_pass(X, Xt, w)
        x, xt = X[:, 0], Xt[:, 0]
        assert res.w_tilde[0] == pytest.approx(1.7 * (xt @ x) / (xt @ xt), rel=1e-13)
        np.testing.assert_allclose(res.residual, 1.7 * (x - (xt @ x) / (xt @ xt) * xt), atol=1e-12)

    def test_matches_closed_form(self, rng):
        for _ in range(10):
            X, Xt = perturbed(rng, 8, 32)
            w = rng.standard_normal(32)
            res = align_first_pass(X, Xt, w)
            cf = align_closed_form(X, Xt, w)
            assert np.linalg.norm(res.residual - cf) <= 1e-9 * np.linalg.norm(cf)

    def test_residual_recomputable(self, rng):
        X, Xt = perturbed(rng, 8, 32)
        w = rng.standard_normal(32)
        res = align_first_pass(X, Xt, w)
        tol = 1e-9 * np.linalg.norm(X) * np.linalg.norm(w)
        assert np.linalg.norm(res.residual - (X @ w - Xt @ res.w_tilde)) <= tol

    def test_zero_column_is_skipped_and_counted(self, rng):
        X, Xt = perturbed(rng, 6, 12)
        Xt[:, 4] = 0.0
        w = rng.standard_normal(12)
        res = align_first_pass(X, Xt, w)
        assert res.zero_columns == 1
        assert res.w_tilde[4] == w[4]
        np.testing.assert_allclose(res.residual, X @ w - Xt @ res.w_tilde, atol=1e-10)
        np.testing.assert_allclose(res.residual, align_closed_form(X, Xt, w), atol=1e-10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            align_first_pass(np.ones((3, 4)), np.ones((3, 5)), np.ones(4))
        with pytest.raises(ValueError):
            align_first_pass(np.ones((3, 4)), np.ones((3, 4)), np.ones(5))


class TestOrderR:
    def test_order_one_is_first_pass(self, rng):
        X, Xt = perturbed(rng, 8, 32)
        w = rng.standard_normal(32)
        a, b = align_order_r(X, Xt, w, 1), align_first_pass(X, Xt, w)
        np.testing.assert_array_equal(a.w_tilde, b.w_tilde)
        np.testing.assert_array_equal(a.residual, b.residual)

    @pytest.mark.parametrize("r", [2, 3])
    def test_residual_is_projection_power(self, rng, r):
        X, Xt = perturbed(rng, 8, 32)
        w = rng.standard_normal(32)
        base = align_first_pass(X, Xt, w).residual
        P = explicit_projection_product(Xt)
        expected = np.linalg.matrix_power(P, r - 1) @ base
        got = align_order_r(X, Xt, w, r).residual
        assert np.linalg.norm(got - expected) <= 1e-8 * np.linalg.norm(base)

    def test_residual_nonincreasing_and_bounded(self, rng):
        for _ in range(5):
            X, Xt = perturbed(rng, 8, 24)
            w = rng.standard_normal(24)
            norms = [np.linalg.norm(align_order_r(X, Xt, w, r).residual) for r in range(1, 6)]
            assert all(b <= a + 1e-10 for a, b in zip(norms, norms[1:]))
            pn = projection_product_norm(ProjectionProduct(Xt))
            for r, n in enumerate(norms, start=1):
                assert n <= pn ** (r - 1) * norms[0] + 1e-8

    def test_residual_recomputable(self, rng):
        X, Xt = perturbed(rng, 6, 20)
        w = rng.standard_normal(20)
        res = align_order_r(X, Xt, w, 4)
        np.testing.assert_allclose(res.residual, X @ w - Xt @ res.w_tilde, atol=1e-9)
        assert res.order_used == 4

    def test_bad_order(self, rng):
        with pytest.raises(ValueError):
            align_order_r(np.ones((2, 3)), np.ones((2, 3)), np.ones(3), 0)


class TestClosedForm:
    def test_identical_data(self, rng):
        X = rng.standard_normal((5, 9))
        np.testing.assert_allclose(align_closed_form(X, X, rng.standard_normal(9)), 0.0, atol=1e-12)

    def test_single_column(self, rng):
        X, Xt = perturbed(rng, 4, 1)
        x, xt = X[:, 0], Xt[:, 0]
        np.testing.assert_allclose(align_closed_form(X, Xt, [2.0]), 2.0 * (x - (xt @ x) / (xt @ xt) * xt),
                                   atol=1e-13)

    def test_explicit_sum(self, rng):
        X, Xt = perturbed(rng, 5, 7)
        w = rng.standard_normal(7)
        total = np.zeros(5)
        for j in range(7):
            total += w[j] * explicit_projection_product(Xt[:, j:]) @ X[:, j]
        np.testing.assert_allclose(align_closed_form(X, Xt, w), total, atol=1e-12)


class TestSolveMinInf:
    def test_symmetric_split(self):
        sol = solve_min_inf(np.array([[1.0, 1.0]]), np.array([1.0]))
        assert sol.objective == pytest.approx(0.5, abs=1e-12)
        np.testing.assert_allclose(sol.w_tilde, [0.5, 0.5], atol=1e-12)

    def test_square_system(self, rng):
        A = rng.standard_normal((5, 5))
        b = rng.standard_normal(5)
        sol = solve_min_inf(A, b)
        z = np.linalg.solve(A, b)
        np.testing.assert_allclose(sol.w_tilde, z, atol=1e-9)
        assert sol.objective == pytest.approx(np.abs(z).max(), abs=1e-9)

    def test_matches_vertex_enumeration(self, rng):
        for _ in range(5):
            A = rng.standard_normal((3, 7))
            b = rng.standard_normal(3)
            sol = solve_min_inf(A, b)
            assert sol.objective == pytest.approx(min_inf_by_vertices(A, b), abs=1e-8)
            assert sol.objective == np.max(np.abs(sol.w_tilde))

    def test_matches_reference_lp(self, rng):
        m, N = 10, 40
        A = rng.standard_normal((m, N))
        b = rng.standard_normal(m)
        c = np.r_[np.zeros(N), 1.0]
        A_ub = np.block([[np.eye(N), -np.ones((N, 1))], [-np.eye(N), -np.ones((N, 1))]])
        ref = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * N), A_eq=np.c_[A, np.zeros(m)], b_eq=b,
                      bounds=[(None, None)] * N + [(0, None)], method="highs")
        assert solve_min_inf(A, b).objective == pytest.approx(ref.fun, abs=1e-8)

    def test_feasible_and_locally_optimal(self, rng):
        m, N = 6, 20
        A = rng.standard_normal((m, N))
        b = rng.standard_normal(m)
        sol = solve_min_inf(A, b)
        assert sol.feasibility_residual <= 1e-8 * np.linalg.norm(b) + 1e-12
        assert np.linalg.norm(A @ sol.w_tilde - b) <= 1e-8 * np.linalg.norm(b) + 1e-12
        _, _, Vt = np.linalg.svd(A)
        null = Vt[m:].T
        for _ in range(500):
            d = null @ rng.standard_normal(N - m)
            d /= np.linalg.norm(d)
            for step in (1e-4, 1e-2):
                assert np.max(np.abs(sol.w_tilde + step * d)) >= sol.objective - 1e-7

    def test_zero_rhs(self, rng):
        sol = solve_min_inf(rng.standard_normal((3, 6)), np.zeros(3))
        assert sol.objective == 0.0

    def test_rank_deficient(self):
        A = np.ones((2, 5))
        with pytest.raises(RankDeficientError, match="alignment infeasible / rank-deficient"):
            solve_min_inf(A, np.ones(2))

    def test_rhs_shape(self):
        with pytest.raises(ValueError):
            solve_min_inf(np.eye(2), np.ones(3))

    def test_iteration_cap(self):
        T = np.array([[1.0, 1.0, 1.0], [-1.0, 0.0, 0.0]])
        with pytest.raises(SimplexError):
            align_mod._simplex(T, [1], 2, 0)

    def test_unbounded_detected(self):
        T = np.array([[-1.0, 1.0, 1.0], [-1.0, 0.0, 0.0]])
        with pytest.raises(SimplexError, match="unbounded"):
            align_mod._simplex(T, [1], 2, 10)

    @pytest.mark.parametrize("gamma", [0.5, 0.25, 0.1])
    def test_adversarial_objectives(self, gamma):
        inst = adversarial_instance(8, 64, gamma, 0.3, seed=3)
        b = inst.X @ inst.w
        a = solve_min_inf(inst.X, b).objective
        t = solve_min_inf(inst.Xt, b).objective
        assert a == pytest.approx(1 / 8, abs=1e-9)
        assert t == pytest.approx(1 / (gamma * 8), rel=1e-6)
        assert t / a == pytest.approx(1 / gamma, rel=1e-6)
