import itertools

import numpy as np
import pytest
from helpers import brute_proto_logits, learner_gradcheck

from fewshot_intent.errors import ConditioningError, InputError, NumericalError
from fewshot_intent.learners import (
    KINDS,
    LearnerConfig,
    learner_backward,
    learner_forward,
    onehot,
    project_simplex,
    proto_forward,
    ridge_forward,
    ridge_primal,
    svm_dual_objective,
    svm_forward,
    svm_project,
    svm_solve,
)


def random_task(seed, n=3, m=2, d=5, nq=4):
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n), m)
    return gen.standard_normal((n * m, d)), labels, gen.standard_normal((nq, d))


class TestProto:
    def test_one_shot_zero_distance(self):
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        out = proto_forward(X, [0, 1], X[1:2], LearnerConfig())
        np.testing.assert_array_equal(out.state.prototypes, X)
        assert out.logits[0, 1] == 0.0
        assert np.argmax(out.logits[0]) == 1

    def test_hand_example(self):
        X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
        out = proto_forward(X, [0, 0, 1, 1], np.array([[1.0, 1.0]]), LearnerConfig())
        np.testing.assert_allclose(out.state.prototypes, [[1, 0], [0, 3]])
        np.testing.assert_allclose(out.logits, [[-1.0, -5.0]])

    def test_brute_force(self):
        for seed in range(20):
            X, y, Q = random_task(seed, n=4, m=3, d=6)
            cfg = LearnerConfig(temperature=1.7)
            np.testing.assert_allclose(proto_forward(X, y, Q, cfg).logits, brute_proto_logits(X, y, Q, 4, 1.7), atol=1e-5)

    def test_empty_class(self):
        with pytest.raises(InputError, match="class 1"):
            proto_forward(np.zeros((2, 2)), [0, 0], np.zeros((1, 2)), LearnerConfig(), n_way=2)

    def test_translation_invariance(self):
        X, y, Q = random_task(3)
        shift = np.random.default_rng(0).standard_normal(X.shape[1]) * 10
        a = proto_forward(X, y, Q, LearnerConfig()).logits
        b = proto_forward(X + shift, y, Q + shift, LearnerConfig()).logits
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_analytic_query_derivative(self):
        X = np.array([[0.0, 1.0], [2.0, -1.0]])
        q = np.array([[0.5, 0.5]])
        out = proto_forward(X, [0, 1], q, LearnerConfig())
        G = np.array([[1.0, 0.0]])
        _, dQ, _ = learner_backward("proto", out.state, G)
        np.testing.assert_allclose(dQ[0], -2 * (q[0] - X[0]))


class TestRidge:
    def test_huge_lambda_ties(self):
        X, y, Q = random_task(0)
        out = ridge_forward(X, onehot(y, 3), Q, LearnerConfig(kind="ridge", ridge_lambda=1e12))
        assert np.abs(out.logits).max() < 1e-9

    def test_interpolation_at_zero_lambda(self):
        X, y, _ = random_task(1, n=3, m=2, d=10)
        Y = onehot(y, 3)
        out = ridge_forward(X, Y, X, LearnerConfig(kind="ridge", ridge_lambda=0.0))
        np.testing.assert_allclose(out.logits, Y, atol=1e-4)

    def test_dual_equals_primal(self):
        for seed in range(20):
            X, y, Q = random_task(seed, n=5, m=2, d=12)
            out = ridge_forward(X, onehot(y, 5), Q, LearnerConfig(kind="ridge", ridge_lambda=1.0))
            np.testing.assert_allclose(out.state.weights, ridge_primal(X, onehot(y, 5), 1.0), atol=1e-5)

    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_singular_system(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(ConditioningError):
            ridge_forward(X, np.eye(2), X, LearnerConfig(kind="ridge", ridge_lambda=0.0))


class TestSimplexProjection:
    def test_feasible_and_optimal(self):
        gen = np.random.default_rng(0)
        U = gen.standard_normal((50, 4))
        B, mask = project_simplex(U, 0.7)
        assert np.all(B >= 0)
        np.testing.assert_allclose(B.sum(axis=1), 0.7)
        assert np.array_equal(mask, B > 0)
        # optimality: no random feasible point is closer
        for u, b in zip(U, B):
            pts = gen.dirichlet(np.ones(4), size=200) * 0.7
            assert np.linalg.norm(u - b) <= np.linalg.norm(pts - u, axis=1).min() + 1e-12

    def test_ties_are_deterministic(self):
        B, _ = project_simplex(np.array([[0.5, 0.5, 0.5]]), 1.0)
        np.testing.assert_allclose(B, [[1 / 3] * 3])

    def test_svm_feasible_set(self):
        gen = np.random.default_rng(1)
        Y = onehot(gen.integers(0, 3, 20), 3)
        A, _ = svm_project(gen.standard_normal((20, 3)), Y, 0.1)
        np.testing.assert_allclose(A.sum(axis=1), 0, atol=1e-12)
        assert np.all(A <= 0.1 * Y + 1e-12)


def grid_max_2way(K, Y, C, steps=21):
    """Exhaustive grid over the 2-way dual: alpha_i = s_i (e_{y_i} - e_other), s_i in [0, C]."""
    base = Y - (1 - Y)
    grid = np.linspace(0, C, steps)
    S = np.array(list(itertools.product(grid, repeat=len(Y))))
    A = S[:, :, None] * base[None]
    quad = np.einsum("gik,ij,gjk->g", A, K, A)
    return float(np.max(-0.5 * quad + np.einsum("gik,ik->g", A, Y)))


def qp_max(K, Y, C):
    cp = pytest.importorskip("cvxpy")
    N, n = Y.shape
    A = cp.Variable((N, n))
    L = np.linalg.cholesky(K + 1e-12 * np.eye(N))
    obj = cp.Maximize(-0.5 * cp.sum_squares(L.T @ A) + cp.sum(cp.multiply(A, Y)))
    cp.Problem(obj, [A <= C * Y, cp.sum(A, axis=1) == 0]).solve()
    return svm_dual_objective(A.value, K, Y)


class TestSvm:
    def test_default_config(self):
        cfg = LearnerConfig(kind="svm")
        assert (cfg.svm_C, cfg.svm_max_iter) == (0.1, 15)

    def test_separable_margin(self):
        X = np.array([[10.0, 0.0], [10.0, 0.5], [-10.0, 0.0], [-10.0, -0.5]])
        out = svm_forward(X, [0, 0, 1, 1], np.array([[5.0, 0.0]]), LearnerConfig(kind="svm"))
        assert np.argmax(out.logits[0]) == 0

    def test_objective_monotone(self):
        for seed in range(30):
            X, y, _ = random_task(seed, n=5, m=5, d=10)
            K, Y = X @ X.T, onehot(y, 5)
            alphas, _, _, _ = svm_solve(K, Y, 0.1, 50)
            vals = [svm_dual_objective(a, K, Y) for a in alphas]
            assert np.all(np.diff(vals) >= -1e-12)

    def test_converged_matches_grid_and_qp(self):
        for seed in range(10):
            X, y, _ = random_task(seed, n=2, m=2, d=3)
            K, Y = X @ X.T, onehot(y, 2)
            alphas, _, _, _ = svm_solve(K, Y, 0.1, 500)
            pg = svm_dual_objective(alphas[-1], K, Y)
            assert pg >= grid_max_2way(K, Y, 0.1) - 1e-3
            assert abs(pg - qp_max(K, Y, 0.1)) < 1e-3

    def test_fifteen_iterations_agree_with_converged(self):
        gen = np.random.default_rng(0)
        agree = total = 0
        for _ in range(1000):
            centre = gen.standard_normal(3)
            centre *= 2.0 / np.linalg.norm(centre)
            X = np.vstack([centre + 0.3 * gen.standard_normal((2, 3)), -centre + 0.3 * gen.standard_normal((2, 3))])
            Q = np.vstack([centre, -centre]) + 0.3 * gen.standard_normal((2, 3))
            alphas, _, _, _ = svm_solve(X @ X.T, onehot([0, 0, 1, 1], 2), 0.1, 500)
            a = (Q @ X.T @ alphas[15]).argmax(axis=1)
            b = (Q @ X.T @ alphas[500]).argmax(axis=1)
            agree += int(np.sum(a == b))
            total += len(a)
        assert agree / total >= 0.95

    @pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
    def test_non_finite(self):
        X = np.array([[np.inf, 0.0], [0.0, 1.0]])
        with pytest.raises(NumericalError, match="iteration 0"):
            svm_forward(X, [0, 1], np.zeros((1, 2)), LearnerConfig(kind="svm"))

    def test_needs_two_classes(self):
        with pytest.raises(InputError):
            svm_forward(np.ones((2, 2)), [0, 0], np.ones((1, 2)), LearnerConfig(kind="svm"), n_way=1)


@pytest.mark.parametrize("kind", KINDS)
class TestAllLearners:
    def test_zero_grad(self, kind):
        X, y, Q = random_task(0)
        out = learner_forward(LearnerConfig(kind=kind, ridge_lambda=1.0), X, y, Q, 3)
        dX, dQ, dT = learner_backward(kind, out.state, np.zeros_like(out.logits))
        assert not dX.any() and not dQ.any() and dT == 0

    def test_state_kind_mismatch(self, kind):
        X, y, Q = random_task(0)
        other = "proto" if kind != "proto" else "ridge"
        out = learner_forward(LearnerConfig(kind=other, ridge_lambda=1.0), X, y, Q, 3)
        with pytest.raises(InputError):
            learner_backward(kind, out.state, out.logits)

    def test_support_permutation(self, kind):
        X, y, Q = random_task(1, n=3, m=3)
        perm = np.random.default_rng(0).permutation(len(y))
        cfg = LearnerConfig(kind=kind, ridge_lambda=1.0)
        a = learner_forward(cfg, X, y, Q, 3).logits
        b = learner_forward(cfg, X[perm], y[perm], Q, 3).logits
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_class_permutation(self, kind):
        X, y, Q = random_task(2, n=4, m=2)
        relabel = np.array([2, 0, 3, 1])
        cfg = LearnerConfig(kind=kind, ridge_lambda=1.0)
        a = learner_forward(cfg, X, y, Q, 4).logits
        b = learner_forward(cfg, X, relabel[y], Q, 4).logits
        np.testing.assert_allclose(b[:, relabel], a, atol=1e-6)

    def test_temperature_scales_logits(self, kind):
        X, y, Q = random_task(3)
        a = learner_forward(LearnerConfig(kind=kind, ridge_lambda=1.0), X, y, Q, 3).logits
        b = learner_forward(LearnerConfig(kind=kind, ridge_lambda=1.0, temperature=2.5), X, y, Q, 3).logits
        np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12)

    def test_finite_differences(self, kind):
        checked = 0
        for seed, (n, m, d) in enumerate(itertools.product((2, 3), (1, 2), (4,))):
            err, smooth = learner_gradcheck(kind, n, m, d, seed)
            if smooth:
                assert err < 1e-3, (n, m, d, err)
                checked += 1
        assert checked >= 3
