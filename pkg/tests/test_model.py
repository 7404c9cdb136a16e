import numpy as np
import pytest

from fedlap.errors import NumericError, ShapeError
from fedlap.model import (Batch, ModelSpec, accuracy, diag_ggn, glm_hessian, init_params,
                          nll_and_grad, predict, predict_proba, soft_label)


def fd_grad(fn, w, eps=1e-4):
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = eps
        g[j] = (fn(w + e) - fn(w - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


SPECS = [
    ModelSpec("logistic-binary", 4),
    ModelSpec("logistic-binary", 3, bias=False),
    ModelSpec("softmax-linear", 4, class_count=3),
    ModelSpec("mlp", 3, class_count=2, hidden_sizes=(4,)),
    ModelSpec("mlp", 3, class_count=4, hidden_sizes=(5, 3)),
]


class TestModelSpec:
    def test_param_counts(self):
        assert ModelSpec("logistic-binary", 10).param_count == 11
        assert ModelSpec("logistic-binary", 10, bias=False).param_count == 10
        assert ModelSpec("softmax-linear", 5, class_count=3).param_count == 18
        # 784*200+200 + 200*100+100 + 100*10+10
        assert ModelSpec("mlp", 784, class_count=10).param_count == 178110

    def test_dict_round_trip(self):
        for spec in SPECS:
            assert ModelSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("kwargs", [
        dict(kind="cnn", input_dim=3),
        dict(kind="logistic-binary", input_dim=3, class_count=3),
        dict(kind="softmax-linear", input_dim=0),
        dict(kind="softmax-linear", input_dim=2, class_count=1),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelSpec(**kwargs)


class TestBatch:
    def test_soft_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((1, 2)), np.array([[0.5, 0.6]]))

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 2)), np.array([0, 1]), weights=np.array([1.0, -1.0]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            Batch(np.zeros((3, 2)), np.array([0, 1]))


class TestPredictProba:
    def test_zero_logistic_is_half(self):
        spec = ModelSpec("logistic-binary", 3)
        p = predict_proba(spec, np.zeros(4), np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(p, 0.5)

    def test_zero_softmax_is_uniform(self):
        spec = ModelSpec("softmax-linear", 2, class_count=3)
        p = predict_proba(spec, np.zeros(spec.param_count), np.ones((4, 2)))
        np.testing.assert_allclose(p, 1 / 3)

    def test_hand_evaluated_logistic(self):
        spec = ModelSpec("logistic-binary", 2, bias=False)
        p = predict_proba(spec, np.array([1.0, -1.0]), np.array([[2.0, 1.0]]))
        assert p[0, 1] == pytest.approx(0.731059, abs=1e-6)
        assert p[0, 0] == pytest.approx(1 - 0.731059, abs=1e-6)

    @pytest.mark.parametrize("spec", SPECS)
    def test_rows_normalized_for_huge_logits(self, spec):
        rng = np.random.default_rng(1)
        w = rng.normal(size=spec.param_count) * 1e4
        p = predict_proba(spec, w, rng.normal(size=(20, spec.input_dim)))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_errors(self):
        spec = ModelSpec("logistic-binary", 3)
        with pytest.raises(ShapeError):
            predict_proba(spec, np.zeros(3), np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            predict_proba(spec, np.zeros(4), np.zeros((1, 2)))

    def test_argmax_ties_go_low(self):
        spec = ModelSpec("softmax-linear", 2, class_count=3)
        assert predict(spec, np.zeros(spec.param_count), np.ones((2, 2))).tolist() == [0, 0]

    def test_soft_label_of_zero_model_is_uniform(self):
        spec = ModelSpec("softmax-linear", 2, class_count=4)
        np.testing.assert_allclose(soft_label(spec, np.zeros(spec.param_count), np.ones((3, 2))), 0.25)


class TestNllAndGrad:
    def test_hand_value(self):
        spec = ModelSpec("logistic-binary", 1, bias=False)
        loss, grad = nll_and_grad(spec, np.zeros(1), Batch(np.array([[1.0]]), np.array([1])))
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        np.testing.assert_allclose(grad, [-0.5])

    def test_loss_is_a_sum(self):
        spec = ModelSpec("logistic-binary", 1, bias=False)
        loss, _ = nll_and_grad(spec, np.zeros(1), Batch(np.ones((3, 1)), np.array([1, 0, 1])))
        assert loss == pytest.approx(3 * np.log(2))

    def test_own_soft_label_has_zero_gradient(self):
        spec = ModelSpec("softmax-linear", 3, class_count=3)
        rng = np.random.default_rng(2)
        w = rng.normal(size=spec.param_count)
        X = rng.normal(size=(6, 3))
        _, g = nll_and_grad(spec, w, Batch(X, soft_label(spec, w, X)))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_self_cross_entropy_is_entropy(self):
        spec = ModelSpec("softmax-linear", 2, class_count=3)
        rng = np.random.default_rng(3)
        w = rng.normal(size=spec.param_count)
        X = rng.normal(size=(4, 2))
        p = soft_label(spec, w, X)
        loss, _ = nll_and_grad(spec, w, Batch(X, p))
        assert loss == pytest.approx(-(p * np.log(p)).sum(), rel=1e-12)

    @pytest.mark.parametrize("spec", SPECS)
    @pytest.mark.parametrize("soft", [False, True])
    def test_matches_finite_differences(self, spec, soft):
        rng = np.random.default_rng(4)
        for _ in range(20):
            # moderate weights keep every probability clear of the log clamp
            w = 0.5 * rng.normal(size=spec.param_count)
            X = rng.normal(size=(5, spec.input_dim))
            if soft:
                T = rng.dirichlet(np.ones(spec.class_count), size=5)
            else:
                T = rng.integers(0, spec.class_count, size=5)
            batch = Batch(X, T, weights=rng.uniform(0.5, 2.0, size=5))
            _, g = nll_and_grad(spec, w, batch)
            num = fd_grad(lambda u: nll_and_grad(spec, u, batch)[0], w)
            assert rel_err(g, num) <= 1e-5

    def test_nonfinite_input_names_example(self):
        spec = ModelSpec("logistic-binary", 2)
        X = np.zeros((3, 2))
        X[2, 0] = np.nan
        with pytest.raises(NumericError, match="index 2"):
            nll_and_grad(spec, np.zeros(3), Batch(X, np.array([0, 1, 0])))

    def test_empty_batch_rejected(self):
        spec = ModelSpec("logistic-binary", 2)
        with pytest.raises(ShapeError):
            nll_and_grad(spec, np.zeros(3), Batch(np.zeros((0, 2)), np.zeros(0, dtype=int)))

    def test_logistic_loss_midpoint_convex(self):
        spec = ModelSpec("logistic-binary", 3)
        rng = np.random.default_rng(5)
        batch = Batch(rng.normal(size=(30, 3)), rng.integers(0, 2, size=30))
        f = lambda u: nll_and_grad(spec, u, batch)[0]
        for _ in range(200):
            a, b = rng.normal(size=(2, 4)) * 3
            assert f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-10


class TestDiagGGN:
    def test_logistic_at_zero(self):
        spec = ModelSpec("logistic-binary", 2, bias=False)
        np.testing.assert_allclose(diag_ggn(spec, np.zeros(2), np.array([[1.0, 0.0]])), [0.25, 0.0])

    def test_empty_is_zero(self):
        spec = ModelSpec("mlp", 3, hidden_sizes=(4,))
        w = init_params(spec, np.random.default_rng(0))
        np.testing.assert_array_equal(diag_ggn(spec, w, np.zeros((0, 3))), 0.0)

    @pytest.mark.parametrize("spec", SPECS)
    def test_duplicate_point_doubles(self, spec):
        rng = np.random.default_rng(6)
        w = rng.normal(size=spec.param_count)
        x = rng.normal(size=(1, spec.input_dim))
        np.testing.assert_allclose(diag_ggn(spec, w, np.vstack([x, x])), 2 * diag_ggn(spec, w, x),
                                   rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("spec", SPECS)
    def test_nonnegative_and_additive(self, spec):
        rng = np.random.default_rng(7)
        w = rng.normal(size=spec.param_count) * 2
        X1 = rng.normal(size=(7, spec.input_dim))
        X2 = rng.normal(size=(4, spec.input_dim))
        d1, d2 = diag_ggn(spec, w, X1), diag_ggn(spec, w, X2)
        both = diag_ggn(spec, w, np.vstack([X1, X2]))
        assert np.all(both >= 0)
        np.testing.assert_allclose(both, d1 + d2, rtol=0, atol=1e-12 * max(1.0, both.max()))

    def test_chunking_does_not_change_result(self):
        spec = ModelSpec("mlp", 3, class_count=3, hidden_sizes=(4,))
        rng = np.random.default_rng(8)
        w = rng.normal(size=spec.param_count)
        X = rng.normal(size=(11, 3))
        np.testing.assert_allclose(diag_ggn(spec, w, X, chunk=3), diag_ggn(spec, w, X), rtol=1e-12)

    @pytest.mark.parametrize("spec", SPECS[:3])
    def test_glm_matches_hessian_diagonal(self, spec):
        rng = np.random.default_rng(9)
        w = rng.normal(size=spec.param_count)
        X = rng.normal(size=(9, spec.input_dim))
        np.testing.assert_allclose(diag_ggn(spec, w, X), np.diag(glm_hessian(spec, w, X)), rtol=1e-12)

    @pytest.mark.parametrize("spec", SPECS[:3])
    def test_glm_hessian_matches_finite_differences(self, spec):
        rng = np.random.default_rng(10)
        w = rng.normal(size=spec.param_count)
        batch = Batch(rng.normal(size=(8, spec.input_dim)), rng.integers(0, spec.class_count, size=8))
        H = glm_hessian(spec, w, batch.inputs)
        num = np.stack([fd_grad(lambda u: nll_and_grad(spec, u, batch)[1][j], w)
                        for j in range(spec.param_count)])
        assert rel_err(H, num) <= 1e-6

    def test_mlp_matches_explicit_jacobian_ggn(self):
        # diag of sum_i J_i^T (diag(p) - p p^T) J_i with J from finite differences of the logits
        from fedlap.model import _forward
        spec = ModelSpec("mlp", 2, class_count=3, hidden_sizes=(3,))
        rng = np.random.default_rng(11)
        w = rng.normal(size=spec.param_count)
        X = rng.normal(size=(4, 2))
        expected = np.zeros(spec.param_count)
        for x in X:
            logit = lambda u: _forward(spec, u, x[None, :])[0][0]
            J = np.stack([fd_grad(lambda u: logit(u)[c], w, 1e-6) for c in range(3)])
            p = predict_proba(spec, w, x[None, :])[0]
            lam = np.diag(p) - np.outer(p, p)
            expected += np.diag(J.T @ lam @ J)
        np.testing.assert_allclose(diag_ggn(spec, w, X), expected, rtol=1e-6, atol=1e-9)


class TestInitAndAccuracy:
    def test_glm_init_is_zero(self):
        assert not init_params(ModelSpec("softmax-linear", 3, class_count=3)).any()

    def test_mlp_init_bounds(self):
        spec = ModelSpec("mlp", 16, hidden_sizes=(8,))
        w = init_params(spec, np.random.default_rng(0))
        assert w.shape == (spec.param_count,)
        assert np.max(np.abs(w[:16 * 8])) <= 0.25
        np.testing.assert_array_equal(w[16 * 8:16 * 8 + 8], 0.0)

    def test_accuracy(self):
        spec = ModelSpec("logistic-binary", 1, bias=False)
        X = np.array([[1.0], [-1.0], [2.0]])
        assert accuracy(spec, np.array([1.0]), X, np.array([1, 0, 0])) == pytest.approx(2 / 3)
