import math

import numpy as np
import pytest

from cctl.numerics import (AdamState, GradientBundle, Layer, MlpParams, NonFiniteError, ShapeError, StaleTapeError,
                           adam_step, bce, bce_grad, bce_loss, component_rng, grad_check, mlp_backward, mlp_forward,
                           sigmoid)


def naive_forward(params, x):
    """Reference forward pass written with explicit loops."""
    h = list(x)
    for layer in params.layers:
        out = []
        for r in range(layer.weight.shape[0]):
            z = layer.bias[r] + sum(layer.weight[r, c] * h[c] for c in range(len(h)))
            if layer.activation == "relu":
                z = max(z, 0.0)
            elif layer.activation == "sigmoid":
                z = 1.0 / (1.0 + math.exp(-z))
            out.append(z)
        h = out
    return np.array(h)


def central_diff(f, arr, step=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        up = f()
        arr[idx] = orig - step
        down = f()
        arr[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


@pytest.fixture
def net(rng):
    return MlpParams.init(5, [6, 4, 1], rng)


class TestComponentRng:
    def test_reproducible(self):
        a = component_rng(3, "tower/mlp").random(5)
        b = component_rng(3, "tower/mlp").random(5)
        assert np.array_equal(a, b)

    def test_names_and_seeds_differ(self):
        base = component_rng(3, "tower/mlp").random(5)
        assert not np.array_equal(base, component_rng(3, "selector").random(5))
        assert not np.array_equal(base, component_rng(4, "tower/mlp").random(5))


class TestSigmoid:
    def test_matches_textbook_form(self):
        z = np.linspace(-30, 30, 121)
        assert np.allclose(sigmoid(z), 1.0 / (1.0 + np.exp(-z)), rtol=1e-14, atol=0)

    def test_extremes_stay_finite(self):
        out = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0


class TestForward:
    def test_matches_loop_oracle(self, net, rng):
        for _ in range(5):
            x = rng.normal(size=5)
            out, _ = mlp_forward(net, x)
            assert out.shape == (1,)
            assert np.allclose(out, naive_forward(net, x), rtol=1e-12, atol=1e-15)

    def test_batch_rows_equal_single_rows(self, net, rng):
        X = rng.normal(size=(7, 5))
        batch, _ = mlp_forward(net, X)
        for i in range(7):
            single, _ = mlp_forward(net, X[i])
            assert np.allclose(batch[i], single, rtol=1e-13, atol=0)

    def test_width_mismatch(self, net):
        with pytest.raises(ShapeError):
            mlp_forward(net, np.zeros(4))

    def test_inconsistent_layers_rejected(self):
        with pytest.raises(ShapeError):
            MlpParams([Layer(np.zeros((3, 2)), np.zeros(3), "relu"), Layer(np.zeros((1, 4)), np.zeros(1), "sigmoid")])

    def test_zero_head_gives_half(self, rng):
        sel = MlpParams.init(5, [4, 1], rng, zero_head=True)
        out, _ = mlp_forward(sel, rng.normal(size=(9, 5)))
        assert np.all(out == 0.5)


class TestBackward:
    def test_param_and_input_grads_match_differences(self, net, rng):
        X = rng.normal(size=(4, 5))
        coef = rng.normal(size=(4, 1))

        def f():
            return float(np.sum(coef * mlp_forward(net, X)[0]))

        _, tape = mlp_forward(net, X)
        grads, gin = mlp_backward(net, tape, coef)
        for name, p in net.parameters().items():
            assert np.allclose(grads[name], central_diff(f, p), rtol=1e-5, atol=1e-8), name
        assert np.allclose(gin, central_diff(f, X), rtol=1e-5, atol=1e-8)

    def test_stale_tape_rejected(self, net, rng):
        _, tape = mlp_forward(net, rng.normal(size=(2, 5)))
        g = GradientBundle()
        g.add_all(mlp_backward(net, tape, np.ones((2, 1)))[0])
        adam_step(AdamState(), net, g)
        with pytest.raises(StaleTapeError):
            mlp_backward(net, tape, np.ones((2, 1)))

    def test_tape_from_other_params_rejected(self, net, rng):
        other = net.copy()
        _, tape = mlp_forward(net, rng.normal(size=5))
        with pytest.raises(StaleTapeError):
            mlp_backward(other, tape, np.ones(1))


class TestBce:
    def test_uniform_prediction_is_ln2(self):
        assert abs(bce_loss(0.5, 1) - math.log(2)) < 1e-15
        assert abs(bce_loss(0.5, 0) - math.log(2)) < 1e-15

    def test_clamped_at_certainty(self):
        assert np.isfinite(bce(0.0, 1)) and np.isfinite(bce(1.0, 0))
        assert bce(1.0, 1) == pytest.approx(-math.log(1 - 1e-7))

    def test_weights(self):
        assert bce_loss(0.3, 1, 0.0) == 0.0
        assert bce_loss(0.3, 1, 2.0) == pytest.approx(2 * bce_loss(0.3, 1))
        with pytest.raises(ValueError):
            bce_loss(0.3, 1, -0.1)

    def test_grad_matches_derivative_and_vanishes_under_clamp(self):
        p = np.array([0.2, 0.7, 0.999])
        y = np.array([1.0, 0.0, 1.0])
        h = 1e-7
        num = (bce(p + h, y) - bce(p - h, y)) / (2 * h)
        assert np.allclose(bce_grad(p, y), num, rtol=1e-6)
        assert np.all(bce_grad(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == 0.0)


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    p = p.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_dense_matches_reference(self, rng):
        p0 = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(6)]
        params = {"w": p0.copy()}
        state = AdamState(lr=0.01)
        for g in grads:
            b = GradientBundle()
            b.add("w", g)
            adam_step(state, params, b)
        assert np.allclose(params["w"], reference_adam(p0, grads, lr=0.01), rtol=1e-13, atol=1e-15)

    def test_first_step_moves_each_entry_by_lr(self, rng):
        params = {"w": np.zeros(4)}
        b = GradientBundle()
        b.add("w", np.array([3.0, -0.2, 1e-3, -50.0]))
        adam_step(AdamState(lr=0.1), params, b)
        assert np.allclose(np.abs(params["w"]), 0.1, rtol=1e-5)

    def test_sparse_rows_are_lazy(self, rng):
        table = rng.normal(size=(5, 2))
        before = table.copy()
        params = {"emb": table}
        b = GradientBundle()
        b.add_rows("emb", [1, 3, 1], rng.normal(size=(3, 2)))
        adam_step(AdamState(), params, b)
        assert np.array_equal(table[[0, 2, 4]], before[[0, 2, 4]])
        assert not np.array_equal(table[[1, 3]], before[[1, 3]])

    def test_sparse_matches_dense_on_touched_rows(self, rng):
        g = rng.normal(size=(5, 2))
        g[[0, 4]] = 0.0
        dense, sparse = {"e": np.ones((5, 2))}, {"e": np.ones((5, 2))}
        bd, bs = GradientBundle(), GradientBundle()
        bd.add("e", g)
        bs.add_rows("e", [1, 2, 3], g[[1, 2, 3]])
        adam_step(AdamState(), dense, bd)
        adam_step(AdamState(), sparse, bs)
        assert np.array_equal(dense["e"][1:4], sparse["e"][1:4])

    def test_missing_params_skipped(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        b = GradientBundle()
        b.add("a", np.ones(2))
        adam_step(AdamState(), params, b)
        assert np.array_equal(params["b"], np.ones(2))

    def test_non_finite_gradient_raises_before_update(self):
        params = {"a": np.ones(2)}
        b = GradientBundle()
        b.add("a", np.array([1.0, np.nan]))
        with pytest.raises(NonFiniteError) as err:
            adam_step(AdamState(), params, b)
        assert err.value.component == "a"
        assert np.array_equal(params["a"], np.ones(2))


class TestGradientBundle:
    def test_rows_consolidate_duplicates(self):
        b = GradientBundle()
        b.add_rows("t", [2, 0, 2], np.array([[1.0], [2.0], [3.0]]))
        b.add_rows("t", [0], np.array([[10.0]]))
        rows, vals = b.rows("t")
        assert rows.tolist() == [0, 2]
        assert vals[:, 0].tolist() == [12.0, 4.0]

    def test_to_dense(self):
        b = GradientBundle()
        b.add("w", np.ones(2))
        b.add("w", np.ones(2))
        b.add_rows("t", [1], np.array([[5.0, 6.0]]))
        dense = b.to_dense({"w": np.zeros(2), "t": np.zeros((3, 2)), "u": np.zeros(1)})
        assert dense["w"].tolist() == [2.0, 2.0]
        assert dense["t"].tolist() == [[0, 0], [5, 6], [0, 0]]
        assert dense["u"].tolist() == [0.0]

    def test_empty_rows_ignored(self):
        b = GradientBundle()
        b.add_rows("t", [], np.zeros((0, 3)))
        assert b.sparse_names == []


class TestGradCheck:
    def test_accepts_correct_and_flags_wrong_gradients(self, rng):
        w = {"w": rng.normal(size=3)}

        def good():
            return float(np.sum(w["w"] ** 3)), {"w": 3 * w["w"] ** 2}

        def bad():
            return float(np.sum(w["w"] ** 3)), {"w": 2 * w["w"] ** 2}

        assert grad_check(good, w) < 1e-5
        assert grad_check(bad, w) > 1e-2

    def test_restores_parameters(self, rng):
        w = {"w": rng.normal(size=3)}
        before = w["w"].copy()
        grad_check(lambda: (float(np.sum(w["w"] ** 2)), {"w": 2 * w["w"]}), w)
        assert np.array_equal(w["w"], before)
