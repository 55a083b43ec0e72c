import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxner.optim import AdamState, adam_step
from ctxner.tensor import (
    DimensionError,
    Tensor,
    add,
    backward,
    concat,
    conv1d_maxpool,
    elementwise,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    sigmoid,
    stack,
    take_rows,
    tanh,
    total,
    transpose,
)

from conftest import check_gradients, numeric_grad


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_empty_inner_dimension(self):
        out = matmul(Tensor(np.zeros((1, 0))), Tensor(np.zeros((0, 1))))
        assert out.shape == (1, 1)
        assert out.data[0, 0] == 0.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_sum_gradient_is_row_sums_of_b(self, rng):
        a = Tensor(np.eye(2), requires_grad=True)
        b = param(rng, 2, 2)
        backward(total(matmul(a, b)))
        # d sum(AB) / dA[i, k] = sum_j B[k, j]
        np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (2, 1)), atol=1e-12)
        fd = numeric_grad(lambda: total(matmul(a, b)), a, eps=1e-5)
        np.testing.assert_allclose(a.grad, fd, rtol=1e-8)

    def test_vector_times_matrix_gradients(self, rng):
        x, w = param(rng, 3), param(rng, 3, 4)
        check_gradients(lambda: total(tanh(matmul(x, w))), {"x": x, "w": w})


class TestElementwise:
    def test_sigmoid_tanh_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert tanh(Tensor(0.0)).item() == 0.0

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        backward(sigmoid(x))
        assert x.grad == pytest.approx(0.25, abs=1e-15)
        fd = numeric_grad(lambda: sigmoid(x), x, eps=1e-4)
        assert fd == pytest.approx(0.25, rel=1e-8)

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_gradients(self, rng, kind):
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        check_gradients(lambda: total(mul(elementwise(kind, a, b), elementwise(kind, a, b))), {"a": a, "b": b})

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu"])
    def test_unary_gradients(self, rng, kind):
        a = param(rng, 5)
        check_gradients(lambda: total(mul(elementwise(kind, a), Tensor(np.arange(1.0, 6.0)))), {"a": a})

    def test_trailing_vector_broadcast_gradient(self, rng):
        m, b = param(rng, 3, 4), param(rng, 4)
        check_gradients(lambda: total(tanh(add(m, b))), {"m": m, "b": b})

    def test_column_broadcast_is_rejected(self):
        with pytest.raises(DimensionError):
            add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise("softplus", Tensor(1.0))

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
    def test_ranges(self, x):
        s = sigmoid(Tensor(x)).data
        t = tanh(Tensor(x)).data
        assert np.all((s >= 0) & (s <= 1))
        assert np.all((t >= -1) & (t <= 1))


class TestLogSoftmax:
    def test_uniform(self):
        out = log_softmax(Tensor([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [-math.log(3)] * 3, atol=1e-15)

    def test_large_inputs_are_stable(self):
        out = log_softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(np.exp(out).sum() - 1.0) < 1e-12

    def test_random_vector_normalises(self, rng):
        out = log_softmax(Tensor(rng.normal(size=5))).data
        assert abs(np.exp(out).sum() - 1.0) < 1e-12

    @settings(max_examples=200)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=st.floats(-1e3, 1e3)))
    def test_normalises_within_range(self, x):
        out = log_softmax(Tensor(x)).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = param(rng, 3, 5)
        w = Tensor(rng.normal(size=(3, 5)))
        check_gradients(lambda: total(mul(log_softmax(x), w)), {"x": x})

    def test_logsumexp_gradient(self, rng):
        x = param(rng, 4, 3)
        check_gradients(lambda: total(mul(logsumexp(x, axis=-1), Tensor([1.0, -2.0, 0.5, 3.0]))), {"x": x})


class TestConv1dMaxpool:
    def test_single_char_pure_bias(self):
        out = conv1d_maxpool(Tensor(np.ones((1, 4))), Tensor(np.zeros((3, 12))), Tensor([0.5, -1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.5, -1.0, 2.0])

    def test_trigram_detector(self):
        # one-hot chars over a 4-symbol alphabet; word = [0, 2, 1, 3, 0]
        word = [0, 2, 1, 3, 0]
        chars = np.eye(4)[word]
        pattern = [2, 1, 3]  # trigram centred on position 2
        filt = np.concatenate([np.eye(4)[c] for c in pattern]) / 3.0
        responses = []
        padded = np.vstack([np.zeros(4), chars, np.zeros(4)])
        for p in range(5):
            responses.append(padded[p:p + 3].reshape(-1) @ filt)
        assert responses[2] == pytest.approx(1.0)
        assert max(responses[:2] + responses[3:]) < 1.0
        out = conv1d_maxpool(Tensor(chars), Tensor(filt[None, :]), Tensor([0.0]))
        assert out.data[0] == pytest.approx(1.0)

    def test_gradients(self, rng):
        chars, filters, bias = param(rng, 4, 3), param(rng, 2, 9), param(rng, 2)
        check_gradients(lambda: total(mul(conv1d_maxpool(chars, filters, bias), Tensor([1.0, -0.7]))),
                        {"chars": chars, "filters": filters, "bias": bias})

    def test_empty_sequence_rejected(self):
        with pytest.raises(DimensionError):
            conv1d_maxpool(Tensor(np.zeros((0, 3))), Tensor(np.zeros((2, 9))), Tensor(np.zeros(2)))


class TestStructural:
    def test_concat_stack_take_rows_transpose(self, rng):
        a, b, tbl = param(rng, 3), param(rng, 3), param(rng, 5, 3)

        def f():
            rows = take_rows(tbl, [0, 2, 2])
            s = stack([a, b, concat([a[:1], b[1:]])])
            return total(mul(tanh(add(rows, s)), transpose(transpose(rows))))

        check_gradients(f, {"a": a, "b": b, "tbl": tbl})

    def test_repeated_rows_accumulate(self):
        tbl = Tensor(np.zeros((3, 2)), requires_grad=True)
        backward(total(take_rows(tbl, [1, 1, 1])))
        np.testing.assert_array_equal(tbl.grad, [[0, 0], [3, 3], [0, 0]])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng, 2, 3)
        backward(total(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        backward(total(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_two_paths_accumulate(self, rng):
        x = param(rng, 4)
        w1, w2 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        backward(add(total(mul(x, w1)), total(tanh(mul(x, w2)))))
        expected = w1.data + w2.data * (1 - np.tanh(x.data * w2.data) ** 2)
        np.testing.assert_allclose(x.grad, expected, atol=1e-14)

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(DimensionError):
            backward(param(rng, 3))

    def test_grad_accumulates_across_calls(self):
        x = Tensor([2.0], requires_grad=True)
        backward(total(x))
        backward(total(x))
        np.testing.assert_array_equal(x.grad, [2.0])


class TestAdam:
    def test_zero_gradient_fixed_point(self, rng):
        p = param(rng, 3, 2)
        before = p.data.copy()
        adam_step([p], [np.zeros((3, 2))], AdamState(learning_rate=0.1))
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_learning_rate(self):
        # t=1: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        p = Tensor([1.0], requires_grad=True)
        state = AdamState(learning_rate=0.1)
        adam_step([p], [np.array([1.0])], state)
        assert state.step_count == 1
        assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_identical_params_stay_identical(self, rng):
        a = Tensor([0.3, -0.2], requires_grad=True)
        b = Tensor([0.3, -0.2], requires_grad=True)
        state = AdamState(learning_rate=0.05)
        for _ in range(25):
            g = rng.normal(size=2)
            adam_step([a, b], [g, g.copy()], state)
        np.testing.assert_array_equal(a.data, b.data)

    def test_deterministic(self, rng):
        grads = [rng.normal(size=(2, 2)) for _ in range(5)]
        results = []
        for _ in range(2):
            p = Tensor(np.ones((2, 2)), requires_grad=True)
            state = AdamState(learning_rate=0.01)
            for g in grads:
                adam_step([p], [g], state)
            results.append(p.data.copy())
        assert results[0].tobytes() == results[1].tobytes()

    def test_second_moment_nonnegative(self, rng):
        p = param(rng, 4)
        state = AdamState()
        for _ in range(5):
            adam_step([p], [rng.normal(size=4)], state)
        assert np.all(state.second_moment[0] >= 0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            adam_step([param(rng, 3)], [np.zeros(4)], AdamState())

    def test_zero_learning_rate_is_bitwise_noop(self, rng):
        p = param(rng, 5)
        before = p.data.tobytes()
        state = AdamState(learning_rate=0.0)
        for _ in range(3):
            adam_step([p], [rng.normal(size=5)], state)
        assert p.data.tobytes() == before
