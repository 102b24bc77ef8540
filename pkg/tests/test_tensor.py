import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from medsynth import tensor as T
from medsynth.errors import ContractError, DomainError, InvalidShapeError, NonFiniteError
from medsynth.tensor import Tensor, grad_check

from conftest import naive_conv2d, numeric_grad, rel_err


def param(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestConv2d:
    def test_hand_example(self):
        x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = T.conv2d(x, w, [0.0])
        np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 7))
        out = T.conv2d(x, np.ones((1, 1, 1, 1)), [0.0])
        np.testing.assert_array_equal(out.data, x)

    def test_matches_nested_loop_reference(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 2, 1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 5), (2, 1, 7), (3, 2, 6), (2, 0, 4)])
    def test_reference_various(self, rng, stride, pad, size):
        x = rng.normal(size=(1, 2, size, size))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad).data, naive_conv2d(x, w, b, stride, pad),
                                   atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidShapeError):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)), [0.0])

    def test_kernel_larger_than_input(self):
        with pytest.raises(InvalidShapeError):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), [0.0])

    def test_linearity(self, rng):
        w, b0 = rng.normal(size=(2, 3, 3, 3)), np.zeros(2)
        x, y = rng.normal(size=(2, 2, 3, 6, 6))
        a, c = 1.7, -0.4
        lhs = T.conv2d(a * x + c * y, w, b0, 2, 1).data
        rhs = a * T.conv2d(x, w, b0, 2, 1).data + c * T.conv2d(y, w, b0, 2, 1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestConvTranspose:
    def test_block_expansion(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv_transpose2d(x, np.ones((1, 1, 2, 2)), [0.0], stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_identity(self, rng):
        x = rng.normal(size=(1, 1, 4, 3))
        np.testing.assert_array_equal(T.conv_transpose2d(x, np.ones((1, 1, 1, 1)), [0.0]).data, x)

    def test_doubles_size(self, rng):
        out = T.conv_transpose2d(rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(3, 2, 4, 4)), np.zeros(2), 2, 1)
        assert out.shape == (2, 2, 10, 10)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0), (3, 1), (3, 0)])
    def test_equals_conv_input_gradient(self, rng, stride, pad):
        # conv_transpose(y; w) is the input-gradient of conv2d(.; w) seeded with y
        x = param(rng.normal(size=(2, 3, 10, 10)))
        w = rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(x, w, np.zeros(4), stride, pad)
        y = rng.normal(size=out.shape)
        out.backward(y)
        ct = T.conv_transpose2d(y, w, np.zeros(3), stride, pad).data
        # rows past the last window get no gradient and no transposed-conv output
        h = ct.shape[2]
        np.testing.assert_allclose(ct, x.grad[:, :, :h, :h], atol=1e-12)

    def test_adjoint_inner_product(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 4, 4))
        y = rng.normal(size=(2, 4, 4, 4))
        lhs = np.sum(T.conv2d(x, w, np.zeros(4), 2, 1).data * y)
        rhs = np.sum(x * T.conv_transpose2d(y, w, np.zeros(3), 2, 1).data)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_empty_output(self):
        with pytest.raises(InvalidShapeError):
            T.conv_transpose2d(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 2, 2)), [0.0], 1, 1)


class TestPointwise:
    def test_values(self):
        assert T.sigmoid(0.0).item() == 0.5
        assert T.leaky_relu(-1.0, 0.2).item() == pytest.approx(-0.2)
        assert T.leaky_relu(3.0, 0.2).item() == 3.0

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(np.array([-800.0, 800.0])).data
        assert out[0] >= 0 and out[1] == 1.0

    def test_tanh_gradient_at_zero(self):
        x = param(0.0)
        T.tanh(x).backward()
        assert x.grad == pytest.approx(1.0, abs=1e-12)
        fd = (math.tanh(1e-5) - math.tanh(-1e-5)) / 2e-5
        assert abs(x.grad - fd) < 1e-8

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(np.array([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(-1.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_error(self):
        with pytest.raises(NonFiniteError):
            T.mul(np.array([1e308]), 10.0)


class TestReductions:
    def test_mean(self):
        assert T.reduce_mean([1.0, 2.0, 3.0, 4.0]).item() == 2.5

    def test_mean_constant(self):
        assert T.reduce_mean(np.full((2, 3, 4), 1.25)).item() == 1.25

    def test_mean_matches_summation(self, rng):
        x = rng.normal(size=(3, 4, 5))
        total = 0.0
        for v in x.ravel():
            total += v
        assert abs(T.reduce_mean(x).item() - total / x.size) < 1e-12
        np.testing.assert_allclose(T.reduce_mean(x, axis=(0, 2)).data, x.mean(axis=(0, 2)), atol=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            T.reduce_mean(np.zeros((0,)))


class TestBackward:
    def test_linear(self, rng):
        xs = rng.normal(size=10)
        w = param(0.7)
        T.reduce_mean(w * xs).backward()
        assert w.grad == pytest.approx(xs.mean(), abs=1e-14)

    def test_quadratic(self):
        x = param([1.0, -2.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_non_scalar(self):
        x = param([1.0, 2.0])
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_two_consumers_sum(self, rng):
        a = rng.normal(size=5)
        x = param(a)
        (T.tanh(x).sum() + (x * x).sum()).backward()
        both = x.grad.copy()
        x.grad = None
        T.tanh(x).sum().backward()
        g1 = x.grad.copy()
        x.grad = None
        (x * x).sum().backward()
        np.testing.assert_allclose(both, g1 + x.grad, atol=1e-14)

    def test_accumulates_across_calls(self):
        x = param(3.0)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == 12.0

    def test_no_grad_records_nothing(self):
        x = param(2.0)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad and y._parents == ()


PRIMITIVES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
    "leaky_relu": lambda a, b: T.leaky_relu(a, 0.2) * b,
    "sigmoid": lambda a, b: T.sigmoid(a) * b,
    "tanh": lambda a, b: T.tanh(a) * b,
    "log": lambda a, b: T.log(T.mul(a, a) + 0.5) * b,
    "abs": lambda a, b: T.absolute(a) * b,
    "pow": lambda a, b: T.power(T.mul(a, a) + 1.0, 1.5) * b,
    "clamp": lambda a, b: T.clamp(a, -0.5, 0.5) * b,
    "concat": lambda a, b: T.concat([a, b], axis=1) * T.concat([b, a], axis=1),
    "matmul": lambda a, b: T.matmul(a, T.reshape(b, (4, 3))),
    "mean_axis": lambda a, b: T.reduce_mean(a * b, axis=1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    op = PRIMITIVES[name]
    a = param(rng.normal(size=(3, 4)))
    b = param(rng.normal(size=(3, 4)))
    weights = rng.normal(size=op(a, b).shape)

    def f():
        return float(np.sum(op(a, b).data * weights))

    loss = (op(a, b) * weights).sum()
    loss.backward()
    for p in (a, b):
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-4


@pytest.mark.parametrize("kind", ["conv", "conv_t"])
def test_conv_gradients(kind, rng):
    if kind == "conv":
        x, w, b = param(rng.normal(size=(2, 2, 6, 6))), param(rng.normal(size=(3, 2, 4, 4))), param(rng.normal(size=3))
        fn = lambda: T.conv2d(x, w, b, 2, 1)
    else:
        x, w, b = param(rng.normal(size=(2, 2, 3, 3))), param(rng.normal(size=(2, 3, 4, 4))), param(rng.normal(size=3))
        fn = lambda: T.conv_transpose2d(x, w, b, 2, 1)
    weights = rng.normal(size=fn().shape)
    (fn() * weights).sum().backward()
    for p in (x, w, b):
        assert rel_err(p.grad, numeric_grad(lambda: float(np.sum(fn().data * weights)), p.data)) < 1e-4


class TestGradCheck:
    def test_square(self):
        x = param(3.0)
        report = grad_check(lambda: x * x, [x])
        assert report.passed and report.max_rel_err < 1e-8

    def test_composition(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        w1, b1 = param(rng.normal(size=(1, 2, 4, 4))), param(rng.normal(size=2))
        w2, b2 = param(rng.normal(size=(1, 2, 3, 3))), param(rng.normal(size=1))

        def f():
            up = T.conv_transpose2d(x, w1, b1, 2, 1)
            return T.reduce_mean(T.conv2d(T.leaky_relu(up, 0.2), w2, b2, 1, 1) ** 2)

        assert grad_check(f, [w1, b1, w2, b2], tol=1e-4).passed

    def test_detects_corrupted_backward(self, rng, monkeypatch):
        real_tanh = T.tanh

        def bad_tanh(x):
            out = real_tanh(x)
            good = out._backward
            out._backward = lambda g: tuple(2.0 * v for v in good(g))
            return out

        x = param(rng.normal(size=5))
        report = grad_check(lambda: bad_tanh(x).sum(), [x])
        assert not report.passed


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(4, 9), st.integers(0, 2**31))
def test_conv_adjoint_property(stride, cin, pad, size, seed):
    rng = np.random.default_rng(seed)
    k = 3
    # without output padding the transpose is the exact adjoint only when the windows tile the input
    assume(size + 2 * pad >= k and (size + 2 * pad - k) % stride == 0)
    x = rng.normal(size=(1, cin, size, size))
    w = rng.normal(size=(2, cin, k, k))
    y_shape = T.conv2d(x, w, np.zeros(2), stride, pad).shape
    y = rng.normal(size=y_shape)
    ct = T.conv_transpose2d(y, w, np.zeros(cin), stride, pad).data
    lhs = np.sum(T.conv2d(x, w, np.zeros(2), stride, pad).data * y)
    rhs = np.sum(x * ct)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_bit_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    a = T.conv2d(x, w, np.zeros(4), 2, 1).data
    b = T.conv2d(x.copy(), w.copy(), np.zeros(4), 2, 1).data
    assert a.tobytes() == b.tobytes()
