import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgn.numeric import (DimensionError, ParamTensor, activate, activate_backward,
                         conv2d_backward, conv2d_forward, dense_forward, grad_check,
                         maxpool2x2, maxpool2x2_backward, relu, resize_bilinear,
                         resize_bilinear_backward, sgd_momentum_step, sigmoid)


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        a = f()
        flat[i] = o - eps
        b = f()
        flat[i] = o
        gf[i] = (a - b) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


class TestConv:
    def test_zero_input(self, rng):
        out = conv2d_forward(np.zeros((1, 1, 1)), rng.normal(size=(3, 3, 1, 2)), np.zeros(2))
        assert np.array_equal(out, np.zeros((1, 1, 2)))

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(4, 5, 1))
        out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        assert np.array_equal(out, x)

    def test_ones_hand_oracle(self):
        out = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), 1, 1)
        assert out[1, 1, 0] == 9
        assert {out[0, 0, 0], out[0, 2, 0], out[2, 0, 0], out[2, 2, 0]} == {4.0}
        assert out[0, 1, 0] == 6

    def test_against_direct_loops(self, rng):
        x = rng.normal(size=(6, 5, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        out = conv2d_forward(x, w, b, stride=2, pad=1)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((3, 3, 2))
        for i in range(3):
            for j in range(3):
                patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[i, j] = np.einsum("abc,abcd->d", patch, w) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))

    def test_backward_shape_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d_backward(np.zeros((3, 3, 2)), np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 2)))

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_size(self, k, rng):
        x = rng.normal(size=(7, 9, 2))
        assert conv2d_forward(x, rng.normal(size=(k, k, 2, 3)), np.zeros(3)).shape == (7, 9, 3)

    def test_zero_upstream(self, rng):
        x = rng.normal(size=(5, 5, 2))
        dx, dw, db = conv2d_backward(np.zeros((5, 5, 3)), x, rng.normal(size=(3, 3, 2, 3)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_identity_backward(self, rng):
        up = rng.normal(size=(4, 4, 1))
        dx, _, _ = conv2d_backward(up, rng.normal(size=(4, 4, 1)), np.ones((1, 1, 1, 1)))
        assert np.array_equal(dx, up)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 2)])
    def test_backward_finite_differences(self, rng, stride, pad):
        x = rng.normal(size=(5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        up = rng.normal(size=conv2d_forward(x, w, b, stride, pad).shape)

        def f():
            return float(np.sum(conv2d_forward(x, w, b, stride, pad) * up))

        dx, dw, db = conv2d_backward(up, x, w, stride, pad)
        assert rel_err(dx, central_diff(f, x)) < 1e-4
        assert rel_err(dw, central_diff(f, w)) < 1e-4
        assert rel_err(db, central_diff(f, b)) < 1e-4


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 3))
        assert np.array_equal(dense_forward(x, np.eye(3)), x)

    def test_zero(self):
        assert not dense_forward(np.zeros((2, 3)), np.ones((3, 4))).any()

    def test_hand(self):
        assert np.array_equal(dense_forward([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            dense_forward(np.zeros((2, 3)), np.zeros((2, 3)))


class TestActivations:
    def test_relu(self):
        assert relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]

    def test_sigmoid_zero(self):
        assert sigmoid(np.array(0.0)) == 0.5

    def test_sigmoid_extremes_finite(self):
        s = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    def test_sigmoid_gradient_at_zero(self):
        out = activate(np.array([0.0]), "sigmoid")
        g = activate_backward(np.array([1.0]), out, "sigmoid")
        fd = (sigmoid(np.array(1e-6)) - sigmoid(np.array(-1e-6))) / 2e-6
        assert g[0] == 0.25
        assert abs(g[0] - fd) < 1e-9

    def test_relu_backward_uses_output(self):
        out = activate(np.array([-2.0, 3.0]), "relu")
        assert activate_backward(np.array([5.0, 5.0]), out, "relu").tolist() == [0.0, 5.0]


class TestResize:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 4, 2))
        assert np.array_equal(resize_bilinear(x, 5, 4), x)

    def test_hand_corner_aligned(self):
        out = resize_bilinear(np.array([[[0.0]], [[1.0]]]), 3, 1)
        assert out[:, 0, 0].tolist() == [0.0, 0.5, 1.0]

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 17), st.integers(1, 17),
           st.floats(-100, 100, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_constants_preserved(self, h, w, oh, ow, c):
        out = resize_bilinear(np.full((h, w, 2), c), oh, ow)
        assert out.shape == (oh, ow, 2)
        assert np.all(out == c)

    def test_backward_adjoint(self, rng):
        x = rng.normal(size=(3, 4, 2))
        up = rng.normal(size=(7, 5, 2))
        lhs = np.sum(resize_bilinear(x, 7, 5) * up)
        rhs = np.sum(x * resize_bilinear_backward(up, 3, 4))
        assert abs(lhs - rhs) < 1e-10


class TestPool:
    def test_forward_backward(self, rng):
        x = rng.normal(size=(5, 4, 2))
        out, arg = maxpool2x2(x)
        assert out.shape == (2, 2, 2)
        up = rng.normal(size=out.shape)

        def f():
            return float(np.sum(maxpool2x2(x)[0] * up))

        assert rel_err(maxpool2x2_backward(up, arg, x.shape), central_diff(f, x)) < 1e-6


class TestSGD:
    def test_lr_zero_noop(self, rng):
        p = ParamTensor("p", rng.normal(size=3))
        before = p.value.copy()
        p.grad[:] = 1.0
        sgd_momentum_step([p], 0.0, 0.9, 5e-4)
        assert np.array_equal(p.value, before)
        assert not p.grad.any()

    def test_vanilla(self):
        p = ParamTensor("p", np.array([1.0, 2.0]))
        p.grad[:] = [0.5, -1.0]
        sgd_momentum_step([p], 0.1, 0.0, 0.0)
        np.testing.assert_allclose(p.value, [0.95, 2.1], rtol=0, atol=1e-15)

    def test_two_momentum_steps(self):
        p = ParamTensor("p", np.array([0.0]))
        for _ in range(2):
            p.grad[:] = 1.0
            sgd_momentum_step([p], 0.1, 0.9, 0.0)
        assert abs(p.value[0] + 0.29) < 1e-15

    def test_weight_decay(self):
        p = ParamTensor("p", np.array([2.0]))
        sgd_momentum_step([p], 0.5, 0.0, 0.1)
        assert p.value[0] == 2.0 - 0.5 * 0.2

    def test_non_finite_aborts_without_touching(self):
        a = ParamTensor("a", np.array([1.0]))
        b = ParamTensor("b", np.array([1.0]))
        a.grad[:] = 1.0
        b.grad[:] = np.nan
        with pytest.raises(FloatingPointError, match="b"):
            sgd_momentum_step([a, b], 0.1, 0.9, 0.0)
        assert a.value[0] == 1.0 and a.velocity[0] == 0.0

    def test_non_finite_value_aborts(self):
        a = ParamTensor("a", np.array([np.inf]))
        a.grad[:] = 1.0
        with pytest.raises(FloatingPointError, match="a"):
            sgd_momentum_step([a], 0.1, 0.9, 5e-4)
        assert a.velocity[0] == 0.0


class TestInit:
    def test_bounds_and_seed(self):
        a = ParamTensor.init_uniform("w", (3, 3, 4, 8), 36, np.random.default_rng(0))
        b = ParamTensor.init_uniform("w", (3, 3, 4, 8), 36, np.random.default_rng(0))
        assert np.array_equal(a.value, b.value)
        assert np.abs(a.value).max() <= math.sqrt(6) / 6
        assert ParamTensor.zeros("b", (4,)).value.tolist() == [0.0] * 4


class TestGradCheck:
    def test_quadratic(self, rng):
        p = ParamTensor("w", rng.normal(size=(3, 2)))

        def loss(backward):
            if backward:
                p.grad += p.value
            return 0.5 * float(np.sum(p.value ** 2))

        rep = grad_check(loss, [p])
        assert rep.passed and len(rep.entries) == 6
        assert rep.max_error < 1e-8

    def test_empty(self):
        rep = grad_check(lambda backward: 0.0, [])
        assert rep.passed and rep.entries == []

    def test_detects_wrong_gradient(self, rng):
        p = ParamTensor("w", rng.normal(size=4))

        def loss(backward):
            if backward:
                p.grad += 2 * p.value       # wrong by a factor of two
            return 0.5 * float(np.sum(p.value ** 2))

        rep = grad_check(loss, [p])
        assert not rep.passed and rep.failures()

    def test_sampling(self, rng):
        p = ParamTensor("w", rng.normal(size=50))

        def loss(backward):
            if backward:
                p.grad += np.cos(p.value)
            return float(np.sum(np.sin(p.value)))

        rep = grad_check(loss, [p], samples={"w": 7}, rng=rng)
        assert len(rep.entries) == 7 and rep.passed
        assert len({e.index for e in rep.entries}) == 7


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 4),
       st.sampled_from([1, 3]), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_conv_backward_property(h, w, cin, cout, k, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(h, w, cin))
    kern = r.normal(size=(k, k, cin, cout))
    b = r.normal(size=cout)
    up = r.normal(size=(h, w, cout))
    f = lambda: float(np.sum(conv2d_forward(x, kern, b) * up))  # noqa: E731
    dx, dw, db = conv2d_backward(up, x, kern)
    assert rel_err(dx, central_diff(f, x, 1e-4)) < 1e-3
    assert rel_err(dw, central_diff(f, kern, 1e-4)) < 1e-3
    assert rel_err(db, central_diff(f, b, 1e-4)) < 1e-3
