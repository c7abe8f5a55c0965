"""Tensor core: elementwise ops, convolution vs a sliding-window oracle,
and reverse-mode gradients vs central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iatcodec import tensor as T
from iatcodec.nn import Conv2d, Parameter
from iatcodec.tensor import Tensor


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Naive triple-loop convolution used as the independent reference."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, co, i, j] = np.sum(patch * w[co])
            if b is not None:
                out[ni, co] += b[co]
    return out


def finite_diff_grad(f, values, h=1e-5):
    """Central finite differences of scalar f over an array of inputs."""
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(values)
        flat[i] = orig - h
        lo = f(values)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, floor)])


class TestElementwise:
    def test_mul_direct(self):
        out = T.mul(Tensor([2.0, -3.0]), Tensor([0.5, 2.0]))
        np.testing.assert_array_equal(out.data, [1.0, -6.0])

    def test_add_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = T.add(Tensor(x), 0.0)
        assert (out.data == x).all()

    def test_exp_log_round_trip(self):
        x = np.random.default_rng(1).uniform(0.1, 5.0, size=(4, 5))
        back = T.tlog(T.texp(Tensor(x)))
        np.testing.assert_allclose(back.data, x, atol=1e-12, rtol=0)

    def test_div_floor_error(self):
        with pytest.raises(ZeroDivisionError):
            T.div(Tensor([1.0]), Tensor([1e-31]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(TypeError):
            T.add(Tensor(np.ones(2, dtype=np.float32)), Tensor(np.ones(2, dtype=np.float64)))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_commutative_broadcast_order(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 1, 4))
        b = rng.normal(size=(1, 5, 1))
        for op in (T.add, T.mul):
            ab = op(Tensor(a), Tensor(b)).data
            ba = op(Tensor(b), Tensor(a)).data
            np.testing.assert_array_equal(ab, ba)

    def test_debug_mode_flags_nonfinite(self):
        T.set_debug(True)
        try:
            with pytest.raises(FloatingPointError, match="exp"):
                T.texp(Tensor([1000.0]))
        finally:
            T.set_debug(False)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(2).normal(size=(1, 1, 5, 7))
        w = np.ones((1, 1, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_averaging_constant(self):
        x = np.full((1, 1, 6, 6), 5.0)
        w = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = T.conv2d(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 5.0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (1, 2)])
    def test_matches_oracle(self, stride, padding):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        want = conv2d_oracle(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, want, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("shape,k", [((1, 2, 8, 8), 3), ((4, 8, 16, 16), 5), ((2, 4, 9, 11), 3)])
    def test_oracle_sweep(self, shape, k):
        rng = np.random.default_rng(hash((shape, k)) % 2 ** 32)
        x = rng.normal(size=shape)
        w = rng.normal(size=(3, shape[1], k, k))
        got = T.conv2d(Tensor(x), Tensor(w), padding=k // 2)
        want = conv2d_oracle(x, w, padding=k // 2)
        np.testing.assert_allclose(got.data, want, atol=1e-11, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(4).normal(size=(3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_analytic(self):
        x = Tensor([3.0], requires_grad=True)
        T.backward(T.tsum(x * x))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_nonscalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x + x)

    def test_graph_consumed_once(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.tsum(x * x)
        T.backward(loss)
        with pytest.raises(RuntimeError):
            T.backward(loss)

    def test_untouched_parameter_zeroed(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([2.0], requires_grad=True)
        T.backward(T.tsum(x * x), parameters=[x, unused])
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_fanout_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x * 3.0
        T.backward(T.tsum(y))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_conv_net_finite_difference(self):
        """Three stacked convs: every parameter's analytic gradient matches
        central differences (the core tensor-module gradient oracle)."""
        rng = np.random.default_rng(5)
        convs = [
            Conv2d(2, 3, k=3, rng=rng, dtype=np.float64),
            Conv2d(3, 3, k=3, stride=2, rng=rng, dtype=np.float64),
            Conv2d(3, 2, k=3, rng=rng, dtype=np.float64),
        ]
        x = rng.uniform(-2, 2, size=(1, 2, 8, 8))

        def forward():
            t = Tensor(x)
            for c in convs:
                t = T.leaky_relu(c(t))
            return T.tsum(t * t)

        loss = forward()
        params = [p for c in convs for p in c.parameters()]
        T.backward(loss, parameters=params)
        analytic = [p.grad.copy() for p in params]
        for p, a in zip(params, analytic):
            fd = finite_diff_grad(lambda _: forward().item(), p.data)
            assert rel_err(a, fd).max() <= 1e-4

    @pytest.mark.parametrize("op", ["exp", "tanh", "leaky_relu", "softplus", "abs",
                                    "mul", "div", "softmax", "avg_pool", "upsample",
                                    "reflect_conv", "clamp"])
    def test_registered_ops_finite_difference(self, op):
        rng = np.random.default_rng(abs(hash(op)) % 2 ** 32)
        x = rng.uniform(-2, 2, size=(2, 4, 4, 4))
        x[np.abs(x) < 0.05] += 0.1  # keep away from kinks
        other = rng.uniform(0.5, 2.0, size=(2, 4, 4, 4))

        def forward(values):
            t = Tensor(values, requires_grad=True)
            if op == "exp":
                out = T.texp(t)
            elif op == "tanh":
                out = T.ttanh(t)
            elif op == "leaky_relu":
                out = T.leaky_relu(t)
            elif op == "softplus":
                out = T.softplus(t)
            elif op == "abs":
                out = T.tabs(t)
            elif op == "mul":
                out = t * Tensor(other)
            elif op == "div":
                out = t / Tensor(other)
            elif op == "softmax":
                out = T.softmax(t, axis=1)
            elif op == "avg_pool":
                out = T.avg_pool2d(t, 2)
            elif op == "upsample":
                out = T.upsample_nearest2(t)
            elif op == "reflect_conv":
                w = Tensor(np.full((1, 4, 3, 3), 0.05))
                out = T.conv2d(t, w, padding=1, pad_mode="reflect")
            elif op == "clamp":
                out = T.clamp(t, -1.5, 1.5)
            return t, T.tsum(out * out)

        t, loss = forward(x)
        T.backward(loss)
        fd = finite_diff_grad(lambda v: forward(v)[1].item(), x.copy())
        if op == "clamp":  # no gradient defined at the clamp boundary itself
            mask = np.abs(np.abs(x) - 1.5) > 1e-4
            assert rel_err(t.grad, fd)[mask].max() <= 1e-4
        else:
            assert rel_err(t.grad, fd).max() <= 1e-4


class TestPixelShuffle:
    def test_fixed_order(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])  # a,b,c,d
        out = T.space_to_depth(Tensor(x))
        np.testing.assert_array_equal(out.data.reshape(4), [1, 2, 3, 4])

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(1, 2, 2), (3, 4, 6), (2, 8, 8)]))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_bit_exact(self, seed, dims):
        c, h, w = dims
        x = np.random.default_rng(seed).normal(size=(2, c, h, w))
        back = T.depth_to_space(T.space_to_depth(Tensor(x)))
        assert (back.data == x).all()

    def test_norm_preserved(self):
        x = np.random.default_rng(6).normal(size=(1, 3, 6, 8))
        out = T.space_to_depth(Tensor(x))
        assert np.linalg.norm(out.data) == np.linalg.norm(x)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            T.space_to_depth(Tensor(np.ones((1, 1, 3, 4))))
