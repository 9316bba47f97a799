import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gtem import ops
from gtem.oracles import gradcheck, naive_conv2d, naive_linear
from gtem.tensor import NonFiniteError, Parameter, ShapeError, Tensor, backward, no_grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestLinear:
    def test_zero_input_zero_bias(self):
        out = ops.linear(Tensor(np.zeros((4, 3))), Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, np.zeros((4, 2)))

    def test_identity(self):
        out = ops.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, [1.0, 2.0])

    def test_matches_naive(self, rng):
        x, w, b = rng.standard_normal((5, 3, 7)), rng.standard_normal((7, 4)), rng.standard_normal(4)
        out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        assert rel_err(out, naive_linear(x, w, b)) < 1e-12

    def test_channel_axis(self, rng):
        x, w = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 6))
        out = ops.linear(Tensor(x), Tensor(w), axis=1).data
        ref = np.moveaxis(naive_linear(np.moveaxis(x, 1, -1), w), -1, 1)
        assert rel_err(out, ref) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_gradient(self, rng):
        err = gradcheck(lambda x, w, b: ops.linear(x, w, b), [rng.standard_normal((3, 4)),
                        rng.standard_normal((4, 2)), rng.standard_normal(2)], probes=100)
        assert err < 1e-4


class TestConv2d:
    def test_constant_input_normalized_kernel(self):
        k = np.full((1, 1, 3, 3), 1 / 9)
        out = ops.conv2d(Tensor(np.full((1, 1, 6, 6), 0.7)), Tensor(k), pad=1).data
        assert np.allclose(out[0, 0, 1:-1, 1:-1], 0.7, atol=1e-15)

    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.eye(3).reshape(3, 3, 1, 1))).data
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("stride,pad,depthwise", [(1, 1, False), (2, 1, False), (1, 0, False),
                                                      (1, 1, True), (2, 1, True)])
    def test_matches_naive(self, rng, stride, pad, depthwise):
        x = rng.standard_normal((2, 3, 7, 6))
        k = rng.standard_normal((3, 1, 3, 3) if depthwise else (4, 3, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), stride, pad, depthwise).data
        ref = naive_conv2d(x, k, stride, pad, depthwise)
        assert out.shape[2:] == ((7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1)
        assert rel_err(out, ref) < 1e-12

    def test_errors(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            ops.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), stride=0)
        with pytest.raises(ValueError):
            ops.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), pad=0)
        with pytest.raises(ShapeError):
            ops.conv2d(x, Tensor(np.zeros((1, 1, 2, 2))))

    @pytest.mark.parametrize("stride,depthwise", [(1, False), (2, False), (1, True)])
    def test_gradient(self, rng, stride, depthwise):
        x = rng.standard_normal((2, 3, 5, 5))
        k = rng.standard_normal((3, 1, 3, 3) if depthwise else (2, 3, 3, 3))
        err = gradcheck(lambda a, b: ops.conv2d(a, b, stride, 1, depthwise), [x, k], probes=60)
        assert err < 1e-4


class TestLayerNorm:
    def test_zero_input(self):
        out = ops.layernorm(Tensor(np.zeros((2, 4, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, np.zeros((2, 4, 3)))

    def test_normalizes_channels(self, rng):
        x = rng.normal(3, 5, (2, 16, 4, 4))
        y = ops.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
        assert np.max(np.abs(y.mean(axis=1))) < 1e-9
        assert np.max(np.abs(y.var(axis=1) - 1)) < 1e-6

    def test_gradient(self, rng):
        err = gradcheck(lambda x, g, b: ops.layernorm(x, g, b, 1e-6, axis=1),
                        [rng.standard_normal((2, 5, 3)), rng.standard_normal(5), rng.standard_normal(5)],
                        probes=60)
        assert err < 1e-5


class TestActivations:
    def test_values(self):
        assert ops.silu(Tensor(0.0)).item() == 0.0
        assert ops.gelu(Tensor(0.0)).item() == 0.0
        assert abs(ops.softplus(Tensor(0.0)).item() - math.log(2)) < 1e-15
        assert abs(ops.silu(Tensor(1.0)).item() - 1 / (1 + math.exp(-1))) < 1e-15
        assert abs(ops.silu(Tensor(1.0)).item() - 0.731059) < 1e-6

    @pytest.mark.parametrize("fn", [ops.silu, ops.gelu, ops.softplus, ops.tanh, ops.sigmoid, ops.exp,
                                    ops.square])
    def test_gradient(self, rng, fn):
        assert gradcheck(fn, [rng.standard_normal((4, 5))], probes=50) < 1e-4

    def test_softmax_gradient(self, rng):
        assert gradcheck(lambda x: ops.softmax(x, -1), [rng.standard_normal((3, 6))], probes=50) < 1e-4

    def test_log_gradient(self, rng):
        assert gradcheck(ops.log2, [rng.uniform(0.5, 2, (6,))], probes=50) < 1e-4

    def test_norm2(self, rng):
        x = rng.standard_normal((3, 4))
        assert abs(ops.norm2(Tensor(x)).item() - np.linalg.norm(x)) < 1e-12
        assert gradcheck(ops.norm2, [x], probes=50) < 1e-4
        z = Tensor(np.zeros(3), requires_grad=True)
        backward(ops.norm2(z))
        assert np.array_equal(z.grad, np.zeros(3))


class TestStructural:
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, min_side=1, max_side=4),
                      elements=st.floats(-1e6, 1e6)))
    def test_flip_involution_and_permute_inverse(self, x):
        t = Tensor(x)
        axes = tuple(range(x.ndim))
        assert np.array_equal(ops.flip(ops.flip(t, axes), axes).data, x)
        perm = tuple(np.random.default_rng(x.size).permutation(x.ndim))
        inv = tuple(np.argsort(perm))
        assert np.array_equal(ops.permute(ops.permute(t, perm), inv).data, x)

    @given(st.integers(1, 4), st.integers(1, 3))
    def test_split_concat(self, n, c):
        x = np.arange(2 * n * c * 3, dtype=np.float64).reshape(2, n * c, 3)
        parts = ops.split_channels(Tensor(x), n, axis=1)
        assert len(parts) == n
        assert np.array_equal(ops.concat(parts, axis=1).data, x)

    def test_split_not_divisible(self):
        with pytest.raises(ShapeError):
            ops.split_channels(Tensor(np.zeros((1, 5, 2))), 2, axis=1)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ops.flip(Tensor(np.zeros((2, 2))), (3,))

    def test_reshape_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert np.array_equal(ops.reshape(ops.reshape(Tensor(x), (6, 4)), (2, 3, 4)).data, x)

    def test_structural_gradients(self, rng):
        x = rng.standard_normal((2, 4, 3, 3))
        fn = lambda a: ops.concat(  # noqa: E731
            [ops.flip(s, (0, 2)) for s in ops.split_channels(ops.permute(a, (0, 1, 3, 2)), 2, axis=1)], axis=1)
        assert gradcheck(fn, [x], probes=50) < 1e-4
        assert gradcheck(lambda a: ops.crop2d(ops.upsample_nearest(ops.pad2d(a, 1, 2)), 5, 6), [x],
                         probes=50) < 1e-4
        assert gradcheck(lambda a: ops.take(a, 1, 1, 3), [x], probes=50) < 1e-4


class TestBackward:
    def test_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(ops.sum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(ops.sum(ops.square(x)))
        assert x.grad == 6.0

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ops.mul(x, x)
        backward(ops.sum(ops.add(y, y)))
        assert x.grad[0] == 8.0

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(2), requires_grad=True))

    def test_frozen_parameter(self):
        p = Parameter(np.ones(2), trainable=False)
        q = Parameter(np.ones(2))
        backward(ops.sum(ops.mul(p, q)))
        assert p.grad is None and np.array_equal(q.grad, np.ones(2))

    def test_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = ops.scale(x, 2.0)
        assert not y.requires_grad

    def test_round_ste_identity_gradient(self):
        x = Tensor(np.array([0.3, -1.5, 2.7]), requires_grad=True)
        y = ops.round_ste(x)
        assert np.array_equal(y.data, [0.0, -2.0, 3.0])
        backward(ops.sum(y))
        assert np.array_equal(x.grad, np.ones(3))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ops.log(Tensor(np.array([0.0])))
        with pytest.raises(NonFiniteError):
            ops.exp(Tensor(np.array([1e4])))

    def test_composite_network(self, rng):
        from gtem.nn import Conv2d, ResBlock

        conv = Conv2d(rng, 2, 3)
        blk = ResBlock(rng, 3)
        err = gradcheck(lambda x: ops.gelu(blk(conv(x))), [rng.standard_normal((1, 2, 4, 4))], probes=50)
        assert err < 1e-4

    def test_composite_network_weights(self, rng):
        from gtem.nn import Conv2d

        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        conv = Conv2d(rng, 2, 3)
        err = gradcheck(lambda w, b: ops.gelu(ops.add_bias(ops.conv2d(x, w, 1, 1), b)),
                        [conv.weight.data, conv.bias.data + 0.1], probes=50)
        assert err < 1e-4
