import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arche import tensors as T
from arche.tensors import Tensor
from helpers import check_op_grad

RNG = np.random.default_rng(1234)


def rand(*shape, lo=-2.0, hi=2.0):
    return RNG.uniform(lo, hi, shape)


class TestTensorType:
    def test_rejects_zero_extent(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_data_is_fp64(self):
        t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
        assert t.data.dtype == np.float64
        assert t.size == int(np.prod(t.shape))

    def test_grad_matches_shape(self):
        w = Tensor(rand(3, 4), True)
        (w * w).sum().backward()
        assert w.grad.shape == w.shape

    def test_backward_requires_scalar(self):
        w = Tensor(rand(3), True)
        with pytest.raises(ValueError):
            (w * 2.0).backward()

    def test_shared_subgraph_visited_once(self):
        # y is used twice; each path must contribute exactly once.
        x = Tensor(np.array([3.0]), True)
        y = x * x
        z = (y + y).sum()
        z.backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(rand(2), True)
        with T.no_grad():
            y = T.relu(x)
        assert y.node is None


class TestElementwise:
    def test_softsign_values(self):
        assert T.elementwise("softsign", Tensor(0.0)).item() == 0.0
        assert T.elementwise("softsign", Tensor(1.0)).item() == 0.5

    def test_sigmoid_zero(self):
        assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5

    def test_relu(self):
        out = T.elementwise("relu", Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softsign_subgradient_at_zero_is_one(self):
        x = Tensor(np.array([0.0]), True)
        T.softsign(x).sum().backward()
        assert x.grad[0] == 1.0

    def test_binary_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.elementwise("add", Tensor(rand(2, 3)), Tensor(rand(3, 2)))

    def test_binary_scalar_broadcast(self):
        out = T.elementwise("mul", Tensor(rand(2, 3)), Tensor(2.0))
        assert out.shape == (2, 3)

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            T.elementwise("tan", Tensor(1.0))

    @pytest.mark.parametrize("tag", ["relu", "sigmoid", "softsign"])
    def test_unary_grads(self, tag):
        x = rand(5, 4)
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        assert check_op_grad(lambda a: T.elementwise(tag, a), [x]) <= 1e-4

    @pytest.mark.parametrize("tag", ["add", "mul", "sub"])
    def test_binary_grads(self, tag):
        assert check_op_grad(lambda a, b: T.elementwise(tag, a, b), [rand(3, 4), rand(3, 4)]) <= 1e-4

    @pytest.mark.parametrize("fn", [T.tanh, T.exp, T.softplus, T.normal_cdf])
    def test_smooth_unary_grads(self, fn):
        assert check_op_grad(fn, [rand(4, 3)]) <= 1e-4

    def test_log_and_div_grads(self):
        assert check_op_grad(T.log, [rand(4, lo=0.5, hi=3.0)]) <= 1e-4
        assert check_op_grad(T.div, [rand(3, 2), rand(3, 2, lo=0.5, hi=2.0)]) <= 1e-4
        assert check_op_grad(lambda a: T.power(a, 0.5), [rand(5, lo=0.5, hi=3.0)]) <= 1e-4

    def test_broadcast_grads(self):
        assert check_op_grad(lambda a, b: a * b + b, [rand(2, 3, 4), rand(4)]) <= 1e-4


class TestReduce:
    def test_mean_of_constant(self):
        assert T.reduce("mean", Tensor(np.full((4, 4), 2.0))).item() == 2.0

    def test_empty_axes_is_identity(self):
        x = Tensor(rand(3, 2))
        assert T.reduce("sum", x, axes=()) is x

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            T.reduce("sum", Tensor(rand(2, 2)), axes=(5,))

    @pytest.mark.parametrize("tag", ["sum", "mean"])
    def test_grads(self, tag):
        assert check_op_grad(lambda a: T.reduce(tag, a, axes=(0, 2)), [rand(3, 4, 5)]) <= 1e-4

    def test_mean_equals_sum_over_count(self):
        x = rand(3, 5)
        np.testing.assert_allclose(T.reduce("mean", Tensor(x), axes=1).data, x.sum(axis=1) / 5)


class TestShapeOps:
    def test_getitem_concat_reshape_grads(self):
        assert check_op_grad(lambda a: a[1:, ::2] * 2.0, [rand(3, 4)]) <= 1e-4
        assert check_op_grad(lambda a, b: T.concat([a, b], axis=-1), [rand(2, 3), rand(2, 2)]) <= 1e-4
        assert check_op_grad(lambda a: T.reshape(a, (6, 2)), [rand(3, 4)]) <= 1e-4

    def test_fancy_index_grad_accumulates(self):
        x = Tensor(np.arange(3.0), True)
        x[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_einsum_linear_softmax_grads(self):
        assert check_op_grad(lambda a, b: T.einsum("mci,coi->mco", a, b),
                             [rand(5, 3, 2), rand(3, 4, 2)]) <= 1e-4
        assert check_op_grad(lambda a, b: T.einsum("...i,ij->...j", a, b), [rand(2, 3, 4), rand(4, 5)]) <= 1e-4
        assert check_op_grad(lambda a, b: T.linear(a, b), [rand(2, 3, 4), rand(4, 5)]) <= 1e-4
        assert check_op_grad(lambda a, b: T.linear(a, b, transpose=True), [rand(2, 4), rand(5, 4)]) <= 1e-4
        assert check_op_grad(lambda a: T.softmax(a, axis=-2), [rand(2, 3, 4)]) <= 1e-4


class TestConv2d:
    def test_identity_kernel(self):
        x = rand(5, 6, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = np.eye(3)
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_zero_padded_sum(self):
        out = T.conv2d(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((3, 3, 1, 1)))).data[..., 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0

    def test_stride_two_halves(self):
        out = T.conv2d(Tensor(rand(8, 8, 2)), Tensor(rand(5, 5, 2, 3)), stride=2)
        assert out.shape == (4, 4, 3)

    def test_odd_extent_rounds_up(self):
        assert T.conv2d(Tensor(rand(7, 5, 1)), Tensor(rand(3, 3, 1, 1)), stride=2).shape == (4, 3, 1)

    def test_transposed_extent(self):
        out = T.conv2d(Tensor(rand(4, 3, 5)), Tensor(rand(5, 5, 2, 5)), stride=2, transposed=True)
        assert out.shape == (8, 6, 2)

    def test_channel_mismatch_diagnostic(self):
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(Tensor(rand(4, 4, 3)), Tensor(rand(3, 3, 2, 1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(rand(4, 4, 1)), Tensor(rand(2, 2, 1, 1)))

    def test_matches_direct_loop(self):
        x = rand(6, 7, 2)
        k = rand(3, 3, 2, 4)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((3, 4, 4))
        for i in range(3):
            for j in range(4):
                patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[i, j] = np.einsum("uvc,uvco->o", patch, k)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), stride=2).data, ref, rtol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_transpose_is_adjoint(self, stride):
        # <conv(x), y> == <x, conv_T(y)> for the same kernel
        x = rand(2, 8, 6, 3)
        k = rand(5, 5, 3, 4)
        fwd = T.conv2d(Tensor(x), Tensor(k), stride=stride).data
        y = rand(*fwd.shape)
        back = T.conv2d(Tensor(y), Tensor(k), stride=stride, transposed=True).data
        assert np.sum(fwd * y) == pytest.approx(np.sum(x * back), rel=1e-12)

    @pytest.mark.parametrize("stride,transposed", [(1, False), (2, False), (2, True), (1, True)])
    def test_grads(self, stride, transposed):
        kshape = (3, 3, 2, 3)
        xin = rand(1, 4, 5, 3 if transposed else 2)
        err = check_op_grad(lambda a, b: T.conv2d(a, b, stride=stride, transposed=transposed),
                            [xin, rand(*kshape)])
        assert err <= 1e-4

    @settings(max_examples=25, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), stride=st.sampled_from([1, 2]),
           k=st.sampled_from([1, 3, 5]))
    def test_output_extent_property(self, h, w, stride, k):
        out = T.conv2d(Tensor(np.ones((h, w, 1))), Tensor(np.ones((k, k, 1, 2))), stride=stride)
        assert out.shape == (-(-h // stride), -(-w // stride), 2)
