import numpy as np
import pytest

from errors import GeometryError, PartitionError, ShapeMismatchError
from grad_check import numerical_grad, relative_error
from tensor_ops import (
    ConvGeometry, channel_concat, channel_split, col2im, conv2d, conv2d_backward, conv2d_direct,
    global_avg_pool, grouped_matmul, grouped_matmul_backward, im2col, max_pool2d, max_pool2d_backward,
    relu, relu_backward, softmax,
)


class TestConvGeometry:
    def test_same_padding_keeps_size(self):
        assert ConvGeometry(3, 1, 1).output_size(32, 32) == (32, 32)

    def test_stride_two_halves(self):
        assert ConvGeometry(3, 2, 1).output_size(32, 32) == (16, 16)

    def test_kernel_larger_than_input(self):
        with pytest.raises(GeometryError):
            ConvGeometry(5).output_size(3, 3)

    @pytest.mark.parametrize("kwargs", [{"kernel": 0}, {"kernel": 3, "stride": 0}, {"kernel": 3, "padding": -1},
                                        {"kernel": 3, "groups": 0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(GeometryError):
            ConvGeometry(**kwargs)


class TestConv2d:
    @pytest.mark.parametrize("c_in,c_out,groups,kernel,stride,padding", [
        (4, 6, 1, 3, 1, 1),
        (4, 8, 2, 3, 1, 1),
        (6, 6, 3, 3, 2, 1),
        (8, 16, 4, 1, 1, 0),
        (2, 4, 2, 5, 2, 2),
    ])
    def test_im2col_matches_direct(self, rng, c_in, c_out, groups, kernel, stride, padding):
        geom = ConvGeometry(kernel, stride, padding, groups)
        x = rng.standard_normal((2, c_in, 7, 7))
        w = rng.standard_normal((c_out, c_in // groups, kernel, kernel))
        b = rng.standard_normal(c_out)
        np.testing.assert_allclose(conv2d(x, w, b, geom), conv2d_direct(x, w, b, geom), atol=1e-10)

    def test_grouped_equals_concatenated_groups(self, rng):
        x = rng.standard_normal((3, 4, 6, 6))
        w = rng.standard_normal((6, 2, 3, 3))
        out = conv2d(x, w, None, ConvGeometry(3, 1, 1, 2))
        first = conv2d(x[:, :2], w[:3], None, ConvGeometry(3, 1, 1))
        second = conv2d(x[:, 2:], w[3:], None, ConvGeometry(3, 1, 1))
        np.testing.assert_allclose(out, np.concatenate([first, second], axis=1), atol=1e-12)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d(x, w, None, ConvGeometry(1)), x)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            conv2d(rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((4, 2, 3, 3)), None, ConvGeometry(3))

    def test_backward_matches_finite_differences(self, rng):
        geom = ConvGeometry(3, 2, 1, 2)
        x = rng.standard_normal((2, 4, 5, 5))
        w = rng.standard_normal((4, 2, 3, 3))
        direction = rng.standard_normal(conv2d(x, w, None, geom).shape)

        def objective():
            return float(np.sum(conv2d(x, w, None, geom) * direction))

        grad_x, grad_w, grad_b = conv2d_backward(x, w, direction, geom)
        assert relative_error(grad_x, numerical_grad(objective, x)) < 1e-6
        assert relative_error(grad_w, numerical_grad(objective, w)) < 1e-6
        np.testing.assert_allclose(grad_b, direction.sum(axis=(0, 2, 3)))

    def test_col2im_is_adjoint_of_im2col(self, rng):
        geom = ConvGeometry(3, 1, 1, 2)
        x = rng.standard_normal((1, 4, 4, 4))
        cols = im2col(x, geom)
        c = rng.standard_normal(cols.shape)
        # <im2col(x), c> == <x, col2im(c)>
        assert np.isclose(np.sum(cols * c), np.sum(x * col2im(c, x.shape, geom)))


class TestGroupedMatmul:
    def test_equals_block_diagonal_matmul(self, rng):
        w = rng.standard_normal((3, 2, 4))
        x = rng.standard_normal((5, 6))
        dense = np.zeros((6, 12))
        for k in range(3):
            dense[2 * k:2 * k + 2, 4 * k:4 * k + 4] = w[k]
        np.testing.assert_allclose(grouped_matmul(x, w), x @ dense, atol=1e-12)

    def test_backward(self, rng):
        w = rng.standard_normal((2, 3, 2))
        x = rng.standard_normal((4, 6))
        direction = rng.standard_normal((4, 4))
        grad_x, grad_w = grouped_matmul_backward(x, w, direction)
        objective = lambda: float(np.sum(grouped_matmul(x, w) * direction))
        assert relative_error(grad_x, numerical_grad(objective, x)) < 1e-6
        assert relative_error(grad_w, numerical_grad(objective, w)) < 1e-6

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            grouped_matmul(rng.standard_normal((2, 5)), rng.standard_normal((2, 2, 2)))


class TestChannels:
    def test_split_then_concat_restores(self, rng):
        x = rng.standard_normal((2, 7, 3, 3))
        pieces = channel_split(x, [2, 4, 1])
        assert [p.shape[1] for p in pieces] == [2, 4, 1]
        np.testing.assert_array_equal(channel_concat(pieces), x)

    def test_split_sizes_must_cover_channels(self, rng):
        with pytest.raises(PartitionError):
            channel_split(rng.standard_normal((1, 6, 2, 2)), [2, 2])

    def test_concat_spatial_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            channel_concat([np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 4))])


class TestPoolingAndActivations:
    def test_max_pool_known_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, _ = max_pool2d(x, 2)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_padding_never_selected(self):
        x = -np.ones((1, 1, 3, 3))
        out, _ = max_pool2d(x, 3, 2, padding=1)
        np.testing.assert_array_equal(out, -np.ones((1, 1, 2, 2)))

    def test_max_pool_padding_too_large(self):
        with pytest.raises(GeometryError):
            max_pool2d(np.zeros((1, 1, 4, 4)), 2, 2, padding=2)

    def test_max_pool_backward_routes_to_argmax(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        _, argmax = max_pool2d(x, 2)
        grad = max_pool2d_backward(np.ones((1, 1, 2, 2)), argmax, x.shape, 2)
        expected = np.zeros((4, 4))
        expected[[1, 1, 3, 3], [1, 3, 1, 3]] = 1
        np.testing.assert_array_equal(grad[0, 0], expected)

    def test_global_avg_pool(self):
        x = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
        np.testing.assert_allclose(global_avg_pool(x), [[1.5, 5.5]])

    def test_relu_and_backward(self):
        x = np.array([-1.0, 0.0, 2.0])
        y = relu(x)
        np.testing.assert_array_equal(y, [0, 0, 2])
        np.testing.assert_array_equal(relu_backward(y, np.ones(3)), [0, 0, 1])

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.standard_normal((4, 5)) * 50)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(4))
        assert np.all(p >= 0)
