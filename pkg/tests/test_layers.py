import numpy as np
import pytest

from arch_spec import UnitSpec
from conftest import build_stacked, conv_unit, dense_unit
from errors import DomainError, ShapeMismatchError, StateError
from layers import (
    BasicUnit, Conv2dLayer, DenseLayer, FlattenLayer, Model, ResidualBlock, SoftmaxLayer, cross_entropy, layer_backward,
    model_backward, model_forward, relu, residual_forward, stacked_forward, unit_forward,
)
from tensor_ops import ConvGeometry, conv2d


def dense_counterpart_conv(layer):
    """把堆叠卷积层的单元权重放进块对角的全连接卷积权重中"""
    units = layer.units
    c_in = sum(u.spec.c_in for u in units)
    c_h = sum(u.spec.c_h for u in units)
    c_out = sum(u.spec.c_out for u in units)
    d = units[0].spec.kernel
    w_l, w_r = np.zeros((c_h, c_in, d, d)), np.zeros((c_out, c_h, d, d))
    b_l, b_r = np.zeros(c_h), np.zeros(c_out)
    i = h = o = 0
    for u in units:
        s = u.spec
        w_l[h:h + s.c_h, i:i + s.c_in] = u.w_l.value
        w_r[o:o + s.c_out, h:h + s.c_h] = u.w_r.value
        b_l[h:h + s.c_h] = u.b_l.value
        b_r[o:o + s.c_out] = u.b_r.value
        i, h, o = i + s.c_in, h + s.c_h, o + s.c_out
    return w_l, b_l, w_r, b_r


class TestStackedLayer:
    @pytest.mark.parametrize("seed", range(25))
    def test_block_diagonal_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        c_in_unit = int(rng.integers(1, 4))
        m = int(rng.integers(1, 6))
        c_h = int(rng.integers(1, 6))
        c_out_unit = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        unit = conv_unit(c_in_unit, c_h, c_out_unit, kernel=3, stride=stride)
        shape = (m * c_in_unit, 6, 6)
        layer = build_stacked([unit] * m, shape, seed=seed)
        for u in layer.units:
            u.b_l.value = rng.standard_normal(u.b_l.value.shape)
            u.b_r.value = rng.standard_normal(u.b_r.value.shape)
        x = rng.standard_normal((2,) + shape)
        w_l, b_l, w_r, b_r = dense_counterpart_conv(layer)
        hidden = relu(conv2d(x, w_l, b_l, ConvGeometry(3, stride, 1)))
        expected = relu(conv2d(hidden, w_r, b_r, ConvGeometry(3, 1, 1)))
        np.testing.assert_allclose(stacked_forward(layer, x), expected, atol=1e-10)

    def test_hybrid_units_match_block_diagonal(self, rng):
        units = [conv_unit(2, 4, 2), conv_unit(2, 4, 2), conv_unit(3, 2, 1), conv_unit(2, 4, 2)]
        layer = build_stacked(units, (9, 5, 5))
        assert len(layer.runs) == 3
        x = rng.standard_normal((3, 9, 5, 5))
        w_l, b_l, w_r, b_r = dense_counterpart_conv(layer)
        hidden = relu(conv2d(x, w_l, b_l, ConvGeometry(3, 1, 1)))
        expected = relu(conv2d(hidden, w_r, b_r, ConvGeometry(3, 1, 1)))
        out = layer.forward(x)
        assert out.shape == (3, 7, 5, 5)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_units_are_independent(self, rng):
        layer = build_stacked([conv_unit()] * 3, (6, 4, 4))
        x = rng.standard_normal((1, 6, 4, 4))
        before = layer.forward(x)
        layer.units[1].w_l.value = layer.units[1].w_l.value + 1.0
        after = layer.forward(x)
        np.testing.assert_array_equal(before[:, :2], after[:, :2])
        np.testing.assert_array_equal(before[:, 4:], after[:, 4:])

    def test_single_unit_equals_basic_unit(self, rng):
        layer = build_stacked([conv_unit(4, 3, 4)], (4, 5, 5))
        u = layer.units[0]
        unit = BasicUnit("copy", u.spec, u.w_l.value, u.w_r.value, u.b_l.value, u.b_r.value)
        x = rng.standard_normal((2, 4, 5, 5))
        np.testing.assert_allclose(stacked_forward(layer, x), unit_forward(unit, x), atol=1e-12)

    def test_dense_stacked_output_width(self, rng):
        layer = build_stacked([dense_unit(2, 4, 3)] * 4, (8,))
        assert layer.forward(rng.standard_normal((5, 8))).shape == (5, 12)
        assert layer.m == 4
        assert layer.input_sizes == [2, 2, 2, 2]

    def test_wrong_input_width(self, rng):
        layer = build_stacked([conv_unit()] * 2, (4, 4, 4))
        with pytest.raises(ShapeMismatchError):
            layer.forward(rng.standard_normal((1, 6, 4, 4)))

    def test_backward_before_forward(self):
        layer = build_stacked([conv_unit()] * 2, (4, 4, 4))
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 4, 4, 4)))

    def test_unit_weight_shape_checked(self):
        with pytest.raises(ShapeMismatchError):
            BasicUnit("u", UnitSpec(2, 4, 2), np.zeros((4, 2, 3, 3)), np.zeros((2, 2, 3, 3)))


class TestResidualAndModel:
    def test_identity_shortcut_with_zero_main(self, rng):
        conv = Conv2dLayer("c", np.zeros((3, 3, 3, 3)), np.zeros(3), padding=1, activation="identity")
        block = ResidualBlock("b", [conv])
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(residual_forward(block, x), relu(x))

    def test_mismatched_paths_rejected(self):
        conv = Conv2dLayer("c", np.zeros((4, 3, 3, 3)), padding=1)
        block = ResidualBlock("b", [conv])
        with pytest.raises(ShapeMismatchError):
            block.output_shape((3, 4, 4))

    def test_duplicate_parameter_names(self):
        a = DenseLayer("fc", np.zeros((4, 4)))
        b = DenseLayer("fc", np.zeros((4, 2)))
        with pytest.raises(ShapeMismatchError):
            Model([a, b], (4,))

    def test_static_shape_check(self):
        with pytest.raises(ShapeMismatchError):
            Model([FlattenLayer("flatten"), DenseLayer("fc", np.zeros((10, 2)))], (1, 3, 3))

    def test_locate_non_finite(self, rng):
        w = rng.standard_normal((4, 3))
        w[0, 0] = np.nan
        model = Model([DenseLayer("fc1", rng.standard_normal((4, 4))), DenseLayer("fc2", w, activation="identity")], (4,))
        assert model.locate_non_finite(np.abs(rng.standard_normal((2, 4))) + 1) == "fc2"
        assert model.locate_non_finite(np.full((1, 4), np.inf)) == "input"

    def test_softmax_layer_probabilities(self, rng):
        p = SoftmaxLayer("softmax").forward(rng.standard_normal((3, 4)))
        np.testing.assert_allclose(p.sum(axis=1), np.ones(3))

    def test_state_dict_round_trip(self, rng):
        model = Model([DenseLayer("fc", rng.standard_normal((3, 2)), np.zeros(2))], (3,))
        values = {k: v + 1.0 for k, v in model.state_dict().items()}
        model.load_state_dict(values)
        np.testing.assert_array_equal(model.state_dict()["fc.weight"], values["fc.weight"])

    def test_model_backward_equals_layer_by_layer(self, rng):
        model = Model([DenseLayer("fc1", rng.standard_normal((3, 4)), np.zeros(4)),
                       DenseLayer("fc2", rng.standard_normal((4, 2)), activation="identity")], (3,))
        x = rng.standard_normal((5, 3))
        grad = rng.standard_normal((5, 2))
        out = model_forward(model, x)
        model.zero_grad()
        model_backward(model, grad)
        expected = {p.name: p.grad.copy() for p in model.parameters()}

        model.zero_grad()
        np.testing.assert_array_equal(model_forward(model, x), out)
        layer_backward(model.layers[0], layer_backward(model.layers[1], grad))
        for p in model.parameters():
            np.testing.assert_array_equal(p.grad, expected[p.name])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = cross_entropy(np.zeros((4, 10)), np.arange(4))
        assert loss == pytest.approx(np.log(10))
        np.testing.assert_allclose(grad.sum(axis=1), np.zeros(4), atol=1e-12)

    def test_large_logits_are_stable(self):
        loss, _ = cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
