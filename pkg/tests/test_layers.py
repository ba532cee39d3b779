import numpy as np
import pytest

from caepl import models
from caepl.errors import ParameterError, ShapeError, SpecError
from caepl.layers import (LayerSpec, ModelGraph, bilinear_kernel, bn, conv, he_normal_init, simple,
                          tconv)
from caepl.tensor import RngStream, Tensor


@pytest.fixture
def small_graph():
    layers = [conv("c1", 4), bn("b1"), simple("r1", "relu"), simple("p1", "maxpool"),
              conv("c2", 4), tconv("up", 4, stride=2), simple("sum", "add", inputs=("up", "r1"))]
    return ModelGraph(layers, input_channels=3)


class TestGraph:
    def test_shapes_and_params(self, small_graph):
        g = small_graph.materialize()
        assert g.infer_shapes(8, 6)["sum"] == (4, 8, 6)
        shapes = g.param_shapes()
        assert shapes["c1.kernel"] == ((4, 3, 3, 3), True)
        assert shapes["up.kernel"] == ((4, 4, 4, 4), True)
        assert "up.bias" not in shapes
        assert shapes["b1.moving_mean"] == ((4,), False)

    def test_forward_matches_inferred_shape(self, small_graph):
        g = small_graph.materialize()
        he_normal_init(g, 0)
        out = g.forward(np.zeros((2, 3, 8, 6), np.float32))
        assert out.shape == (2,) + g.infer_shapes(8, 6)["sum"]

    def test_spec_round_trip(self, small_graph):
        g2 = ModelGraph.from_spec(small_graph.to_spec())
        assert g2.to_spec() == small_graph.to_spec()

    def test_validation(self):
        with pytest.raises(SpecError):
            ModelGraph([conv("a", 2), conv("a", 2)])
        with pytest.raises(SpecError):
            ModelGraph([conv("a", 2, inputs=("missing",))])
        with pytest.raises(SpecError):
            ModelGraph([conv("a", 2), conv("b", 3), simple("s", "add", inputs=("a", "b"))])
        with pytest.raises(SpecError):
            ModelGraph([LayerSpec("x", "dropout")])

    def test_input_check(self, small_graph):
        g = small_graph.materialize()
        with pytest.raises(ShapeError):
            g.forward(np.zeros((1, 2, 8, 8), np.float32))
        with pytest.raises(ShapeError):
            g.infer_shapes(7, 8)

    def test_unused_branch_not_executed(self):
        g = ModelGraph([conv("a", 2), conv("dead", 2, inputs=("input",)), simple("r", "relu", inputs=("a",))],
                       output="r").materialize()
        _, vals = g.forward(np.zeros((1, 3, 4, 4), np.float32), keep=True)
        assert "dead" not in vals

    def test_load_state_dict_errors(self, small_graph):
        g = small_graph.materialize()
        state = g.state_dict()
        state["c1.kernel"] = np.zeros((1, 1, 1, 1), np.float32)
        with pytest.raises(ShapeError):
            g.load_state_dict(state)
        with pytest.raises(SpecError):
            g.load_state_dict({})
        g.load_state_dict({"extra.kernel": np.zeros(1)}, strict=False)


class TestInit:
    def test_he_normal_statistics(self):
        model = models.build_variant("fcn", "toy").materialize()
        he_normal_init(model, 3)
        k = model.params["fcn.fc7.kernel"].data
        fan_in = k.shape[1] * k.shape[2] * k.shape[3]
        assert k.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.02)
        assert abs(k.mean()) < 0.05 * np.sqrt(2 / fan_in) * 10

    def test_per_name_streams(self):
        a = models.build_variant("fcn", "toy").materialize()
        b = models.build_variant("ae4l-fcn", "toy").materialize()
        he_normal_init(a, 7)
        he_normal_init(b, 7)
        np.testing.assert_array_equal(a.params["fcn.conv3_1.kernel"].data, b.params["fcn.conv3_1.kernel"].data)

    def test_policy_and_bn(self):
        model = models.build_variant("fcn", "toy").materialize()
        policy = he_normal_init(model, 0)
        assert policy["fcn.upscore8.kernel"] == "bilinear"
        assert policy["fcn.conv1_1.kernel"] == "he_normal"
        assert policy["fcn.conv1_1.bias"] == "zeros"
        np.testing.assert_array_equal(model.buffers["fcn.conv1_1_bn.moving_variance"], 1)

    def test_only_restricts(self):
        model = models.build_variant("fcn", "toy").materialize()
        he_normal_init(model, 0, only={"fcn.conv1_1"})
        assert model.params["fcn.conv1_1.kernel"].data.any()
        assert not model.params["fcn.conv1_2.kernel"].data.any()


class TestBilinear:
    def test_stride2_tent(self):
        k = bilinear_kernel(1, 1, 4, 2)
        np.testing.assert_allclose(k[0, 0], np.outer([0.25, 0.75, 0.75, 0.25], [0.25, 0.75, 0.75, 0.25]))

    def test_diagonal_only(self):
        k = bilinear_kernel(3, 3, 4, 2)
        assert not k[0, 1].any() and k[2, 2].any()

    def test_requires_k_eq_2s(self):
        with pytest.raises(ParameterError):
            bilinear_kernel(1, 1, 3, 2)

    def test_upsamples_constant_interior(self):
        from caepl import ops

        k = Tensor(bilinear_kernel(1, 1, 16, 8), dtype=np.float64)
        out = ops.transposed_conv2d(Tensor(np.ones((1, 1, 4, 4)), dtype=np.float64), k, stride=8).data
        np.testing.assert_allclose(out[0, 0, 8:-8, 8:-8], 1.0)


class TestRngStream:
    def test_reproducible_and_independent(self):
        a = RngStream(5).spawn(1, 2).normal((4,))
        b = RngStream(5).spawn(1, 2).normal((4,))
        c = RngStream(5).spawn(1, 3).normal((4,))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_state(self):
        r = RngStream(9).spawn(4)
        r.normal((2, 3))
        assert r.state() == {"seed": 9, "keys": [4], "algorithm": "PCG64", "draws": 6}
