import numpy as np
import pytest

from caepl import _kernels_py, kernels

ck = pytest.importorskip("caepl._ckernels")

SHAPES = [((2, 3, 7, 6), 3, 1, 1), ((1, 2, 8, 8), 2, 2, 0), ((3, 1, 5, 9), 4, 2, 1), ((2, 4, 6, 6), 1, 1, 0)]


class TestBackendsAgree:
    @pytest.mark.parametrize("shape,k,stride,pad", SHAPES)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_im2col_bitwise(self, shape, k, stride, pad, dtype):
        x = np.random.default_rng(0).standard_normal(shape).astype(dtype)
        np.testing.assert_array_equal(ck.im2col(x, k, k, stride, pad), _kernels_py.im2col(x, k, k, stride, pad))

    @pytest.mark.parametrize("shape,k,stride,pad", SHAPES)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_col2im_bitwise(self, shape, k, stride, pad, dtype):
        rng = np.random.default_rng(1)
        cols = _kernels_py.im2col(rng.standard_normal(shape).astype(dtype), k, k, stride, pad)
        cols = rng.standard_normal(cols.shape).astype(dtype)
        np.testing.assert_array_equal(ck.col2im(cols, shape, k, k, stride, pad),
                                      _kernels_py.col2im(cols, shape, k, k, stride, pad))

    def test_maxpool_bitwise_with_ties(self):
        x = np.random.default_rng(2).integers(0, 3, size=(2, 3, 6, 8)).astype(np.float32)
        o1, i1 = ck.maxpool2x2_forward(x)
        o2, i2 = _kernels_py.maxpool2x2_forward(x)
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(i1, i2)
        g = np.random.default_rng(3).standard_normal(o1.shape).astype(np.float32)
        np.testing.assert_array_equal(ck.maxpool2x2_backward(g, i1, x.shape),
                                      _kernels_py.maxpool2x2_backward(g, i2, x.shape))


@pytest.mark.parametrize("shape,k,stride,pad", SHAPES)
def test_col2im_is_adjoint_of_im2col(backend, shape, k, stride, pad):
    rng = np.random.default_rng(4)
    x = rng.standard_normal(shape)
    cols = kernels.im2col(x, k, k, stride, pad)
    y = rng.standard_normal(cols.shape)
    lhs = np.vdot(cols, y)
    rhs = np.vdot(x, kernels.col2im(y, shape, k, k, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_tie_rule_first_index_wins(backend):
    x = np.ones((1, 1, 2, 2))
    _, idx = kernels.maxpool2x2_forward(x)
    assert idx[0, 0, 0, 0] == 0
    g = kernels.maxpool2x2_backward(np.ones((1, 1, 1, 1)), idx, x.shape)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")
