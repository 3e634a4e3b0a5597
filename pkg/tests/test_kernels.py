import numpy as np
import pytest

from hicyolo import _pykernels, kernels

from conftest import BACKENDS

compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def test_python_backend_always_available():
    assert "python" in kernels.available_backends()


def test_set_backend_returns_previous_and_rejects_unknown():
    start = kernels.BACKEND
    prev = kernels.set_backend("python")
    assert prev == start
    assert kernels.BACKEND == "python"
    kernels.set_backend(start)
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@compiled
@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (6, 2), (5, 3)])
def test_im2col_col2im_match(k, stride):
    from hicyolo import _ckernels

    rng = np.random.default_rng(k * 10 + stride)
    xp = rng.standard_normal((2, 3, 11, 13))
    ho, wo = (11 - k) // stride + 1, (13 - k) // stride + 1
    a = _pykernels.im2col(xp, k, stride, ho, wo)
    b = _ckernels.im2col(xp, k, stride, ho, wo)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape)
    np.testing.assert_allclose(
        _pykernels.col2im(cols, 3, 11, 13, k, stride, ho, wo),
        _ckernels.col2im(cols, 3, 11, 13, k, stride, ho, wo),
        rtol=0,
        atol=1e-13,
    )


@compiled
def test_maxpool_kernels_match_with_ties():
    from hicyolo import _ckernels

    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, size=(2, 3, 9, 9)).astype(np.float64)
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), constant_values=-np.inf)
    a, ia = _pykernels.maxpool_forward(xp, 5, 1, 9, 9)
    b, ib = _ckernels.maxpool_forward(xp, 5, 1, 9, 9)
    assert np.array_equal(a, b) and np.array_equal(ia, ib)
    g = rng.standard_normal(a.shape)
    assert np.allclose(_pykernels.maxpool_backward(g, ia, 13, 13), _ckernels.maxpool_backward(g, ib, 13, 13), atol=1e-13)


@compiled
@pytest.mark.parametrize("k,groups", [(1, 1), (3, 2), (5, 4), (3, 8)])
def test_involution_kernels_match(k, groups):
    from hicyolo import _ckernels

    rng = np.random.default_rng(k + groups)
    c, h = 8, 6
    xp = rng.standard_normal((2, c, h + k - 1, h + k - 1))
    ker = rng.standard_normal((2, groups * k * k, h, h))
    np.testing.assert_allclose(
        _pykernels.involution_forward(xp, ker, k, groups), _ckernels.involution_forward(xp, ker, k, groups), atol=1e-12
    )
    gy = rng.standard_normal((2, c, h, h))
    for a, b in zip(_pykernels.involution_backward(gy, xp, ker, k, groups), _ckernels.involution_backward(gy, xp, ker, k, groups)):
        np.testing.assert_allclose(a, b, atol=1e-12)
