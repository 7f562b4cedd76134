import os
import subprocess
import sys

import numpy as np
import pytest

from deformer import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba path disabled or not installed")

SHAPES = [(1, 1), (3, 7), (64, 33), (5, 512)]


def _x(shape, dtype, seed=0):
    return np.ascontiguousarray(np.random.default_rng(seed).standard_normal(shape).astype(dtype) * 4)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
@pytest.mark.parametrize("shape", SHAPES)
def test_forward_kernels_agree(shape, dtype, tol):
    x = _x(shape, dtype)
    for name in ("softmax_rows", "log_softmax_rows", "logsumexp_rows"):
        a = getattr(K, "nb_" + name)(x)
        b = getattr(K, "np_" + name)(x)
        assert a.dtype == b.dtype == dtype
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol, err_msg=name)
    for a, b in zip(K.nb_layer_norm_rows(x, 1e-5), K.np_layer_norm_rows(x, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
@pytest.mark.parametrize("shape", SHAPES)
def test_backward_kernels_agree(shape, dtype, tol):
    x, g = _x(shape, dtype, 1), _x(shape, dtype, 2)
    y = K.np_softmax_rows(x)
    np.testing.assert_allclose(K.nb_softmax_rows_backward(y, g), K.np_softmax_rows_backward(y, g), rtol=tol, atol=tol)
    xhat, inv = K.np_layer_norm_rows(x, 1e-5)
    np.testing.assert_allclose(K.nb_layer_norm_rows_backward(xhat, inv, g),
                               K.np_layer_norm_rows_backward(xhat, inv, g), rtol=tol, atol=10 * tol)


def test_extreme_rows_stay_finite():
    x = np.array([[1e300, -1e300, 0.0], [-1e9, -1e9, 5.0]])
    for impl in (K.nb_softmax_rows, K.np_softmax_rows):
        p = impl(x)
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_environment_flag_selects_numpy():
    code = "from deformer import _kernels as K; print(K.backend(), K.softmax_rows is K.np_softmax_rows)"
    env = dict(os.environ, DEFORMER_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == ["numpy", "True"]
    assert K.backend() == "numba"
