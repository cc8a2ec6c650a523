import os
import subprocess
import sys

import numpy as np
import pytest

from dpsgd import backend
from dpsgd.accountant import DEFAULT_ORDERS

compiled_only = pytest.mark.skipif("compiled" not in backend.available(), reason="extension not built")


def test_fallback_always_available():
    assert "python" in backend.available()
    assert backend.get("python").BACKEND == "python"
    with pytest.raises(ValueError):
        backend.get("gpu")


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, DPSGD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from dpsgd import backend; print(backend.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@compiled_only
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_image_kernels_agree(dtype, stride, padding):
    py, c = backend.get("python"), backend.get("compiled")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 9, 8)).astype(dtype)
    w = rng.standard_normal((5, 4, 3, 3)).astype(dtype)
    tol = 1e-12 if dtype == np.float64 else 1e-4
    cols = c.im2col(x, 3, 3, stride, padding)
    np.testing.assert_allclose(cols, py.im2col(x, 3, 3, stride, padding), atol=tol)
    np.testing.assert_allclose(c.col2im(cols, x.shape, 3, 3, stride, padding),
                               py.col2im(cols, x.shape, 3, 3, stride, padding), atol=tol)
    np.testing.assert_allclose(c.conv2d_direct(x, w, stride, padding), py.conv2d_direct(x, w, stride, padding),
                               atol=tol * 10)
    oc, ac = c.max_pool2d(x, 2, 2)
    op, ap = py.max_pool2d(x, 2, 2)
    np.testing.assert_array_equal(oc, op)
    np.testing.assert_array_equal(ac, ap)
    g = rng.standard_normal(oc.shape).astype(dtype)
    np.testing.assert_allclose(c.max_pool2d_backward(g, ac, x.shape), py.max_pool2d_backward(g, ap, x.shape))


@compiled_only
@pytest.mark.parametrize("q,sigma", [(0.01, 1.5), (0.001, 0.5), (0.3, 4.0), (1024 / 1281167, 0.028)])
def test_log_a_agree(q, sigma):
    py, c = backend.get("python"), backend.get("compiled")
    for a in DEFAULT_ORDERS[::7]:
        if float(a).is_integer():
            x, y = c.log_a_int(q, sigma, int(a)), py.log_a_int(q, sigma, int(a))
        else:
            x, y = c.log_a_frac(q, sigma, a), py.log_a_frac(q, sigma, a)
        assert x == pytest.approx(y, rel=1e-10, abs=1e-12)
