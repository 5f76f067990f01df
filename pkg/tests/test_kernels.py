import os
import subprocess
import sys

import numpy as np
import pytest

from hpmi import kernels
from hpmi.kernels import _fallback

BACKENDS = kernels.available_backends()
BOUNDS = [((0, 12),), ((0, 4), (4, 8), (8, 12)), ((0, 4), (4, 12)), ((0, 8), (8, 12))]


@pytest.fixture(params=BACKENDS)
def backend(request):
    before = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(before)


def _data(seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((2, 5, 12)), rng.standard_normal(12), rng.standard_normal(12)


@pytest.mark.parametrize("bounds", BOUNDS)
def test_layer_norm_matches_reference(backend, bounds):
    x, g, b = _data()
    y, _, _ = kernels.layer_norm_fwd(x, g, b, 1e-5, bounds)
    ref = np.empty_like(x)
    for lo, hi in bounds:
        s = x[..., lo:hi]
        ref[..., lo:hi] = (s - s.mean(-1, keepdims=True)) / np.sqrt(s.var(-1, keepdims=True) + 1e-5) * g[lo:hi] + b[lo:hi]
    np.testing.assert_allclose(y, ref, atol=1e-12)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")
@pytest.mark.parametrize("bounds", BOUNDS)
def test_backends_agree(bounds):
    from hpmi.kernels import _ext

    x, g, b = _data(1)
    rows = x.reshape(-1, 12)
    gy = np.random.default_rng(2).standard_normal(rows.shape)
    for a, c in zip(_fallback.layer_norm_fwd(rows, g, b, 1e-5, bounds), _ext.layer_norm_fwd(rows, g, b, 1e-5, bounds)):
        np.testing.assert_allclose(a, c, atol=1e-13)
    _, xhat, rstd = _fallback.layer_norm_fwd(rows, g, b, 1e-5, bounds)
    for a, c in zip(_fallback.layer_norm_bwd(gy, xhat, rstd, g, bounds), _ext.layer_norm_bwd(gy, xhat, rstd, g, bounds)):
        np.testing.assert_allclose(a, c, atol=1e-12)
    np.testing.assert_allclose(_fallback.softmax_fwd(rows), _ext.softmax_fwd(rows), atol=1e-15)
    sm = _fallback.softmax_fwd(rows)
    np.testing.assert_allclose(_fallback.softmax_bwd(gy, sm), _ext.softmax_bwd(gy, sm), atol=1e-14)
    np.testing.assert_allclose(_fallback.gelu_fwd(rows), _ext.gelu_fwd(rows), atol=1e-14)
    np.testing.assert_allclose(_fallback.gelu_bwd(gy, rows), _ext.gelu_bwd(gy, rows), atol=1e-14)


def test_gelu_values(backend):
    x = np.array([[0.0, 1.0, -1.0, 3.0]])
    # x * Phi(x) with Phi(1) = 0.8413447460685429, Phi(3) = 0.9986501019683699
    np.testing.assert_allclose(kernels.gelu_fwd(x), [[0.0, 0.8413447460685429, -0.15865525393145707, 2.9959503059051097]],
                               atol=1e-14)


def test_softmax_large_values(backend):
    out = kernels.softmax_fwd(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 1.0


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_env_forces_fallback():
    env = dict(os.environ, HPMI_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import hpmi.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
