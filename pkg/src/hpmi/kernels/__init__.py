"""Hot numerical kernels with a compiled backend and a numpy fallback.

The Cython extension ``_ext`` is used when it was built at install time.
Set ``HPMI_PURE_PYTHON=1`` to force the numpy fallback. The public
functions accept arrays of any rank and operate on the last axis.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("HPMI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def use_backend(name: str) -> None:
    """Switch backends at runtime (used by the benchmark and tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from . import _ext

        _impl, BACKEND = _ext, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _ext  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])


def layer_norm_fwd(x, gamma, beta, eps, bounds):
    shape = x.shape
    y, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gamma, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64), float(eps), bounds)
    return y.reshape(shape), xhat, rstd


def layer_norm_bwd(gy, xhat, rstd, gamma, bounds):
    shape = gy.shape
    gx, gg, gb = _impl.layer_norm_bwd(
        _rows(gy), xhat, rstd, np.ascontiguousarray(gamma, dtype=np.float64), bounds)
    return gx.reshape(shape), gg, gb


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(gy, y):
    return _impl.softmax_bwd(_rows(gy), _rows(y)).reshape(y.shape)


def gelu_fwd(x):
    return _impl.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_bwd(gy, x):
    return _impl.gelu_bwd(_rows(gy), _rows(x)).reshape(x.shape)
