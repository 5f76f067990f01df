"""Pure numpy implementations of the hot kernels.

Every function works on C-contiguous float64 arrays flattened to 2-D
``(rows, width)``; the dispatch module reshapes around them.
"""

import numpy as np
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def layer_norm_fwd(x, gamma, beta, eps, bounds):
    """Normalize each row independently inside every ``[lo, hi)`` segment.

    Returns ``(y, xhat, rstd)`` where ``rstd`` has one column per segment.
    """
    rows = x.shape[0]
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((rows, len(bounds)))
    for s, (lo, hi) in enumerate(bounds):
        seg = x[:, lo:hi]
        mean = seg.mean(axis=1, keepdims=True)
        cen = seg - mean
        var = (cen * cen).mean(axis=1, keepdims=True)
        r = 1.0 / np.sqrt(var + eps)
        xh = cen * r
        xhat[:, lo:hi] = xh
        y[:, lo:hi] = xh * gamma[lo:hi] + beta[lo:hi]
        rstd[:, s] = r[:, 0]
    return y, xhat, rstd


def layer_norm_bwd(gy, xhat, rstd, gamma, bounds):
    """Return ``(gx, ggamma, gbeta)`` for :func:`layer_norm_fwd`."""
    gx = np.empty_like(gy)
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    for s, (lo, hi) in enumerate(bounds):
        g = gy[:, lo:hi] * gamma[lo:hi]
        xh = xhat[:, lo:hi]
        n = hi - lo
        m1 = g.sum(axis=1, keepdims=True)
        m2 = (g * xh).sum(axis=1, keepdims=True)
        gx[:, lo:hi] = rstd[:, s:s + 1] * (g - (m1 + xh * m2) / n)
    return gx, ggamma, gbeta


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(gy, y):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_bwd(gy, x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)
