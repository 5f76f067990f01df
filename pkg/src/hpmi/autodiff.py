"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are plain ``numpy.ndarray`` objects. Operations in this module accept
either arrays or :class:`Var` handles; when no argument is a ``Var`` they
simply compute the result, so the same model code serves inference and
training. When at least one argument is a ``Var`` the result is recorded on
that variable's :class:`Tape` and :meth:`Tape.backward` can later propagate
gradients to the marked parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NonFiniteError, ShapeError


@dataclass
class Node:
    kind: str
    inputs: tuple  # node ids, or None for constant operands
    value: np.ndarray
    vjp: Callable | None


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_ufunc__ = None  # ndarray <op> Var defers to the reflected Var method

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """An append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        arr = np.array(value, dtype=np.float64)
        var = self._push("param", arr, (), None)
        self.params[name] = var.id
        return var

    def leaf(self, value) -> Var:
        """An unnamed differentiable leaf (gradient available via ``backward(..., wrt=)``)."""
        return self._push("leaf", np.array(value, dtype=np.float64), (), None)

    def _push(self, kind, value, inputs, vjp) -> Var:
        ids = []
        for a in inputs:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ContractError("operands belong to different tapes")
                ids.append(a.id)
            else:
                ids.append(None)
        self.nodes.append(Node(kind, tuple(ids), value, vjp))
        return Var(self, len(self.nodes) - 1)

    def backward(self, loss: Var, wrt: Sequence[Var] = ()) -> dict:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters that do not reach the loss get exact zeros. Extra leaves
        listed in ``wrt`` are returned under their integer node id.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if src is None or gi is None:
                    continue
                if grads[src] is None:
                    grads[src] = gi
                else:
                    grads[src] = grads[src] + gi
        out = {}
        for name, pid in self.params.items():
            g = grads[pid] if pid < len(grads) else None
            out[name] = np.zeros_like(self.nodes[pid].value) if g is None else g
        for v in wrt:
            g = grads[v.id] if v.id < len(grads) else None
            out[v.id] = np.zeros_like(v.value) if g is None else g
        for name, g in out.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
        return out


def backward(tape: Tape, loss: Var) -> dict:
    return tape.backward(loss)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(kind, out, inputs, vjp):
    for a in inputs:
        if isinstance(a, Var):
            return a.tape._push(kind, out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def scale(a, c: float):
    out = value(a) * c
    return _record("scale", out, (a,), lambda g: (g * c,))


def square(a):
    va = value(a)
    return _record("square", va * va, (a,), lambda g: (2.0 * va * g,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(value(a))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a):
    va = value(a)
    out = kernels.gelu_fwd(va)
    return _record("gelu", out, (a,), lambda g: (kernels.gelu_bwd(g, va),))


# --- shape -----------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, numpy broadcasting over the rest."""
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {va.shape} and {vb.shape}")
    out = np.matmul(va, vb)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(vb, -1, -2)) if isinstance(a, Var) else None
        gb = np.matmul(np.swapaxes(va, -1, -2), g) if isinstance(b, Var) else None
        return (None if ga is None else _unbroadcast(ga, va.shape),
                None if gb is None else _unbroadcast(gb, vb.shape))

    return _record("matmul", out, (a, b), vjp)


def transpose(a, axes):
    inv = np.argsort(axes)
    out = np.transpose(value(a), axes)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    va = value(a)
    out = va.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(va.shape),))


def getitem(a, key):
    va = value(a)
    out = va[key]

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, key, g)
        return (full,)

    return _record("getitem", np.array(out), (a,), vjp)


def concat(parts, axis=-1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record("concat", out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


# --- reductions ------------------------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.asarray(va.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None):
    va = value(a)
    n = va.size if axis is None else va.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# --- fused neural-network ops -----------------------------------------------

def softmax(a):
    """Softmax over the last axis with max subtraction."""
    out = kernels.softmax_fwd(value(a))
    return _record("softmax", out, (a,), lambda g: (kernels.softmax_bwd(g, out),))


def softmax_rows(x):
    return softmax(x)


def layer_norm(x, gamma, beta, eps: float = 1e-5, bounds=None):
    """Layer normalization over the last axis.

    ``bounds`` is a sequence of ``(lo, hi)`` feature ranges that are
    normalized independently; ``None`` means one range covering the width.
    """
    vx = value(x)
    d = vx.shape[-1]
    if bounds is None:
        bounds = ((0, d),)
    vg = value(gamma)
    out, xhat, rstd = kernels.layer_norm_fwd(vx, vg, value(beta), eps, bounds)

    def vjp(g):
        gx, gg, gb = kernels.layer_norm_bwd(g, xhat, rstd, vg, bounds)
        return gx.reshape(vx.shape), gg, gb

    return _record("layer_norm", out, (x, gamma, beta), vjp)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    vl = value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = vl.shape[0]
    z = vl - vl.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    out = np.asarray(np.mean(lse - z[np.arange(n), labels]))

    def vjp(g):
        p = kernels.softmax_fwd(vl)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _record("cross_entropy", out, (logits,), vjp)


# --- gradient oracle -------------------------------------------------------

def grad_check(fn, params: dict, step: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``fn(params)`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every entry
    of every parameter.
    """
    tape = Tape()
    handles = {k: tape.param(k, v) for k, v in params.items()}
    analytic = tape.backward(fn(handles))
    worst = 0.0
    for name, base in params.items():
        base = np.array(base, dtype=np.float64)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(value(fn({**params, name: base})))
            flat[j] = orig - step
            down = float(value(fn({**params, name: base})))
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
