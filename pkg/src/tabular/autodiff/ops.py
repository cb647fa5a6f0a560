"""Differentiable primitives over :class:`DTensor`.

Elementwise binary ops broadcast like numpy and reduce gradients back to
each operand's shape.
"""

from __future__ import annotations

import numpy as np

from tabular.autodiff import gradcheck
from tabular.autodiff.tensor import DTensor, as_tensor
from tabular.errors import DegenerateBatch, IndexOutOfRange, ShapeMismatch


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return DTensor._from_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return DTensor._from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return DTensor._from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> DTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return DTensor._from_op(out, (a, b), vjp, "div")


def neg(a) -> DTensor:
    a = as_tensor(a)
    return DTensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> DTensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return DTensor._from_op(a.data**exponent, (a,), vjp, "pow")


def exp(a) -> DTensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return DTensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DTensor:
    a = as_tensor(a)
    return DTensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def matmul(a, b) -> DTensor:
    """Matrix product with numpy batching rules (no 1-d operands)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return DTensor._from_op(a.data @ b.data, (a, b), vjp, "matmul")


def affine(x, W, b=None) -> DTensor:
    """``x @ W + b`` with the bias broadcast over rows."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0] or W.ndim != 2:
        raise ShapeMismatch(f"affine: input width {x.shape[-1]} does not match weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"affine: bias shape {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data
    if b is None:
        parents = (x, W)
    else:
        out = out + b.data
        parents = (x, W, b)

    def vjp(g):
        gx = g @ W.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return DTensor._from_op(out, parents, vjp, "affine")


# -- reductions & reshaping -----------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> DTensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return DTensor._from_op(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> DTensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> DTensor:
    a = as_tensor(a)
    return DTensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DTensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return DTensor._from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def getitem(a, key) -> DTensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return DTensor._from_op(np.asarray(a.data[key]), (a,), vjp, "getitem")


def concat(tensors, axis: int = -1) -> DTensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return DTensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


# -- activations -----------------------------------------------------------


def relu(a) -> DTensor:
    a = as_tensor(a)
    active = a.data > 0  # subgradient 0 at the kink
    if gradcheck._monitors:
        gradcheck.report_kink(a.data, active)
    return DTensor._from_op(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> DTensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return DTensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def glu(a) -> DTensor:
    """Gated linear unit over the last axis: ``a[..., :k] * sigmoid(a[..., k:])``."""
    a = as_tensor(a)
    width = a.shape[-1]
    if width % 2:
        raise ShapeMismatch(f"glu needs an even final dimension, got {width}")
    k = width // 2
    lin, gate = a.data[..., :k], a.data[..., k:]
    s = _sigmoid(gate)

    def vjp(g):
        return (np.concatenate([g * s, g * lin * s * (1.0 - s)], axis=-1),)

    return DTensor._from_op(lin * s, (a,), vjp, "glu")


def softmax(a) -> DTensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return DTensor._from_op(p, (a,), vjp, "softmax")


softmax_rows = softmax


def log_softmax(a) -> DTensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return DTensor._from_op(out, (a,), vjp, "log_softmax")


# -- layers ----------------------------------------------------------------


def embedding_lookup(table, indices) -> DTensor:
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeMismatch(f"embedding indices must be 1-d, got shape {idx.shape}")
    size = table.shape[0]
    bad = np.flatnonzero((idx < 0) | (idx >= size))
    if bad.size:
        pos = int(bad[0])
        raise IndexOutOfRange(pos, int(idx[pos]), size)
    idx = idx.astype(np.intp)

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return DTensor._from_op(table.data[idx], (table,), vjp, "embedding")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> DTensor:
    """Per-column batch normalisation of an ``[m, n]`` input.

    In training mode the batch mean and population variance are used and
    ``running_mean``/``running_var`` are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeMismatch(f"batch_norm expects [rows, cols], got {x.shape}")
    m = x.shape[0]
    if training:
        if m < 2:
            raise DegenerateBatch(f"batch norm in training mode needs at least 2 rows, got {m}")
        gradcheck.report_batch_columns(x.data)
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return DTensor._from_op(out, (x, gamma, beta), vjp, "batch_norm")


def dropout(a, p: float, training: bool, rng: np.random.Generator | None) -> DTensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return DTensor._from_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- losses ----------------------------------------------------------------


def cross_entropy_logits(logits, targets) -> DTensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    t = np.asarray(targets).astype(np.intp).reshape(-1)
    m, c = logits.shape
    if t.shape[0] != m:
        raise ShapeMismatch(f"{m} rows of logits but {t.shape[0]} targets")
    bad = np.flatnonzero((t < 0) | (t >= c))
    if bad.size:
        pos = int(bad[0])
        raise IndexOutOfRange(pos, int(t[pos]), c)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = np.mean(lse - z[rows, t])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (g * p / m,)

    return DTensor._from_op(np.asarray(loss), (logits,), vjp, "cross_entropy")


def mse(pred, target) -> DTensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        d = g * 2.0 * diff / n
        return d, -d

    return DTensor._from_op(np.asarray(np.mean(diff * diff)), (pred, target), vjp, "mse")
