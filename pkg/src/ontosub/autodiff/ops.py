"""Differentiable ops. Every adjoint here is checked against central differences in the tests."""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import Tensor, as_tensor, record

LAYER_NORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes (both inputs rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, idx) -> Tensor:
    """``a[idx]`` for any numpy index; repeated indices accumulate on the way back."""
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not tensors")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record("take", a.data[idx], (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D table by integer index array of any shape -> ``idx.shape + (cols,)``."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        return (out,)

    return record("gather_rows", a.data[idx], (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    return record("concat", data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / n)


def mean_pool(a: Tensor, axis: int = -2) -> Tensor:
    return mean(a, axis=axis)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax_row(a: Tensor, clamp: tuple[float, float] | None = (-5.0, 5.0), mask: np.ndarray | None = None,
                axis: int = -1, trace: list | None = None) -> Tensor:
    """Softmax along ``axis`` after clamping logits into ``clamp``.

    ``mask`` (broadcastable, truthy = attend) removes entries; every row needs
    at least one unmasked entry. When ``trace`` is a list the clamped logits
    and weights are appended to it.
    """
    x = a.data
    if clamp is not None:
        lo, hi = clamp
        z = np.clip(x, lo, hi)
        inside = (x >= lo) & (x <= hi)
    else:
        z, inside = x, None
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        zm = np.where(mask, z, -np.inf)
    else:
        zm = z
    zmax = np.max(zm, axis=axis, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("softmax_row: a row has every entry masked")
    e = np.exp(zm - zmax)
    p = e / e.sum(axis=axis, keepdims=True)
    if trace is not None:
        trace.append({"logits": np.where(mask, z, 0.0) if mask is not None else z, "mask": mask, "weights": p})

    def bw(g):
        gz = p * (g - np.sum(g * p, axis=axis, keepdims=True))
        return (gz * inside if inside is not None else gz,)

    return record("softmax_row", p, (a,), bw)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return record("layer_norm", y, (a,), bw)


def l2_normalize_row(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    y = x / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return record("l2_normalize_row", y, (a,), bw)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum(y * log_softmax(logits))``."""
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"cross_entropy: shape mismatch {logits.shape} vs {y.shape}")
    n = y.reshape(-1, y.shape[-1]).shape[0]
    ls = log_softmax(logits.data)
    loss = -(y * ls).sum() / n

    def bw(g):
        return (g * (np.exp(ls) * y.sum(axis=-1, keepdims=True) - y) / n,)

    return record("cross_entropy", np.array(loss), (logits,), bw)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE of ``sigmoid(logits)`` against ``targets`` in [0, 1], computed stably from logits."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"binary_cross_entropy: shape mismatch {logits.shape} vs {t.shape}")
    z = logits.data
    n = builtins.max(z.size, 1)
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def bw(g):
        return (g * (_sigmoid(z) - t) / n,)

    return record("binary_cross_entropy", np.array(loss), (logits,), bw)
