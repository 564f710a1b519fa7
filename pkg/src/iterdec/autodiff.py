"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operation that
produced it.  Calling :meth:`Tensor.backward` on a scalar loss walks the
recorded tape in reverse topological order and accumulates gradients into
every reachable tensor with ``requires_grad`` set.  The tape is released
afterwards, so each forward pass supports exactly one backward pass.

Only the operations needed by an encoder-decoder transformer are provided.
Losses are fused (softmax plus reduction in one node) for numerical
stability.  All operations preserve the dtype of their inputs; build the
graph from float64 arrays when high-precision gradients are required.
"""

from __future__ import annotations

import contextlib

import numpy as np


class AutodiffError(Exception):
    """Raised for invalid graph operations or non-finite values."""


_DEBUG_NAN = False
_NO_GRAD = False


def set_debug_nan(enabled):
    """Toggle NaN checks on every forward result and gradient."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Context manager that disables tape recording inside its block."""
    global _NO_GRAD
    saved = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = saved


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward_fn = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self):
        """Backpropagate from this scalar and release the tape."""
        if self._released:
            raise AutodiffError("graph already released; rerun the forward pass before backward")
        if not self.requires_grad:
            raise AutodiffError("backward on a tensor that does not require grad")
        if self.data.size != 1:
            raise AutodiffError(f"backward requires a scalar, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward_fn is None or node.grad is None:
                continue
            if _DEBUG_NAN and np.any(np.isnan(node.grad)):
                raise AutodiffError(f"NaN gradient at op {node.op!r}")
            node._backward_fn(node.grad)
            node._backward_fn = None
            node._parents = ()
            node._released = True
            node.grad = None

    # Arithmetic sugar so model code reads like the math it implements.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(np.asarray(data), requires_grad=True, op=f"param:{name}")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root):
    """Return nodes reachable from root, root first, parents after children."""
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        child = next(parents, None)
        if child is None:
            stack.pop()
            order.append(node)
            continue
        if id(child) not in seen:
            seen.add(id(child))
            stack.append((child, iter(child._parents)))
    order.reverse()
    return order


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad = tensor.grad + grad


def _make(data, op, parents, backward_fn):
    """Create a result tensor, recording the tape unless grads are off."""
    if _DEBUG_NAN and np.any(np.isnan(data)):
        raise AutodiffError(f"NaN produced by op {op!r}")
    needs = not _NO_GRAD and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to shape, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def matmul(a, b):
    """Batched matrix product with broadcasting over leading axes."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    b = _as_tensor(b, a.dtype)
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, "matmul", (a, b), backward)


def relu(x):
    data = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(data, "relu", (x,), backward)


def sigmoid(x):
    data = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60, 60)))

    def backward(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, "sigmoid", (x,), backward)


def log(x):
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(data, "log", (x,), backward)


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, "reshape", (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(data, "transpose", (x,), backward)


def tensor_sum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(data, "sum", (x,), backward)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _make(data, "softmax", (x,), backward)


def masked_fill(x, mask, value):
    """Replace entries where mask is True with a constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def backward(g):
        _accumulate(x, np.where(mask, 0, g))

    return _make(data, "masked_fill", (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    data = gamma.data * norm + beta.data
    n = x.shape[-1]

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * norm).sum(axis=reduce_axes))
        _accumulate(beta, g.sum(axis=reduce_axes))
        gn = g * gamma.data
        gx = inv_std * (
            gn
            - gn.mean(axis=-1, keepdims=True)
            - norm * (gn * norm).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, gx)

    return _make(data, "layer_norm", (x, gamma, beta), backward)


def embedding(table, ids):
    """Gather rows of table by integer ids of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutodiffError(f"embedding id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    return _make(data, "embedding", (table,), backward)


def dropout(x, rate, rng):
    """Inverted dropout; returns x untouched when rate is zero."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    data = x.data * keep

    def backward(g):
        _accumulate(x, g * keep)

    return _make(data, "dropout", (x,), backward)


def relative_scores(queries, table, labels):
    """Query-position-dependent additive attention scores.

    queries has shape (B, H, Tq, Dh), table (L, Dh), and labels (Tq, Tk)
    holds row indices into the table.  Returns (B, H, Tq, Tk) where entry
    [b, h, q, k] is the dot product of queries[b, h, q] with
    table[labels[q, k]].
    """
    labels = np.asarray(labels)
    rel = table.data[labels]
    data = np.einsum("bhqd,qkd->bhqk", queries.data, rel, optimize=True)

    def backward(g):
        gq = np.einsum("bhqk,qkd->bhqd", g, rel, optimize=True)
        _accumulate(queries, gq)
        contrib = np.einsum("bhqk,bhqd->qkd", g, queries.data, optimize=True)
        full = np.zeros_like(table.data)
        np.add.at(full, labels.reshape(-1), contrib.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    return _make(data, "relative_scores", (queries, table), backward)


def relative_values(weights, table, labels):
    """Query-position-dependent additive attention values.

    weights has shape (B, H, Tq, Tk), table (L, Dh), labels (Tq, Tk).
    Returns (B, H, Tq, Dh) adding table[labels[q, k]] weighted by the
    attention weight at [b, h, q, k].
    """
    labels = np.asarray(labels)
    rel = table.data[labels]
    data = np.einsum("bhqk,qkd->bhqd", weights.data, rel, optimize=True)

    def backward(g):
        gw = np.einsum("bhqd,qkd->bhqk", g, rel, optimize=True)
        _accumulate(weights, gw)
        contrib = np.einsum("bhqk,bhqd->qkd", weights.data, g, optimize=True)
        full = np.zeros_like(table.data)
        np.add.at(full, labels.reshape(-1), contrib.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    return _make(data, "relative_values", (weights, table), backward)


def _smoothed_targets(targets, vocab_size, smoothing, dtype):
    flat = np.asarray(targets).reshape(-1)
    q = np.full((flat.size, vocab_size), smoothing / vocab_size, dtype=dtype)
    q[np.arange(flat.size), flat] += 1.0 - smoothing
    return q


def cross_entropy(logits, targets, pad_mask, smoothing=0.0):
    """Mean label-smoothed cross-entropy over unmasked positions.

    logits has shape (..., V); targets and pad_mask share the leading
    shape, with pad_mask True at positions that count toward the loss.
    Smoothing mass is spread uniformly over the full vocabulary.
    """
    vocab = logits.shape[-1]
    mask = np.asarray(pad_mask, dtype=bool).reshape(-1)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise AutodiffError("empty batch: every target position is masked")
    flat = logits.data.reshape(-1, vocab)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    q = _smoothed_targets(targets, vocab, smoothing, flat.dtype)
    per_pos = -(q * log_probs).sum(axis=-1)
    data = np.asarray((per_pos * mask).sum() / n_valid, dtype=flat.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        grad = (probs - q) * (mask[:, None].astype(flat.dtype) / n_valid)
        _accumulate(logits, (g * grad).reshape(logits.shape))

    return _make(data, "cross_entropy", (logits,), backward)


def nll_from_probs(probs, targets, pad_mask, smoothing=0.0, eps=1e-12):
    """Mean label-smoothed negative log likelihood of given probabilities.

    Like :func:`cross_entropy` but takes already-normalized probabilities,
    as produced by a mixture of softmax and copy distributions.
    """
    vocab = probs.shape[-1]
    mask = np.asarray(pad_mask, dtype=bool).reshape(-1)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise AutodiffError("empty batch: every target position is masked")
    flat = probs.data.reshape(-1, vocab)
    q = _smoothed_targets(targets, vocab, smoothing, flat.dtype)
    per_pos = -(q * np.log(flat + eps)).sum(axis=-1)
    data = np.asarray((per_pos * mask).sum() / n_valid, dtype=flat.dtype)

    def backward(g):
        grad = -(q / (flat + eps)) * (mask[:, None].astype(flat.dtype) / n_valid)
        _accumulate(probs, (g * grad).reshape(probs.shape))

    return _make(data, "nll_from_probs", (probs,), backward)
