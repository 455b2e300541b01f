"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the recommender needs are provided.  Every op returns a
new :class:`Tensor` that remembers its parents and a closure computing the
parents' gradient contributions; :meth:`Tensor.backward` walks the graph in
reverse topological order.

Leaf tensors created by :meth:`harc.numerics.params.ParameterStore.leaf`
share their ``grad`` array with the store, so gradients land in the store
without a copy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from harc.errors import ShapeError

# When set, non-smooth ops append their branch decisions here so a
# finite-difference checker can tell when a perturbation crossed a kink.
_kink_log: list[bytes] | None = None


class record_kinks:
    """Context manager collecting the branch pattern of every non-smooth op."""

    def __enter__(self) -> list[bytes]:
        global _kink_log
        self._saved = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc) -> None:
        global _kink_log
        _kink_log = self._saved


def _log_branch(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(pattern.reshape(-1)).tobytes() if pattern.dtype == bool else pattern.tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: np.ndarray,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        self.data = data
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit seed needs a scalar")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        # intermediate buffers are dropped afterwards; leaves keep theirs
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    # operator sugar for the handful of elementwise ops used in losses
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, dtype=None) -> Tensor:
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("add", a.data, b.data)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("sub", a.data, b.data)
    out = Tensor(a.data - b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast("mul", a.data, b.data)
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, (x,))
    out._backward = lambda g: x._accumulate(2.0 * x.data * g)
    return out


def relu(x: Tensor) -> Tensor:
    _log_branch(x.data > 0)
    out = Tensor(np.maximum(x.data, 0), (x,))
    out._backward = lambda g: x._accumulate(g * (x.data > 0))
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor(y, (x,))
    out._backward = lambda g: x._accumulate(g * y * (1.0 - y))
    return out


# -- reductions --------------------------------------------------------------


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(axis=axis)), (x,))

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    out._backward = backward
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean()), (x,))
    out._backward = lambda g: x._accumulate(np.full_like(x.data, g / n))
    return out


# -- linear algebra / structure ---------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., n) and a 2-D ``w`` of shape (n, m)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError("matmul", x.shape, w.shape)
    out = Tensor(x.data @ w.data, (x, w))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            n = w.data.shape[0]
            w._accumulate(x.data.reshape(-1, n).T @ g.reshape(-1, g.shape[-1]))

    out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` fused into one node."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0] or b.shape != (w.data.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    out = Tensor(x.data @ w.data + b.data, (x, w, b))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, w.data.shape[0]).T @ g2)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    out._backward = backward
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError("concat", *(q.shape for q in parts))
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax), tuple(parts))
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    out._backward = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))
    out._backward = lambda g: x._accumulate(g.reshape(x.shape))
    return out


def gather(table: Tensor, index: np.ndarray, padding_idx: int | None = None) -> Tensor:
    """Row lookup ``table[index]``; rows at ``padding_idx`` receive no gradient."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(
            "gather", table.shape, index.shape,
            detail=f"index range [{index.min()}, {index.max()}] outside [0, {table.shape[0]})",
        )
    out = Tensor(table.data[index], (table,))

    def backward(g):
        flat = index.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        if padding_idx is not None:
            keep = flat != padding_idx
            flat, g2 = flat[keep], g2[keep]
        acc = np.zeros((table.shape[0], g2.shape[1]), dtype=g.dtype)
        np.add.at(acc, flat, g2)
        table._accumulate(acc.reshape(table.shape))

    out._backward = backward
    return out


def weighted_sum(weights: Tensor, entries: Tensor) -> Tensor:
    """Context vectors ``sum_j weights[b, j] * entries[b, j, :]``."""
    if entries.data.ndim != 3 or weights.shape != entries.shape[:2]:
        raise ShapeError("weighted_sum", weights.shape, entries.shape)
    out = Tensor(np.einsum("bh,bhd->bd", weights.data, entries.data), (weights, entries))

    def backward(g):
        if weights.requires_grad:
            weights._accumulate(np.einsum("bd,bhd->bh", g, entries.data))
        if entries.requires_grad:
            entries._accumulate(weights.data[:, :, None] * g[:, None, :])

    out._backward = backward
    return out


def window_unfold(x: Tensor, width: int) -> Tensor:
    """Sliding windows over axis 1 of a (N, L, C) tensor.

    The sequence is extended with ``width - 1`` zero rows so every position
    ``i`` in ``[0, L)`` starts a window; output shape is (N, L, width * C).
    """
    if x.data.ndim != 3 or width < 1:
        raise ShapeError("window_unfold", x.shape, detail=f"width={width}")
    n, length, c = x.shape
    padded = np.zeros((n, length + width - 1, c), dtype=x.dtype)
    padded[:, :length] = x.data
    win = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)[:, :length]
    # sliding_window_view yields (N, L, C, width); reorder to row-major windows
    data = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, length, width * c)
    out = Tensor(data, (x,))

    def backward(g):
        g4 = g.reshape(n, length, width, c)
        acc = np.zeros((n, length + width - 1, c), dtype=g.dtype)
        for k in range(width):
            acc[:, k : k + length] += g4[:, :, k]
        x._accumulate(acc[:, :length])

    out._backward = backward
    return out


# -- masked ops --------------------------------------------------------------


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to slots where ``mask`` is 1.

    Masked slots get exactly 0; a row with no unmasked slot is all zeros.
    Accepts raw arrays as well as tensors.
    """
    logits = as_tensor(logits)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if m.shape != logits.shape:
        raise ShapeError("masked_softmax", logits.shape, m.shape)
    z = np.where(m, logits.data, -np.inf)
    any_live = m.any(axis=-1, keepdims=True)
    row_max = np.where(any_live, z.max(axis=-1, keepdims=True, initial=-np.inf), 0)
    row_max = np.where(np.isfinite(row_max), row_max, 0)
    e = np.where(m, np.exp(np.where(m, logits.data - row_max, 0)), 0).astype(logits.dtype)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = Tensor(y, (logits,))

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        logits._accumulate(y * (g - dot))

    out._backward = backward
    return out


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of a (N, L, C) tensor, ignoring slots with mask 0.

    Rows with no live slot yield zeros.  Gradient goes to the first arg-max.
    """
    m = np.asarray(mask).astype(bool)
    if x.data.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError("masked_max", x.shape, m.shape)
    filled = np.where(m[:, :, None], x.data, -np.inf)
    arg = filled.argmax(axis=1)  # (N, C)
    _log_branch(arg)
    live = m.any(axis=1)
    vals = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]
    vals = np.where(live[:, None], vals, 0).astype(x.dtype)
    out = Tensor(vals, (x,))

    def backward(g):
        acc = np.zeros_like(x.data)
        gl = np.where(live[:, None], g, 0)
        np.put_along_axis(acc, arg[:, None, :], gl[:, None, :], axis=1)
        x._accumulate(acc)

    out._backward = backward
    return out


def bce(prob: Tensor, labels: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities; ``prob`` is clamped first."""
    y = np.asarray(labels, dtype=prob.dtype)
    if y.shape != prob.shape:
        raise ShapeError("bce", prob.shape, y.shape)
    p = np.clip(prob.data, clamp, 1.0 - clamp)
    _log_branch((prob.data > clamp) & (prob.data < 1.0 - clamp))
    n = max(p.size, 1)
    loss = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    out = Tensor(np.asarray(loss, dtype=prob.dtype), (prob,))

    def backward(g):
        inside = (prob.data > clamp) & (prob.data < 1.0 - clamp)
        dp = (-(y / p) + (1 - y) / (1 - p)) / n
        prob._accumulate(g * np.where(inside, dp, 0).astype(prob.dtype))

    out._backward = backward
    return out
