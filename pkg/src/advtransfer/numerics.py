"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives needed by the model zoo and the gradient attacks are
provided. Layout is batch-first (N, C, H, W). No broadcasting is performed
except for the bias add in ``dense`` and ``conv2d``.

The recorded graph lives on the tensors themselves: every non-leaf tensor
keeps references to its parents and a closure mapping its output gradient to
parent gradients. ``grad`` walks that graph once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward=backward)
    return Tensor(data, False, op=op)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def total(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _make(a.data.sum(), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` with x (N, D), w (D, K), b (K,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise ShapeError("dense", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ wd + b.data, "dense", (x, w, b), backward)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x (N, C, H, W), w (F, C, kh, kw), b (F,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if (x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]
            or b.shape != (w.shape[0],)):
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    n, c, h, wd_ = x.shape
    f, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd_ + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # im2col: one row per output location, built once and reused by backward
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = gmat.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd_] if padding else gxp
        return gx, gw, gb

    return _make(out, "conv2d", (x, w, b), backward)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2. Odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        blk = onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * h2, :2 * w2] = blk
        return (gx,)

    return _make(out, "max_pool2d", (x,), backward)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),))


def flatten(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError("flatten", x.shape)
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), "flatten", (x,), lambda g: (g.reshape(shape),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch. logits (N, K), labels (N,) ints."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = softmax(logits.data)

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _make(loss, "softmax_cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``wrt``.

    Tensors in ``wrt`` that the loss does not depend on get zero gradients.
    Raises ValueError for a non-scalar loss or a ``wrt`` tensor that does not
    track gradients.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ValueError(f"grad: loss must be scalar, got shape {loss.shape}")
    for t in wrt:
        if not t.requires_grad:
            raise ValueError(f"grad: tensor {t!r} is detached (requires_grad=False)")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    return {t: Tensor(grads.get(id(t), np.zeros(t.shape))) for t in wrt}
