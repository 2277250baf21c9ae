"""Reverse-mode autodiff over float64 numpy buffers.

Ops build a DAG of Tensor nodes; ``Tensor.backward()`` runs a topological
sweep accumulating exact gradients of a scalar loss into every node with
``requires_grad``. Gradients sum across shared subexpressions.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError, ValidationError

DROPOUT_MODES = ("train", "eval", "mc")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValidationError(f"backward requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, post = stack.pop()
            if post:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _out(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents)


def add(a: Tensor, b: Tensor) -> Tensor:
    # same shape, or (B, n) + (n,) bias broadcast
    bias = b.data.ndim == 1 and a.data.ndim == 2 and a.data.shape[1] == b.data.shape[0]
    if a.data.shape != b.data.shape and not bias:
        raise ShapeError(f"add: {a.data.shape} + {b.data.shape}")
    out = _out(a.data + b.data, (a, b))

    def backward():
        _accum(a, out.grad)
        _accum(b, out.grad.sum(axis=0) if bias else out.grad)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} * {b.data.shape}")
    out = _out(a.data * b.data, (a, b))

    def backward():
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _out(a.data * s, (a,))

    def backward():
        _accum(a, out.grad * s)

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = _out(a.data @ b.data, (a, b))

    def backward():
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0.0), (x,))

    def backward():
        _accum(x, out.grad * (x.data > 0.0))

    out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    out = _out(np.tanh(x.data), (x,))

    def backward():
        _accum(x, out.grad * (1.0 - out.data * out.data))

    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    out = _out(np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)), (x,))

    def backward():
        _accum(x, out.grad * out.data * (1.0 - out.data))

    out._backward = backward
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValidationError("concat of an empty list")
    if axis not in (0, 1) or any(t.data.ndim != 2 for t in tensors):
        raise ShapeError(f"concat: need 2-D tensors and axis in (0, 1), got axis {axis}")
    other = 1 - axis
    if len({t.data.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[t.data.shape for t in tensors]}")
    out = _out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            g = out.grad[lo:hi] if axis == 0 else out.grad[:, lo:hi]
            _accum(t, g)

    out._backward = backward
    return out


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"narrow: need a 2-D tensor and axis in (0, 1), got {x.data.shape}")
    if not (0 <= start < stop <= x.data.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {stop}) out of bounds for axis {axis} of {x.data.shape}")
    data = x.data[start:stop] if axis == 0 else x.data[:, start:stop]
    out = _out(data.copy(), (x,))

    def backward():
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if axis == 0:
            x.grad[start:stop] += out.grad
        else:
            x.grad[:, start:stop] += out.grad

    out._backward = backward if x.requires_grad else None
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: {x.data.shape} -> {shape}")
    out = _out(x.data.reshape(shape), (x,))

    def backward():
        _accum(x, out.grad.reshape(x.data.shape))

    out._backward = backward
    return out


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train/mc sample a mask scaled by 1/(1-p) so the
    expected output equals the eval output; eval is the identity. ``mc``
    keeps sampling at inference for the uncertainty baseline."""
    if mode not in DROPOUT_MODES:
        raise ValidationError(f"dropout mode must be one of {DROPOUT_MODES}, got {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout p must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in train/mc mode needs an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = _out(x.data * mask, (x,))

    def backward():
        _accum(x, out.grad * mask)

    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: need a 2-D tensor, got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = _out(e / e.sum(axis=1, keepdims=True), (x,))

    def backward():
        dot = (out.grad * out.data).sum(axis=1, keepdims=True)
        _accum(x, out.data * (out.grad - dot))

    out._backward = backward
    return out


def tsum(x: Tensor) -> Tensor:
    out = _out(np.array(x.data.sum()), (x,))

    def backward():
        _accum(x, np.broadcast_to(out.grad, x.data.shape).copy())

    out._backward = backward
    return out


def l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all elements (mini-batch mean, lr stays
    batch-size-stable)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"l2_loss: pred {pred.data.shape} vs target {target.shape}")
    diff = pred.data - target
    value = np.array((diff * diff).mean())
    if not np.isfinite(value):
        raise NumericalError("non-finite loss")
    out = _out(value, (pred,))

    def backward():
        _accum(pred, out.grad * 2.0 * diff / diff.size)

    out._backward = backward
    return out


def cross_entropy_loss(
    logits: Tensor, labels: np.ndarray, class_weights: np.ndarray | None = None
) -> Tensor:
    """Softmax cross entropy from logits, weighted mean over the batch.

    ``class_weights`` rescales each sample by the weight of its true class
    (inverse-frequency weighting for imbalanced labels); the loss divides by
    the total weight so the scale stays comparable to the unweighted mean.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.data.shape} vs labels {labels.shape}")
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"labels out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    if class_weights is None:
        w = np.ones(n)
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (c,):
            raise ShapeError(f"cross_entropy_loss: weights {class_weights.shape} vs {c} classes")
        w = class_weights[labels]
    wsum = w.sum()
    value = np.array(-(w * logp[np.arange(n), labels]).sum() / wsum)
    if not np.isfinite(value):
        raise NumericalError("non-finite loss")
    out = _out(value, (logits,))

    def backward():
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        _accum(logits, out.grad * probs * (w / wsum)[:, None])

    out._backward = backward
    return out


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate layout along the 4H axis: input, forget, cell, output."""
    hidden = wh.data.shape[0]
    if wx.data.shape[1] != 4 * hidden or wh.data.shape[1] != 4 * hidden or b.data.shape != (4 * hidden,):
        raise ShapeError(
            f"lstm_cell: wx {wx.data.shape}, wh {wh.data.shape}, b {b.data.shape} "
            f"inconsistent with hidden size {hidden}"
        )
    gates = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, 2 * hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, 3 * hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, 4 * hidden))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2
