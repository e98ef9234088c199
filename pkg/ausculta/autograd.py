"""
Reverse-mode automatic differentiation over numpy arrays.

A Tensor records the op that produced it and a closure that pushes its gradient to
its parents; `backward()` walks the graph in reverse topological order. All forward
and backward arithmetic runs in float64. Every op checks its output for NaN/Inf.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ausculta.errors import DimMismatch, NonFiniteActivation, NonFiniteGradient

_relu_trace: Optional[list[np.ndarray]] = None


@contextlib.contextmanager
def trace_relu_masks() -> Iterator[list[np.ndarray]]:
    """Collect the activation masks of every relu evaluated inside the block."""
    global _relu_trace
    previous, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient reaching {self.op or 'leaf'} tensor of shape {self.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimMismatch(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other) -> "Tensor":
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, _lift(-1.0))

    def __sub__(self, other) -> "Tensor":
        return add(self, -_lift(other))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteActivation(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimMismatch(f"matmul shapes {a.shape} @ {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _node(a.data.T, (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)

    def backward(g):
        a._accumulate(g * mask)

    return _node(a.data * mask, (a,), backward, "relu")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(range(a.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        g = np.expand_dims(g, axes) if g.ndim < a.ndim else g
        a._accumulate(np.broadcast_to(g / count, a.shape).copy())

    return _node(a.data.mean(axis=axes), (a,), backward, "mean")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """
    x: (B, C, H, W), w: (O, C, k, k), b: (O,) -> (B, O, H', W') via im2col.
    H' = (H + 2p - k) // stride + 1.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimMismatch(f"conv2d input {x.shape} vs kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = windows.shape[2], windows.shape[3]
    # (B*Ho*Wo, C*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, C * k * k)
    out = (cols @ wmat.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        w._accumulate((gmat.T @ cols).reshape(w.shape))
        b._accumulate(gmat.sum(axis=0))
        if not x.requires_grad:
            return
        dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j]
        x._accumulate(dxp[:, :, padding:padding + H, padding:padding + W])

    return _node(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer targets, via max-shifted log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        logits._accumulate(grad * (g / n))

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-element sigmoid cross-entropy."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimMismatch(f"targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accumulate((sig - y) * (g / z.size))

    return _node(np.asarray(loss), (logits,), backward, "bce_with_logits")


def mse(pred: Tensor, targets: np.ndarray) -> Tensor:
    y = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - y

    def backward(g):
        pred._accumulate(2.0 * diff * (g / diff.size))

    return _node(np.asarray(np.mean(diff * diff)), (pred,), backward, "mse")
