"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are define-by-run: each op records its parents and a closure that
routes the output gradient back to them. ``backward`` walks the recorded
graph in reverse topological order and sums gradient contributions across
all consumers of a node. Graphs are rebuilt on every forward pass; nothing
is reused across training steps.

All data is float64. Ops are deterministic: identical inputs produce
bit-identical outputs.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

COSINE_EPS = 1e-12

# When enabled, every forward op asserts its output is finite. Off by
# default; the checks cost a full pass over each result.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A node in the computation graph.

    ``grad`` is allocated lazily during ``backward`` and only for tensors
    that participate in differentiation (``requires_grad`` true, directly
    or through a parent). Repeated backward calls accumulate into ``grad``
    until ``zero_grad`` clears it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in forward result")

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        out_data = self.data + other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g: np.ndarray) -> None:
            self._accumulate(-g)

        return Tensor(-self.data, _parents=(self,), _backward=bwd)

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        out_data = self.data * other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        out_data = self.data / other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data),
                                 other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    # -- structure ----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g.reshape(orig))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def transpose(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.shape}")

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g.T)

        return Tensor(self.data.T, _parents=(self,), _backward=bwd)

    # -- reductions ---------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g: np.ndarray) -> None:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        out_data = np.where(mask, self.data, 0.0)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * mask)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * sign)

        return Tensor(np.abs(self.data), _parents=(self,), _backward=bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * (0.5 / out_data))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def clip_min(self, floor: float) -> "Tensor":
        mask = self.data > floor

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * mask)

        return Tensor(np.maximum(self.data, floor), _parents=(self,), _backward=bwd)

    # -- linear algebra -------------------------------------------------

    def matmul(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: incompatible shapes {a.shape} x {b.shape}")
        out_data = a @ b

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g @ b.T)
            if other.requires_grad:
                other._accumulate(a.T @ g)

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __matmul__ = matmul

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on.

    Gradients are accumulated (summed) across all consumers of a node and
    across repeated calls; callers zero parameter grads between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological sort; recursion would overflow on deep graphs.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Network ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: [N, C_in, H, W], kernel: [C_out, C_in, 3, 3], bias: [C_out].
    Output spatial size equals input spatial size.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d expects x[N,C,H,W] and kernel[O,C,3,3], got {xd.shape} and {kd.shape}")
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError(
            f"conv2d: input has {xd.shape[1]} channels but kernel expects {kd.shape[1]}")
    if bias.data.shape != (kd.shape[0],):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} does not match {kd.shape[0]} output channels")

    n, _, h, w = xd.shape
    c_out = kd.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, c_out, h, w))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i:i + h, j:j + w]
            out += np.einsum("nchw,oc->nohw", patch, kd[:, :, i, j], optimize=True)
    out += bias.data[None, :, None, None]

    def bwd(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dk = np.zeros_like(kd) if kernel.requires_grad else None
        for i in range(3):
            for j in range(3):
                patch = xp[:, :, i:i + h, j:j + w]
                if dk is not None:
                    dk[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
                if dxp is not None:
                    dxp[:, :, i:i + h, j:j + w] += np.einsum(
                        "nohw,oc->nchw", g, kd[:, :, i, j], optimize=True)
        if dk is not None:
            kernel._accumulate(dk)
        if dxp is not None:
            x._accumulate(dxp[:, :, 1:-1, 1:-1])

    return Tensor(out, _parents=(x, kernel, bias), _backward=bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Spatial dims must be even.

    Ties within a window route the gradient to the first maximal element.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects [N,C,H,W], got shape {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]

    def bwd(g: np.ndarray) -> None:
        dw = np.zeros_like(windows)
        np.put_along_axis(dw, idx[..., None], g[..., None], axis=4)
        dx = dw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(dx.reshape(n, c, h, w))

    return Tensor(out, _parents=(x,), _backward=bwd)


def spatial_mean(x: Tensor) -> Tensor:
    """Average a [N, C, H, W] map over its spatial dims, giving [N, C]."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"spatial_mean expects [N,C,H,W], got shape {xd.shape}")
    n, c, h, w = xd.shape
    scale = 1.0 / (h * w)
    out = xd.sum(axis=(2, 3)) * scale

    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to((g * scale)[:, :, None, None], xd.shape).copy())

    return Tensor(out, _parents=(x,), _backward=bwd)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors with a zero-vector guard.

    The norms are floored at 1e-12, so sim(0, v) is 0 by convention rather
    than NaN, and zero vectors receive zero gradient.
    """
    if a.data.shape != b.data.shape or a.ndim != 1:
        raise ShapeError(
            f"cosine_sim expects equal-length vectors, got {a.shape} and {b.shape}")
    dot = (a * b).sum()
    na = (a * a).sum().clip_min(COSINE_EPS * COSINE_EPS).sqrt()
    nb = (b * b).sum().clip_min(COSINE_EPS * COSINE_EPS).sqrt()
    return dot / (na * nb)


def l1_sum(x: Tensor) -> Tensor:
    """Sum of absolute values; the subgradient at 0 is 0."""
    return x.abs().sum()


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Computed with log-sum-exp stabilization; the gradient is
    (softmax - onehot) / batch.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,n] logits, got {ld.shape}")
    labels = np.asarray(labels)
    n_batch, n_classes = ld.shape
    if labels.shape != (n_batch,):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch of {n_batch}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label out of range [0, {n_classes}): found {int(labels.min())}..{int(labels.max())}")

    shifted = ld - ld.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n_batch), labels].mean()

    def bwd(g: np.ndarray) -> None:
        softmax = exp / exp.sum(axis=1, keepdims=True)
        softmax[np.arange(n_batch), labels] -= 1.0
        logits._accumulate(softmax * (float(g) / n_batch))

    return Tensor(loss, _parents=(logits,), _backward=bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _lift(a).matmul(b)


def relu(x: Tensor) -> Tensor:
    return _lift(x).relu()


def parameter(data) -> Tensor:
    """A leaf tensor that participates in differentiation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
