"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray together with an optional gradient and a
closure that propagates gradients to its parents.  Graphs are built eagerly by
the op functions below and torn down by a single topological backward sweep.
The op set is deliberately small: exactly what the encoder-decoder, the
probing head, and the training loop need, each with a hand-written backward
that is checked against central finite differences in the test suite.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class AutogradError(Exception):
    pass


class GraphConsumedError(AutogradError):
    """Raised when backward is run twice through the same graph nodes."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- backward -------------------------------------------------------------

    def backward(self, gradient: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise AutogradError("backward on a tensor that does not require grad")
        if gradient is None:
            if self.data.size != 1:
                raise AutogradError("backward on a non-scalar needs an explicit gradient")
            gradient = np.ones_like(self.data)

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
            if node._consumed and node._parents:
                raise GraphConsumedError("this graph has already been differentiated")
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        self.grad = gradient if self.grad is None else self.grad + gradient
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._consumed = True

    def _accumulate(self, grad: np.ndarray) -> None:
        self.grad = grad if self.grad is None else self.grad + grad

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __sub__(self, other):
        return add(self, -self._lift(other))

    def __rsub__(self, other):
        return add(self._lift(other), -self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
        return out
    return Tensor(data)


# -- arithmetic ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    data = 1.0 / a.data

    def backward(g):
        a._accumulate(_unbroadcast(-g * data * data, a.data.shape))

    return _result(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward)


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            a._accumulate(g.transpose())
        else:
            a._accumulate(g.transpose(np.argsort(axes)))

    return _result(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(data, tuple(tensors), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _result(data, (table,), backward)


# -- reductions ------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy() / count)

    return _result(data, (a,), backward)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        expanded = data
        gg = g
        if axis is not None and not keepdims:
            expanded = np.expand_dims(data, axis)
            gg = np.expand_dims(g, axis)
        hit = a.data == expanded
        # split ties evenly so the gradient check stays symmetric
        share = hit / hit.sum(axis=axis if axis is not None else None, keepdims=True)
        a._accumulate(share * gg)

    return _result(data, (a,), backward)


# -- nonlinearities -----------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _result(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        a._accumulate(g * local)

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _result(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - log_z

    def backward(g):
        soft = np.exp(data)
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), backward)


def rms_norm(a: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, with learned scale."""
    x = a.data
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    normed = x * inv
    data = normed * scale.data

    def backward(g):
        gs = g * scale.data
        if a.requires_grad:
            dot = (gs * x).sum(axis=-1, keepdims=True)
            a._accumulate(inv * gs - (inv**3) * x * dot / n)
        if scale.requires_grad:
            scale._accumulate(_unbroadcast(g * normed, scale.data.shape))

    return _result(data, (a, scale), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; pass rate 0 (or skip the call) for evaluation."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)
    data = a.data * keep

    def backward(g):
        a._accumulate(g * keep)

    return _result(data, (a,), backward)


def depthwise_conv1d(a: Tensor, weight: Tensor) -> Tensor:
    """Per-channel 1D convolution with same-length symmetric zero padding.

    a: (batch, length, channels); weight: (kernel, channels), kernel odd.
    """
    kernel, channels = weight.data.shape
    if kernel % 2 != 1:
        raise AutogradError("depthwise kernel width must be odd")
    if a.data.shape[-1] != channels:
        raise AutogradError("channel mismatch between input and kernel")
    pad = kernel // 2
    x = np.pad(a.data, ((0, 0), (pad, pad), (0, 0)))
    length = a.data.shape[1]
    data = np.zeros_like(a.data)
    for k in range(kernel):
        data += weight.data[k] * x[:, k : k + length, :]

    def backward(g):
        if a.requires_grad:
            gx = np.zeros_like(x)
            for k in range(kernel):
                gx[:, k : k + length, :] += weight.data[k] * g
            a._accumulate(gx[:, pad : pad + length, :])
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k in range(kernel):
                gw[k] = (g * x[:, k : k + length, :]).sum(axis=(0, 1))
            weight._accumulate(gw)

    return _result(data, (a, weight), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions (fused op).

    logits: (N, vocab); targets: (N,) int ids; mask: (N,) booleans, True where
    the position contributes to the loss.
    """
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    active = int(mask.sum())
    if active == 0:
        raise AutogradError("cross_entropy needs at least one active position")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(targets.shape[0]), targets]
    data = -(picked * mask).sum() / active

    def backward(g):
        soft = np.exp(log_probs)
        soft[np.arange(targets.shape[0]), targets] -= 1.0
        soft *= (mask[:, None] / active) * g
        logits._accumulate(soft.astype(logits.data.dtype))

    return _result(np.asarray(data, dtype=logits.data.dtype), (logits,), backward)


def numerical_gradient(fn, tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``fn()`` w.r.t. ``tensor``.

    ``fn`` must recompute from ``tensor.data`` on each call; evaluation runs
    with graph construction disabled.
    """
    grad = np.zeros_like(tensor.data)
    with no_grad():
        it = np.nditer(tensor.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            original = tensor.data[idx]
            tensor.data[idx] = original + eps
            hi = float(fn().data)
            tensor.data[idx] = original - eps
            lo = float(fn().data)
            tensor.data[idx] = original
            grad[idx] = (hi - lo) / (2.0 * eps)
            it.iternext()
    return grad
