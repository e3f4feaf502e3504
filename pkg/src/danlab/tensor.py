"""Dense float64 tensors with a dynamic reverse-mode tape.

The op vocabulary is deliberately small: conv2d, matmul, add/sub/mul,
sum/mean, reshape, concat, relu, max-pooling, batch normalization and
softmax cross-entropy. That covers every network built in this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def copy(self) -> Tensor:
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``.grad`` on every tracked tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True).reshape(p.shape)
                else:
                    p.grad = p.grad + g
            # interior nodes do not keep their grads around
            if node._parents:
                node.grad = None

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape),)

    return _result(np.asarray(x.data.mean()), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


@dataclass
class FilterBank:
    """Convolution weights ``[C_o, C_i, k, k]`` plus a ``[C_o]`` bias."""

    weights: Tensor
    bias: Tensor
    frozen: bool = False

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4 or w.shape[2] != w.shape[3] or min(w.shape) < 1:
            raise ShapeError(f"filter weights must be [C_o, C_i, k, k], got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match C_o={w.shape[0]}")
        self.freeze(self.frozen)

    @classmethod
    def init(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator) -> FilterBank:
        # uniform(+-1/sqrt(fan_in)), the usual default for conv layers
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        b = rng.uniform(-bound, bound, size=c_out)
        return cls(Tensor(w), Tensor(b))

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.weights.requires_grad = not frozen
        self.bias.requires_grad = not frozen

    def clone(self, frozen: bool | None = None) -> FilterBank:
        return FilterBank(
            Tensor(self.weights.data.copy()),
            Tensor(self.bias.data.copy()),
            self.frozen if frozen is None else frozen,
        )


def flatten_filters(fb) -> Tensor:
    """Rows of the result are the row-major flattened filters, shape ``[C_o, C_i*k*k]``."""
    w = fb.weights if isinstance(fb, FilterBank) else as_tensor(fb)
    return reshape(w, (w.shape[0], -1))


def unflatten_filters(m, target_dims) -> Tensor:
    m = as_tensor(m)
    c_o, c_i, k, k2 = target_dims
    if m.ndim != 2 or m.shape != (c_o, c_i * k * k2):
        raise ShapeError(f"cannot unflatten {m.shape} into {tuple(target_dims)}")
    return reshape(m, (c_o, c_i, k, k2))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [N, C_i, H, W]`` with ``weight [C_o, C_i, k, k]``.

    ``weight`` may also be a :class:`FilterBank`, in which case its bias is used.
    """
    if isinstance(weight, FilterBank):
        weight, bias = weight.weights, weight.bias
    x, w = as_tensor(x), as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    c_o, c_i, k, _ = w.shape
    if c != c_i:
        raise ShapeError(f"input has {c} channels, filters expect {c_i}")
    if b is not None and b.shape != (c_o,):
        raise ShapeError(f"bias shape {b.shape} does not match C_o={c_o}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if (hp - k) % stride or (wp - k) % stride or hp < k or wp < k:
        raise ShapeError(f"non-integral conv output for H={h}, W={wd}, k={k}, stride={stride}, padding={padding}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # column matrix laid out [C, k, k, N, H', W'], one strided copy per kernel tap
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    w2 = w.data.reshape(c_o, -1)
    out = (w2 @ cols).reshape(c_o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_o, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + wd]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over windows; the gradient goes to the first (row-major) argmax."""
    n, c, h, wd = x.shape
    if h < window or wd < window or (h - window) % stride or (wd - window) % stride:
        raise ShapeError(f"maxpool window {window}/stride {stride} does not tile {h}x{wd}")
    ho, wo = (h - window) // stride + 1, (wd - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx,)

    return _result(out, (x,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``[N, C]`` or ``[N, C, H, W]`` input.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch norm over {gamma.shape[0]} channels got input {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if training:
        m = x.data.size // x.shape[1]
        if m == 0:
            raise ValueError("batch norm in training mode needs a non-empty batch")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                mm = x.data.size // x.shape[1]
                gx = (inv.reshape(bshape) / mm) * (
                    mm * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss), (logits,), backward)


def finite_diff_grad(f: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a float64 array of ``x``'s shape and returns a float
    (or scalar Tensor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)

    def call(v):
        r = f(v)
        return float(r.data if isinstance(r, Tensor) else r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = call(x0.copy())
        flat[i] = orig - eps
        fm = call(x0.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
