"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the operations needed by convolutional SR networks are provided. Every
operation records its parents and a closure that maps the upstream gradient
to one gradient per parent; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np


class ContractError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ConfigurationError(ValueError):
    """Raised for invalid structural configuration (groups, scales, catalogs)."""


ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True


class _ConvCounter:
    """Counts conv2d forward evaluations; used by the mixing/timing tests."""

    def __init__(self) -> None:
        self.calls = 0

    def reset(self) -> None:
        self.calls = 0


conv_counter = _ConvCounter()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    # Allowed: equal shapes, a size-1 operand, or keepdims-style broadcasting
    # where one operand already has the result shape.
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) == len(b):
        if all(x == y or y == 1 for x, y in zip(a, b)):
            return a
        if all(x == y or x == 1 for x, y in zip(a, b)):
            return b
    raise ContractError(f"incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _as_tensor(x: Union["Tensor", ArrayLike]) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``grad`` is populated only on leaf tensors with ``requires_grad=True``.
    Repeated calls to :meth:`backward` accumulate into ``grad``; call
    :meth:`zero_grad` (or set ``grad = None``) between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None
        self.op = ""

    @classmethod
    def _make(cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: Backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- graph traversal ----------------------------------------------------
    def _topo_order(self) -> list:
        order: list = []
        seen = set()
        stack = [(self, False)]
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

    def backward(self, grad: Optional[ArrayLike] = None) -> int:
        """Populate ``grad`` on every reachable leaf that requires it.

        Returns the number of interior (non-leaf) nodes visited, which is
        used by tests to confirm each node is processed exactly once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad_arr = np.ones_like(self.data)
        else:
            grad_arr = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()
        if not self.requires_grad:
            return 0
        order = self._topo_order()
        pending = {id(self): grad_arr}
        visited = 0
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError("non-finite gradient reached a leaf tensor")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            visited += 1
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        return visited

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        _broadcast_shape(a_shape, b_shape)

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        _broadcast_shape(a_shape, b_shape)

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _broadcast_shape(a.shape, b.shape)

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _broadcast_shape(a.shape, b.shape)
        out = a.data / b.data

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def scalar_mul(self, c: float) -> "Tensor":
        c = float(c)
        return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "scalar_mul")

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = np.asarray(self.data.mean(axis=axis, keepdims=keepdims))
        n = self.data.size // max(data.size, 1)
        return self.sum(axis=axis, keepdims=keepdims).scalar_mul(1.0 / n)

    # -- shape ---------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(np.array(self.data[idx]), (self,), backward, "getitem")

    # -- elementwise ------------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        factor = np.where(self.data > 0, 1.0, slope)
        return Tensor._make(self.data * factor, (self,), lambda g: (g * factor,), "leaky_relu")

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),), "sqrt")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def softmax(self) -> "Tensor":
        if self.ndim != 1:
            raise ContractError("softmax expects a vector")
        z = np.exp(self.data - self.data.max())
        s = z / z.sum()

        def backward(g):
            return (s * (g - np.dot(g, s)),)

        return Tensor._make(s, (self,), backward, "softmax")

    def std(self, axis, keepdims: bool = True, min_std: float = 1e-8) -> "Tensor":
        """Population standard deviation over ``axis``, clamped below at ``min_std``."""
        x = self.data
        mu = x.mean(axis=axis, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axis, keepdims=True)
        n = x.size // var.size
        live = var > min_std * min_std
        std = np.sqrt(np.where(live, var, min_std * min_std))

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * live * centered / (n * std),)

        out = std if keepdims else np.squeeze(std, axis=axis)
        return Tensor._make(out, (self,), backward, "std")


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# -- free-function forms used across the package -----------------------------

def add(a, b) -> Tensor:
    return _as_tensor(a) + b


def sub(a, b) -> Tensor:
    return _as_tensor(a) - b


def mul(a, b) -> Tensor:
    return _as_tensor(a) * b


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return a.scalar_mul(c)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return x.leaky_relu(slope)


def softmax(x: Tensor) -> Tensor:
    return x.softmax()


def std_over_channels(x: Tensor) -> Tensor:
    """Per-channel standard deviation of an NCHW tensor, shape (1, C, 1, 1)."""
    if x.ndim != 4:
        raise ContractError("std_over_channels expects NCHW input")
    return x.std(axis=(0, 2, 3))


def sum_tensors(items: Sequence[Tensor]) -> Tensor:
    total = items[0]
    for t in items[1:]:
        total = total + t
    return total


# -- convolution --------------------------------------------------------------

def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, s: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, Ho, Wo) patch copy."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s]
    return cols


def _conv_forward(x: np.ndarray, w: np.ndarray, ph: int, pw: int, s: int, groups: int):
    n, c, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    ho = (h + 2 * ph - kh) // s + 1
    wo = (wd + 2 * pw - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ContractError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _im2col(xp, kh, kw, ho, wo, s).reshape(n, groups, cg * kh * kw, ho * wo)
    wmat = w.reshape(1, groups, c_out // groups, cg * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    return out, cols, xp.shape, ho, wo


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D convolution (cross-correlation) via im2col.

    ``padding`` may be an int or an ``(ph, pw)`` pair; zero padding is used.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    if groups < 1 or c % groups or c_out % groups:
        raise ConfigurationError(f"groups={groups} must divide in={c} and out={c_out} channels")
    if c_per_group != c // groups:
        raise ContractError(f"kernel expects {c_per_group} input channels per group, input gives {c // groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ContractError(f"bias shape {bias.shape} != ({c_out},)")
    ph, pw = _pair(padding)
    s = int(stride)

    conv_counter.calls += 1
    out, cols, xp_shape, ho, wo = _conv_forward(x.data, weight.data, ph, pw, s, groups)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    cog = c_out // groups
    w_data = weight.data

    def backward(grad):
        gx = gw = gb = None
        g4 = grad.reshape(n, groups, cog, ho * wo)
        if weight.requires_grad:
            # sum over batch and pixels: (G, Cog, Cg*kh*kw)
            gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w_data.shape)
        if bias is not None and bias.requires_grad:
            gb = grad.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if s == 1 and kh - 1 - ph >= 0 and kw - 1 - pw >= 0:
                # transposed convolution = correlation with the flipped kernel
                wt = w_data.reshape(groups, cog, c_per_group, kh, kw)[..., ::-1, ::-1]
                wt = wt.transpose(0, 2, 1, 3, 4).reshape(c, cog, kh, kw)
                gx = _conv_forward(grad, np.ascontiguousarray(wt), kh - 1 - ph, kw - 1 - pw, 1, groups)[0]
            else:
                wmat = w_data.reshape(1, groups, cog, c_per_group * kh * kw)
                dcols = np.matmul(wmat.transpose(0, 1, 3, 2), g4).reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros(xp_shape)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[:, :, i, j]
                gx = dxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


# -- pixel shuffle --------------------------------------------------------------

def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    co = c // (r * r)
    return a.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (N, C*r^2, H, W) -> (N, C, H*r, W*r)."""
    if x.ndim != 4:
        raise ContractError("pixel_shuffle expects NCHW input")
    if r < 1 or x.shape[1] % (r * r):
        raise ConfigurationError(f"channels {x.shape[1]} not divisible by r^2={r * r}")
    return Tensor._make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Adjoint (and inverse) of :func:`pixel_shuffle`."""
    if x.ndim != 4:
        raise ContractError("pixel_unshuffle expects NCHW input")
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ConfigurationError(f"spatial dims {x.shape[2:]} not divisible by r={r}")
    return Tensor._make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")
