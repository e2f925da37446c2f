"""Minimal N-dimensional tensor with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output gradient
to input gradients.  ``backward`` walks that record graph once in reverse
topological order.  Arrays are numpy, row-major.

Storage dtypes are fp64, fp32 and fp16.  Arithmetic runs in fp64 when any
operand is fp64 and in fp32 otherwise, so fp16 tensors are only ever a
storage format; their gradients are accumulated in fp32.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "mul",
    "matmul",
    "einsum",
    "concat",
    "conv2d",
    "pool2d",
    "global_avg_pool",
    "dense",
    "activate",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "batchnorm",
    "standardize",
    "dropout",
    "nll_loss",
    "cross_entropy",
]

DTYPES = {"fp64": np.float64, "fp32": np.float32, "fp16": np.float16}
_DTYPE_NAMES = {np.dtype(v): k for k, v in DTYPES.items()}


class ContractError(ValueError):
    """An operation received arguments that violate its shape or value contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _compute_dtype(*arrays: np.ndarray) -> type:
    for a in arrays:
        if a.dtype == np.float64:
            return np.float64
    return np.float32


def _grad_dtype(dtype: np.dtype) -> type:
    return np.float64 if dtype == np.float64 else np.float32


class Tensor:
    """A numpy buffer plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype], copy=False)
        elif arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_grad_dtype(loss.data.dtype))}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=_grad_dtype(node.data.dtype)).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a, b) -> Tensor:
    """Elementwise sum of equal-shape tensors, or tensor plus a python scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        ct = _compute_dtype(a.data, b.data)
        data = a.data.astype(ct, copy=False) + b.data.astype(ct, copy=False)
        return _record(data, (a, b), lambda g: (g, g))
    ct = _compute_dtype(a.data)
    return _record(a.data.astype(ct, copy=False) + b, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data.astype(_compute_dtype(a.data), copy=False), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or tensor times a python scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        ct = _compute_dtype(a.data, b.data)
        x, y = a.data.astype(ct, copy=False), b.data.astype(ct, copy=False)
        return _record(x * y, (a, b), lambda g: (g * y, g * x))
    ct = _compute_dtype(a.data)
    s = float(b)
    return _record(a.data.astype(ct, copy=False) * s, (a,), lambda g: (g * s,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data.astype(_compute_dtype(a.data), copy=False)
    p = float(exponent)
    return _record(x**p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data.astype(_compute_dtype(a.data), copy=False))
    return _record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data.astype(_compute_dtype(a.data), copy=False)
    return _record(np.log(x), (a,), lambda g: (g / x,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data.astype(_compute_dtype(a.data), copy=False)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = a.data.astype(_compute_dtype(a.data), copy=False)
    try:
        out = data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.astype(_compute_dtype(a.data), copy=False)
    return _record(data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data.astype(_compute_dtype(a.data), copy=False)
    shape, ct = a.shape, data.dtype

    def fn(g):
        out = np.zeros(shape, dtype=ct)
        if _is_basic_index(index):
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(data[index], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ContractError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    ct = _compute_dtype(*(t.data for t in tensors))
    data = np.concatenate([t.data.astype(ct, copy=False) for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def fn(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(data, tensors, fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ct = _compute_dtype(a.data, b.data)
    x, y = a.data.astype(ct, copy=False), b.data.astype(ct, copy=False)

    def fn(g):
        da = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        db = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return da, db

    return _record(x @ y, (a, b), fn)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.  Every index of an operand must appear in the other or in the output."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if len(set(own)) != len(own) or any(c not in other and c not in out_sub for c in own):
            raise ContractError(f"einsum: unsupported subscripts {subscripts!r}")
    ct = _compute_dtype(a.data, b.data)
    x, y = a.data.astype(ct, copy=False), b.data.astype(ct, copy=False)
    try:
        data = np.einsum(subscripts, x, y, optimize=True)
    except ValueError as exc:
        raise ContractError(f"einsum {subscripts!r}: {a.shape}, {b.shape}: {exc}") from exc

    def fn(g):
        da = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, y, optimize=True) if a.requires_grad else None
        db = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, x, optimize=True) if b.requires_grad else None
        return da, db

    return _record(data, (a, b), fn)


# ---------------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------------

def _pad_amount(k: int, padding) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        return (k - 1) // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding)
    raise ContractError(f"padding must be 'valid', 'same' or a non-negative int, got {padding!r}")


def _out_extent(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_output_shape(in_hw: tuple[int, int], kernel: tuple[int, int], stride: int, padding) -> tuple[int, int]:
    """Spatial output extents of a convolution or pooling window, raising when the window does not fit."""
    (h, w), (kh, kw) = in_hw, kernel
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ContractError(f"window {kh}x{kw} does not fit input {h}x{w} with padding ({ph},{pw})")
    return _out_extent(h, kh, ph, stride), _out_extent(w, kw, pw, stride)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [B, C, Ho, Wo, kh, kw] view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding="valid") -> Tensor:
    """2D cross-correlation of ``x[B,C,H,W]`` with ``kernel[F,C,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractError(f"conv2d: expected 4D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ContractError(f"conv2d: input channels C={C} but kernel expects C={Ck}")
    Ho, Wo = conv_output_shape((H, W), (kh, kw), stride, padding)
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    ct = _compute_dtype(x.data, kernel.data)
    xd = x.data.astype(ct, copy=False)
    wmat = kernel.data.astype(ct, copy=False).reshape(F, C * kh * kw)

    if kh == kw == 1 and stride == 1 and ph == pw == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
        cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        dk = (g2.T @ cols).reshape(F, C, kh, kw) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == kw == 1 and stride == 1 and ph == pw == 0:
                dx = dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=ct)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[..., i, j]
                dx = dxp[:, :, ph : ph + H, pw : pw + W]
        return dx, dk

    return _record(np.ascontiguousarray(out), (x, kernel), fn)


def pool2d(x: Tensor, kind: str = "max", k: int = 2, stride: int | None = None, padding="valid") -> Tensor:
    """Max or average pooling over ``k x k`` windows.

    Max pooling sends the gradient to the first maximal element of each
    window in row-major order.  Average pooling divides by ``k*k``, padded
    zeros included.
    """
    if x.ndim != 4:
        raise ContractError(f"pool2d: expected 4D input, got {x.shape}")
    if kind not in ("max", "avg"):
        raise ContractError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    stride = k if stride is None else stride
    B, C, H, W = x.shape
    Ho, Wo = conv_output_shape((H, W), (k, k), stride, padding)
    p = _pad_amount(k, padding)
    ct = _compute_dtype(x.data)
    xd = x.data.astype(ct, copy=False)
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill) if p else xd
    win = _windows(xp, k, k, stride)[:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)

    if kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        out = flat.sum(axis=-1) / (k * k)

    def fn(g):
        dxp = np.zeros(xp.shape, dtype=ct)
        for i in range(k):
            for j in range(k):
                if kind == "max":
                    contrib = np.where(arg == i * k + j, g, 0.0)
                else:
                    contrib = g / (k * k)
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += contrib
        return (dxp[:, :, p : p + H, p : p + W],)

    return _record(np.ascontiguousarray(out), (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[B,C,H,W] -> [B,C]``."""
    if x.ndim != 4:
        raise ContractError(f"global_avg_pool: expected 4D input, got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------------
# dense, activations, normalization, losses
# ---------------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``x[B,D]``, ``weight[D,K]``, ``bias[K]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ContractError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ContractError(f"dense: bias {bias.shape} does not match output width {weight.shape[1]}")
    out = matmul(x, weight)
    if bias is None:
        return out
    return add_bias(out, bias, axis=1)


def add_bias(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a 1D ``bias`` along ``axis`` of ``x``; the one sanctioned broadcast."""
    if bias.ndim != 1 or x.shape[axis] != bias.shape[0]:
        raise ContractError(f"add_bias: bias {bias.shape} does not match axis {axis} of {x.shape}")
    ct = _compute_dtype(x.data, bias.data)
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    data = x.data.astype(ct, copy=False) + bias.data.astype(ct, copy=False).reshape(shape)
    return _record(data, (x, bias), lambda g: (g, g.sum(axis=other)))


def relu(x: Tensor) -> Tensor:
    xd = x.data.astype(_compute_dtype(x.data), copy=False)
    mask = xd > 0
    # maximum propagates NaN, so a bad input still surfaces as a bad loss
    return _record(np.maximum(xd, xd.dtype.type(0)), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data.astype(_compute_dtype(x.data), copy=False)
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du),)

    return _record(out, (x,), fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    xd = x.data.astype(_compute_dtype(x.data), copy=False)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data.astype(_compute_dtype(x.data), copy=False)
    z = xd - xd.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), fn)


def _labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ContractError(f"{y.shape[0]} labels for a batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def nll_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-probabilities ``probs``."""
    n, k = probs.shape
    y = _labels(labels, n, k)
    return mul(tsum(log(getitem(probs, (np.arange(n), y)))), -1.0 / n)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``labels`` given unnormalized ``logits[B,K]``."""
    n, k = logits.shape
    y = _labels(labels, n, k)
    return mul(tsum(getitem(log_softmax(logits), (np.arange(n), y))), -1.0 / n)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over axis 1 of a 2D or 4D tensor.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, exponential averaging).
    """
    if x.ndim not in (2, 4):
        raise ContractError(f"batchnorm: expected 2D or 4D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,) or running_var.shape != (C,):
        raise ContractError(f"batchnorm: parameters must have shape ({C},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    ct = _compute_dtype(x.data, gamma.data)
    xd = x.data.astype(ct, copy=False)
    gm = gamma.data.astype(ct, copy=False).reshape(bshape)
    bt = beta.data.astype(ct, copy=False).reshape(bshape)
    n = xd.size // C

    if training:
        if n < 2:
            raise ContractError("batchnorm: training mode needs more than one value per channel")
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        running_mean[...] = (1 - momentum) * running_mean + momentum * mu.reshape(C)
        running_var[...] = (1 - momentum) * running_var + momentum * var.reshape(C) * n / (n - 1)
    else:
        mu = running_mean.astype(ct).reshape(bshape)
        var = running_var.astype(ct).reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gm * xhat + bt

    def fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gm
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), fn)


def standardize(x: Tensor, axes: tuple[int, ...] = (2, 3)) -> Tensor:
    """Shift and scale each slice over ``axes`` to mean 0 and population std 1.

    Slices with zero variance map to zeros (with zero gradient).
    """
    xd = x.data.astype(_compute_dtype(x.data), copy=False)
    mu = xd.mean(axis=axes, keepdims=True)
    sd = np.sqrt(((xd - mu) ** 2).mean(axis=axes, keepdims=True))
    ok = sd > 0
    inv = np.where(ok, 1.0 / np.where(ok, sd, 1.0), 0.0)
    y = (xd - mu) * inv

    def fn(g):
        return (inv * (g - g.mean(axis=axes, keepdims=True) - y * (g * y).mean(axis=axes, keepdims=True)),)

    return _record(y, (x,), fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero units with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep.astype(_compute_dtype(x.data))))


def activate(x: Tensor, kind: str, **params) -> Tensor:
    """Dispatch to ``relu``, ``gelu``, ``softmax`` or ``batchnorm`` by name."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "batchnorm":
        return batchnorm(x, **params)
    raise ContractError(f"unknown activation {kind!r}")
