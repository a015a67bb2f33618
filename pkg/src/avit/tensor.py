"""
Minimal dense tensor with tape-based reverse-mode autodiff.

Every differentiable op records a node on the active :class:`Tape`. Calling
:func:`backward` on a scalar walks the tape in reverse creation order once and
accumulates gradients into ``Tensor.grad``. Arrays are numpy; float32 is the
training default and float64 is used for finite-difference checks (see
:func:`precision`).
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations."""

    _ids = itertools.count()

    def __init__(self):
        self.id = next(Tape._ids)
        self.nodes: List[_Node] = []

    def record(self, inputs, output, backward_fn) -> None:
        output._tape_id = (self.id, len(self.nodes))
        self.nodes.append(_Node(inputs, output, backward_fn))

    def clear(self) -> None:
        self.nodes = []
        self.id = next(Tape._ids)

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def tape_scope():
    """Run the block against a fresh tape and restore the old one afterwards."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


class Tensor:
    """n-dimensional float array that can take part in autodiff."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape_id = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by op")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        _TAPE.record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every tensor on ``tape`` that ``loss`` depends on.

    Gradients accumulate, so call ``zero_grad`` on parameters between steps.
    The tape is consumed.
    """
    tape = _TAPE if tape is None else tape
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape_id is None or loss._tape_id[0] != tape.id:
        raise ContractError("loss was not produced on the given tape")
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    stop = loss._tape_id[1]
    for node in reversed(tape.nodes[: stop + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype)
            else:
                inp.grad = inp.grad + gi
    tape.clear()


# elementwise arithmetic -----------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(out, (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


# reductions -----------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# shape ops ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from e
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute dimensions (reverses them when ``axes`` is None)."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {tensors[0].shape} and {t.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {src} to {tuple(shape)}") from e
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    idx = index if isinstance(index, tuple) else (index,)
    if any(isinstance(i, (list, np.ndarray, Tensor)) for i in idx):
        raise ContractError("only basic slicing is differentiable")
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(out, (x,), bw)


# linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from e
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# activations ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = special.expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def erf(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    c = xd.dtype.type(2.0 / math.sqrt(math.pi))
    return _make(special.erf(xd), (x,), lambda g: (g * c * np.exp(-xd * xd),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / xd.dtype.type(_SQRT2)))
    out = xd * cdf

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + xd * pdf),)

    return _make(out.astype(xd.dtype), (x,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


# normalization --------------------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layernorm: last dim of {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm on NCHW input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in the usual convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}")
    xd = x.data
    axes = (0, 2, 3)
    gshape = (1, -1, 1, 1)
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = xd.size // xd.shape[1]
        mom = running_mean.dtype.type(momentum)
        running_mean *= 1 - mom
        running_mean += mom * mu.reshape(-1)
        running_var *= 1 - mom
        running_var += mom * var.reshape(-1) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(gshape).astype(xd.dtype)
        xc = xd - mu
        var = running_var.reshape(gshape).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data.reshape(gshape)
    out = xhat * gd + beta.data.reshape(gshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                dx = inv * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


# convolution and pooling ----------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2D cross-correlation on NCHW input via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"conv2d: non-positive output size {Ho}x{Wo} for input {x.shape}, kernel {w.shape}"
        )
    p, s, d = padding, stride, dilation
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i * d : i * d + s * (Ho - 1) + 1 : s, j * d : j * d + s * (Wo - 1) + 1 : s, :
            ]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(Co, -1)
    out = cols2 @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    inputs = (x, w) if bias is None else (x, w, as_tensor(bias))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        dw = db = dx = None
        if w.requires_grad:
            dw = (g2.T @ cols2).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            db = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, i * d : i * d + s * (Ho - 1) + 1 : s, j * d : j * d + s * (Wo - 1) + 1 : s, :
                    ] += dcols[:, :, :, i, j, :]
            dx = dxp[:, p : p + H, p : p + W, :].transpose(0, 3, 1, 2)
        return (dx, dw) if bias is None else (dx, dw, db)

    return _make(out, inputs, bw)


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, padding, 1)
    Wo = conv_output_size(W, kernel, stride, padding, 1)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"maxpool2d: non-positive output size for input {x.shape}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    best = np.full((B, C, Ho, Wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((B, C, Ho, Wo), dtype=np.int64)
    for t, (i, j) in enumerate(itertools.product(range(kernel), range(kernel))):
        v = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
        better = v > best
        best = np.where(better, v, best)
        arg = np.where(better, t, arg)

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, (i, j) in enumerate(itertools.product(range(kernel), range(kernel))):
            dxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += np.where(arg == t, g, 0)
        return (dxp[:, :, p : p + H, p : p + W],)

    return _make(best, (x,), bw)


def global_avgpool2d(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def interp_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix, half-pixel (align_corners=False)."""
    A = np.zeros((out_size, in_size), dtype=dtype)
    ratio = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        A[i, i0] += 1.0 - frac
        A[i, i1] += frac
    return A


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    _, _, H, W = x.shape
    Ah = interp_matrix(H, H * factor, x.dtype)
    Aw = interp_matrix(W, W * factor, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)

    def bw(g):
        return (np.matmul(np.matmul(Ah.T, g), Aw),)

    return _make(out, (x,), bw)


# losses ---------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: ArrayLike) -> Tensor:
    """Mean binary cross entropy, computed as max(x,0) - x*y + log(1+exp(-|x|))."""
    logits = as_tensor(logits)
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs target {y.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(per.mean(), dtype=x.dtype)

    def bw(g):
        return ((special.expit(x) - y) * (g / n),)

    return _make(out, (logits,), bw)


# gradient checking ----------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
    floor: float = 1.0,
) -> float:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    Returns max over checked elements of ``|analytic - numeric| / max(floor, |analytic|)``.
    A tiny ``floor`` gives a purely relative error. ``x`` is perturbed in place
    and restored. All elements are checked unless ``indices`` is given.
    """
    if x.dtype != np.float64:
        raise ContractError("finite_diff_check needs float64 tensors")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with tape_scope() as tape:
        y = f(x)
        backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was
    x.grad = None
    if indices is None:
        indices = list(np.ndindex(x.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f(x).item()
            x.data[idx] = orig - h
            fm = f(x).item()
            x.data[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(floor, abs(a)))
    return worst
