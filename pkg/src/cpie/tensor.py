"""Minimal reverse-mode autodiff on numpy arrays.

Tensors are plain HWC (or any-rank) float arrays wrapped in a small graph
node. Only the operations needed by the CPI extraction model are provided:
elementwise arithmetic, reductions, channel concat, 2D convolution,
batch norm and bilinear resize. Everything runs on CPU in float32 by
default; float64 is supported for gradient checking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _as_array(x, dtype):
    a = np.asarray(x, dtype=dtype)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum away leading extra axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Node of the computation graph holding a value and optional gradient."""

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; seeds with ones if scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ------------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, self._coerce(other) * -1.0)

    def __rsub__(self, other):
        return add(self._coerce(other), self * -1.0)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(self._coerce(other), power(self, -1.0))

    def __neg__(self):
        return self * -1.0

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def _make(data, parents, backward):
    track = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (),
                  _backward=backward if track else None)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


elementwise_mul = mul


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


_relu_sign_trace = None


class relu_sign_trace:
    """Context manager collecting the sign pattern of every ReLU input.

    Two evaluations of the same graph are on a common smooth piece iff
    their patterns match; finite differences are only a valid derivative
    oracle in that case.
    """

    def __enter__(self):
        global _relu_sign_trace
        self._prev = _relu_sign_trace
        _relu_sign_trace = []
        return _relu_sign_trace

    def __exit__(self, *exc):
        global _relu_sign_trace
        _relu_sign_trace = self._prev
        return False


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    # subgradient at 0 is 0
    mask = (a.data > 0).astype(a.data.dtype)
    if _relu_sign_trace is not None:
        _relu_sign_trace.append(np.packbits(a.data > 0))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


# -- reductions and reshaping ---------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def concat_channels(tensors) -> Tensor:
    """Concatenate along the last (channel) axis; spatial dims must agree."""
    tensors = list(tensors)
    spatial = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != spatial:
            raise ShapeMismatchError(
                f"concat requires equal spatial dims, got {t.shape[:-1]} vs {spatial}")
    out_data = np.concatenate([t.data for t in tensors], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=-1)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tensors, backward)


def dot_last(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of `a` with the first axis of matrix `w`."""
    if a.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(
            f"dot_last: last dim {a.shape[-1]} != matrix rows {w.shape[0]}")
    out_data = np.tensordot(a.data, w.data, axes=([-1], [0]))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.tensordot(g, w.data.T, axes=([-1], [0])))
        if w.requires_grad:
            lead = int(np.prod(a.shape[:-1])) if a.data.ndim > 1 else 1
            am = a.data.reshape(lead, a.shape[-1])
            gm = g.reshape(lead, w.shape[-1])
            w._accumulate(am.T @ gm)

    return _make(out_data, (a, w), backward)


# -- convolution ----------------------------------------------------------------


@dataclass
class ConvSpec:
    """2D convolution geometry; input/weights are HWC / (kh,kw,Cin,Cout)."""

    kernel_size: tuple = (3, 3)
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    in_channels: int = 1
    out_channels: int = 1
    padding: str = "same"  # "same" (zero pad) or "valid"

    def pad_amount(self):
        if self.padding == "valid":
            return (0, 0)
        kh, kw = self.kernel_size
        dh, dw = self.dilation
        return (dh * (kh - 1)) // 2, (dw * (kw - 1)) // 2

    def output_size(self, in_h, in_w):
        kh, kw = self.kernel_size
        sh, sw = self.stride
        dh, dw = self.dilation
        ph, pw = self.pad_amount()
        oh = (in_h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (in_w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        return oh, ow


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """2D convolution (cross-correlation) on an HWC tensor.

    weights: (kh, kw, Cin, Cout), bias: (Cout,). Accumulates one shifted
    matmul per kernel tap, which is fast for the small kernels used here.
    """
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    dh, dw = spec.dilation
    if x.shape[-1] != spec.in_channels:
        raise ShapeMismatchError(
            f"conv2d: input channels {x.shape[-1]} != spec.in_channels {spec.in_channels}")
    if weights.shape != (kh, kw, spec.in_channels, spec.out_channels):
        raise ShapeMismatchError(
            f"conv2d: weight shape {weights.shape} != "
            f"{(kh, kw, spec.in_channels, spec.out_channels)}")
    if bias.shape != (spec.out_channels,):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")

    in_h, in_w, _ = x.shape
    ph, pw = spec.pad_amount()
    oh, ow = spec.output_size(in_h, in_w)
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))

    out_data = np.tile(bias.data, (oh, ow, 1)).astype(x.dtype)
    slices = []
    for a in range(kh):
        for b in range(kw):
            r0, c0 = a * dh, b * dw
            sl = (slice(r0, r0 + (oh - 1) * sh + 1, sh),
                  slice(c0, c0 + (ow - 1) * sw + 1, sw))
            slices.append(sl)
            out_data += np.tensordot(xp[sl], weights.data[a, b], axes=([-1], [0]))

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        need_x = x.requires_grad
        need_w = weights.requires_grad
        if not (need_x or need_w):
            return
        gxp = np.zeros_like(xp) if need_x else None
        idx = 0
        for a in range(kh):
            for b in range(kw):
                sl = slices[idx]
                idx += 1
                if need_w:
                    weights._accumulate_at(a, b, np.tensordot(
                        xp[sl], g, axes=([0, 1], [0, 1])))
                if need_x:
                    gxp[sl] += np.tensordot(g, weights.data[a, b].T, axes=([-1], [0]))
        if need_x:
            if ph or pw:
                gxp = gxp[ph:ph + in_h, pw:pw + in_w]
            x._accumulate(gxp)

    return _make(out_data, (x, weights, bias), backward)


def _accumulate_at(self, a, b, g):
    if self.grad is None:
        self.grad = np.zeros_like(self.data)
    self.grad[a, b] += g


Tensor._accumulate_at = _accumulate_at


# -- batch norm -----------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial dims of an HWC map.

    In train mode running stats are updated in place with the given momentum;
    in infer mode they are used directly.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f"batch_norm: params must have shape ({c},)")
    n = x.shape[0] * x.shape[1]
    if train:
        mu = x.data.mean(axis=(0, 1))
        var = x.data.var(axis=(0, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 1)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 1)))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data
        if train:
            # gradient through the batch statistics
            gsum = gxhat.sum(axis=(0, 1))
            gdot = (gxhat * xhat).sum(axis=(0, 1))
            gx = (gxhat - gsum / n - xhat * gdot / n) * ivar
        else:
            gx = gxhat * ivar
        x._accumulate(gx)

    return _make(out_data, (x, gamma, beta), backward)


# -- bilinear resize --------------------------------------------------------------


def _resize_coords(n_out, n_in, dtype):
    # half-pixel-center convention, clamped to the valid range
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an HWC tensor (half-pixel centers)."""
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError("bilinear_resize: output dims must be >= 1")
    in_h, in_w = x.shape[0], x.shape[1]
    i0, i1, wi = _resize_coords(out_h, in_h, x.dtype)
    j0, j1, wj = _resize_coords(out_w, in_w, x.dtype)
    wi = wi[:, None, None]
    wj = wj[None, :, None]
    d = x.data
    out_data = ((1 - wi) * (1 - wj) * d[np.ix_(i0, j0)]
                + (1 - wi) * wj * d[np.ix_(i0, j1)]
                + wi * (1 - wj) * d[np.ix_(i1, j0)]
                + wi * wj * d[np.ix_(i1, j1)])

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(d)
        ii0 = np.repeat(i0, out_w)
        ii1 = np.repeat(i1, out_w)
        jj0 = np.tile(j0, out_h)
        jj1 = np.tile(j1, out_h)
        wif = np.repeat(wi[:, 0, 0], out_w)[:, None]
        wjf = np.tile(wj[0, :, 0], out_h)[:, None]
        gf = g.reshape(out_h * out_w, -1)
        np.add.at(gx, (ii0, jj0), ((1 - wif) * (1 - wjf) * gf).astype(d.dtype))
        np.add.at(gx, (ii0, jj1), ((1 - wif) * wjf * gf).astype(d.dtype))
        np.add.at(gx, (ii1, jj0), (wif * (1 - wjf) * gf).astype(d.dtype))
        np.add.at(gx, (ii1, jj1), (wif * wjf * gf).astype(d.dtype))
        x._accumulate(gx)

    return _make(out_data, (x,), backward)


# -- snapshots --------------------------------------------------------------------

_MAGIC = b"TSNP"


def save_tensor(path, array: np.ndarray):
    """Write a little-endian float32 snapshot: magic, ndim, dims, flat data."""
    a = np.asarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<i", a.ndim))
        f.write(struct.pack(f"<{a.ndim}i", *a.shape))
        f.write(a.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a tensor snapshot")
        ndim, = struct.unpack("<i", f.read(4))
        shape = struct.unpack(f"<{ndim}i", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match dims header")
    return data.reshape(shape).copy()


# -- gradient checking -------------------------------------------------------------


def numeric_gradient(fn, tensors, index, step=1e-3):
    """Central finite differences of scalar fn() w.r.t. tensors[index].data."""
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor=1e-4) -> float:
    """Max elementwise relative error with a small absolute floor."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
