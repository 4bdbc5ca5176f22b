"""Differentiable operations over channel-major feature maps.

Feature maps are laid out ``[channels, height, width]``; convolution
weights ``[filters, in_channels, k, k]``.  Each op validates shapes up
front, computes the forward result with plain numpy, and records a
backward closure on the output tensor.  Downsampling convolutions use
floor output sizing (``(H + 2*pad - k) // stride + 1``) so that a 3x3
stride-2 convolution exactly halves even extents.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import ShapeError
from .tensor import OpNode, Tensor

L2NORM_EPS = 1e-10


def _require_chw(t: Tensor, op: str) -> tuple[int, int, int]:
    if t.ndim != 3:
        raise ShapeError(f"{op}: expected a [C,H,W] tensor, got shape {t.shape}")
    return t.shape  # type: ignore[return-value]


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    c = xp.shape[0]
    col = np.empty((c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            col[:, i, j] = xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return col.reshape(c * k * k, out_h * out_w)


def _col2im(
    dcol: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int, out_h: int, out_w: int
) -> np.ndarray:
    dxp = np.zeros((c, hp, wp), dtype=dcol.dtype)
    dcol = dcol.reshape(c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcol[
                :, i, j
            ]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C,H,W] with ``weight`` [F,C,k,k] plus ``bias`` [F]."""
    c, h, w = _require_chw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [F,C,k,k], got {weight.shape}")
    f, wc, k, _ = weight.shape
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} not supported (must be 1 or 3)")
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: output would be {out_h}x{out_w} for input {h}x{w}, "
            f"k={k}, stride={stride}, pad={pad}"
        )
    if k == 1 and stride == 1 and pad == 0:
        return _conv2d_pointwise(x, weight, bias, c, f, h, w)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _shared_im2col(x, xp, k, stride, pad, out_h, out_w)
    wmat = weight.data.reshape(f, c * k * k)
    y = wmat @ col
    y += bias.data[:, None]
    out_data = y.reshape(f, out_h, out_w)

    if not (x.requires_grad or weight.requires_grad or bias.requires_grad):
        return Tensor(out_data)

    hp, wp = xp.shape[1], xp.shape[2]

    def backward(grad: np.ndarray):
        gmat = grad.reshape(f, out_h * out_w)
        dw = (gmat @ col.T).reshape(weight.shape) if weight.requires_grad else None
        db = gmat.sum(axis=1) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _col2im(wmat.T @ gmat, c, hp, wp, k, stride, out_h, out_w)
            dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dw, db

    return Tensor(out_data, node=OpNode("conv2d", (x, weight, bias), backward))


def _shared_im2col(x: Tensor, xp, k, stride, pad, out_h, out_w):
    """Reuse the window matrix when several convs read the same input.

    The two head branches convolve identical feature maps; caching on the
    input tensor halves that im2col work.  Only op-produced tensors are
    cached: they are immutable by contract, whereas leaf tensors may be
    perturbed in place (gradient checking does exactly that).
    """
    key = (k, stride, pad)
    if x.node is None:
        return _im2col(xp, k, stride, out_h, out_w)
    cache = x._im2col_cache
    if cache is not None and cache[0] == key:
        return cache[1]
    col = _im2col(xp, k, stride, out_h, out_w)
    x._im2col_cache = (key, col)
    return col


def _conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor, c, f, h, w) -> Tensor:
    """1x1 stride-1 convolution: a plain channel-mixing GEMM, no im2col."""
    flat = x.data.reshape(c, h * w)
    wmat = weight.data.reshape(f, c)
    y = wmat @ flat
    y += bias.data[:, None]
    out_data = y.reshape(f, h, w)
    if not (x.requires_grad or weight.requires_grad or bias.requires_grad):
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        gmat = grad.reshape(f, h * w)
        dw = (gmat @ flat.T).reshape(weight.shape) if weight.requires_grad else None
        db = gmat.sum(axis=1) if bias.requires_grad else None
        dx = (wmat.T @ gmat).reshape(c, h, w) if x.requires_grad else None
        return dx, dw, db

    return Tensor(out_data, node=OpNode("conv2d", (x, weight, bias), backward))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    out_data = np.maximum(x.data, 0)
    if not x.requires_grad:
        return Tensor(out_data)
    mask = x.data > 0

    def backward(grad: np.ndarray):
        return (grad * mask,)

    return Tensor(out_data, node=OpNode("relu", (x,), backward))


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient routes to the first max per window."""
    c, h, w = _require_chw(x, "maxpool2x2")
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    out_h, out_w = h // 2, w // 2
    windows = (
        x.data.reshape(c, out_h, 2, out_w, 2).transpose(0, 1, 3, 2, 4).reshape(c, out_h, out_w, 4)
    )
    idx = windows.argmax(axis=3)  # first occurrence wins ties (row-major window order)
    out_data = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    out_data = np.ascontiguousarray(out_data)
    if not x.requires_grad:
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        dwin = np.zeros((c, out_h, out_w, 4), dtype=grad.dtype)
        np.put_along_axis(dwin, idx[..., None], grad[..., None], axis=3)
        dx = (
            dwin.reshape(c, out_h, out_w, 2, 2)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return Tensor(out_data, node=OpNode("maxpool2x2", (x,), backward))


def _bilinear_doubling_matrix(n: int, dtype) -> np.ndarray:
    """Row-interpolation matrix (2n x n): half-pixel centers, edge clamped."""
    mat = np.zeros((2 * n, n), dtype=dtype)
    for d in range(2 * n):
        s = min(max((d + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n - 1)
        frac = s - i0
        mat[d, i0] += 1.0 - frac
        mat[d, i1] += frac
    return mat


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """Double both spatial extents with half-pixel-center bilinear sampling."""
    c, h, w = _require_chw(x, "upsample_bilinear_2x")
    wh = _bilinear_doubling_matrix(h, x.dtype)
    ww = _bilinear_doubling_matrix(w, x.dtype)
    out_data = np.matmul(wh, x.data @ ww.T)
    if not x.requires_grad:
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        return (np.matmul(wh.T, grad @ ww),)

    return Tensor(out_data, node=OpNode("upsample_bilinear_2x", (x,), backward))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack [C_i,H,W] tensors along the channel axis, preserving order."""
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    shapes = [_require_chw(t, "concat_channels") for t in inputs]
    h, w = shapes[0][1], shapes[0][2]
    for i, (_, hi, wi) in enumerate(shapes):
        if (hi, wi) != (h, w):
            raise ShapeError(
                f"concat_channels: input {i} has spatial size {hi}x{wi}, expected {h}x{w}"
            )
    out_data = np.concatenate([t.data for t in inputs], axis=0)
    if not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    offsets = np.cumsum([0] + [s[0] for s in shapes])

    def backward(grad: np.ndarray):
        return tuple(
            np.ascontiguousarray(grad[offsets[i] : offsets[i + 1]]) if t.requires_grad else None
            for i, t in enumerate(inputs)
        )

    return Tensor(out_data, node=OpNode("concat_channels", tuple(inputs), backward))


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``; backward scatters into place."""
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {x.shape}")
    extent = x.shape[axis]
    if not 0 <= start < stop <= extent:
        raise ShapeError(f"narrow: range [{start},{stop}) invalid for extent {extent}")
    index = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.ndim))
    out_data = np.ascontiguousarray(x.data[index])
    if not x.requires_grad:
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[index] = grad
        return (dx,)

    return Tensor(out_data, node=OpNode("narrow", (x,), backward))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel-axis slice of a [C,H,W] tensor."""
    _require_chw(x, "slice_channels")
    return narrow(x, 0, start, stop)


def l2norm_channels(x: Tensor, scale: Tensor, eps: float = L2NORM_EPS) -> Tensor:
    """Normalize each spatial location's channel vector, then rescale.

    ``x_hat[c] = scale[c] * x[c] / sqrt(sum_c x[c]^2 + eps)`` per location.
    """
    c, _, _ = _require_chw(x, "l2norm_channels")
    if scale.shape != (c,):
        raise ShapeError(f"l2norm_channels: scale shape {scale.shape} != ({c},)")
    norm = np.sqrt((x.data * x.data).sum(axis=0) + np.asarray(eps, dtype=x.dtype))
    unit = x.data / norm
    out_data = scale.data[:, None, None] * unit
    if not (x.requires_grad or scale.requires_grad):
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        dscale = (grad * unit).sum(axis=(1, 2)) if scale.requires_grad else None
        dx = None
        if x.requires_grad:
            gs = grad * scale.data[:, None, None]
            proj = (gs * x.data).sum(axis=0) / (norm * norm * norm)
            dx = gs / norm - x.data * proj
        return dx, dscale

    return Tensor(out_data, node=OpNode("l2norm_channels", (x, scale), backward))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        return (grad if a.requires_grad else None, grad if b.requires_grad else None)

    return Tensor(out_data, node=OpNode("add", (a, b), backward))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        da = grad * b.data if a.requires_grad else None
        db = grad * a.data if b.requires_grad else None
        return da, db

    return Tensor(out_data, node=OpNode("mul", (a, b), backward))


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a single-element tensor."""
    out_data = np.array([x.data.sum()], dtype=x.dtype)
    if not x.requires_grad:
        return Tensor(out_data)

    def backward(grad: np.ndarray):
        return (np.full(x.shape, grad[0], dtype=grad.dtype),)

    return Tensor(out_data, node=OpNode("sum_all", (x,), backward))
