"""Differentiable array operations built on the tensor engine.

All spatial ops take NCHW tensors. Convolution is cross-correlation with
zero padding; bilinear resizing follows the align-corners-false convention.
"""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor

__all__ = [
    "matmul",
    "linear",
    "conv2d",
    "maxpool2d",
    "avgpool2x2",
    "bilinear_resize",
    "layer_norm",
    "softmax",
    "dropout",
    "batch_norm2d",
    "global_avg_pool",
    "pad_reflect",
    "concat",
    "stack",
]


def matmul(a, b) -> Tensor:
    return as_tensor(a).matmul(b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[out, in]^T + bias[out]."""
    y = x.matmul(weight.transpose(1, 0))
    if bias is not None:
        y = y + bias
    return y


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, k*k, oh*ow) window view (copied)."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c, k * k, oh * ow)


def _col2im(gcols: np.ndarray, shape, k: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; gcols is (N, C, k*k, oh*ow)."""
    n, c, h, w = shape
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g = gcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    x: (N, C_in, H, W); weight: (C_out, C_in/groups, k, k).
    Depthwise convolution is groups == C_in with per-channel kernels.
    """
    x = as_tensor(x)
    n, cin, h, w = x.shape
    cout, cg, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if cin % groups or cout % groups or cg != cin // groups:
        raise DimensionError(
            f"channel/groups mismatch: C_in={cin}, C_out={cout}, groups={groups}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"non-positive conv output dims ({oh}x{ow})")

    parents = (x, weight) if bias is None else (x, weight, bias)

    if k == 1 and stride == 1 and pad == 0 and groups == 1:
        # pointwise conv: a single channel-mixing matmul
        wmat = weight.data.reshape(cout, cin)
        xflat = x.data.reshape(n, cin, h * w)
        out = np.matmul(wmat, xflat).reshape(n, cout, h, w)
        if bias is not None:
            out = out + bias.data.reshape(1, cout, 1, 1)

        def backward_point(gout):
            gflat = gout.reshape(n, cout, h * w)
            gw = np.matmul(gflat, xflat.transpose(0, 2, 1)).sum(axis=0) \
                .reshape(weight.shape)
            gx = np.matmul(wmat.T, gflat).reshape(x.shape)
            if bias is None:
                return gx, gw
            return gx, gw, gout.sum(axis=(0, 2, 3))

        return Tensor._make(out, parents, backward_point)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data

    if groups == cin and cout == cin:
        # depthwise: nine shifted multiply-adds beat im2col copies here
        wd = weight.data.reshape(cin, k, k)
        out = np.zeros((n, cin, oh, ow), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += wd[:, i, j][None, :, None, None] * \
                    xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        if bias is not None:
            out = out + bias.data.reshape(1, cout, 1, 1)

        def backward_depth(gout):
            sn, sc, sh, sw = xp.strides
            view = np.lib.stride_tricks.as_strided(
                xp, shape=(n, cin, k, k, oh, ow),
                strides=(sn, sc, sh, sw, sh * stride, sw * stride),
                writeable=False)
            gw = np.einsum("nchw,ncijhw->cij", gout, view).reshape(weight.shape)
            gxp = np.zeros(xp.shape, dtype=gout.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                        gout * wd[:, i, j][None, :, None, None])
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            if bias is None:
                return gx, gw
            return gx, gw, gout.sum(axis=(0, 2, 3))

        return Tensor._make(out, parents, backward_depth)

    cols = _im2col(xp, k, stride, oh, ow)  # (N, C, kk, L)
    og = cout // groups
    if groups == 1:
        wmat = weight.data.reshape(cout, cin * k * k)
        out = np.matmul(wmat, cols.reshape(n, cin * k * k, oh * ow))
    else:
        colg = cols.reshape(n, groups, cg * k * k, oh * ow)
        wg = weight.data.reshape(groups, og, cg * k * k)
        out = np.matmul(wg, colg).reshape(n, cout, oh * ow)
    out = out.reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(gout):
        gflat = gout.reshape(n, cout, oh * ow)
        if groups == 1:
            wmat = weight.data.reshape(cout, cin * k * k)
            cflat = cols.reshape(n, cin * k * k, oh * ow)
            gw = np.einsum("nol,nkl->ok", gflat, cflat).reshape(weight.shape)
            gcols = np.matmul(wmat.T, gflat).reshape(n, cin, k * k, oh * ow)
        else:
            gg = gflat.reshape(n, groups, og, oh * ow)
            colg = cols.reshape(n, groups, cg * k * k, oh * ow)
            gw = np.einsum("ngol,ngkl->gok", gg, colg).reshape(weight.shape)
            wg = weight.data.reshape(groups, og, cg * k * k)
            gcols = np.matmul(np.swapaxes(wg, -1, -2), gg)
            gcols = gcols.reshape(n, cin, k * k, oh * ow)
        gx = _col2im(gcols, x.shape, k, stride, pad, oh, ow)
        if bias is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling with "same"-style padding (-inf fill).

    Output spatial size is ceil(H/stride); pad = (k-1)//2.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError("pool kernel larger than input")
    pad = (k - 1) // 2
    oh = -(-h // stride)
    ow = -(-w // stride)
    need_h = (oh - 1) * stride + k
    need_w = (ow - 1) * stride + k
    pad_b = need_h - h - pad
    pad_r = need_w - w - pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, max(pad_b, 0)), (pad, max(pad_r, 0))),
                constant_values=-np.inf)
    cols = _im2col(xp, k, stride, oh, ow)  # (N, C, kk, L)
    amax = cols.argmax(axis=2)
    out = np.take_along_axis(cols, amax[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(n, c, oh, ow)

    def backward(gout):
        g = gout.reshape(n, c, oh * ow)
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, amax[:, :, None, :], g[:, :, None, :], axis=2)
        gxp = np.zeros(xp.shape, dtype=gout.dtype)
        gk = gcols.reshape(n, c, k, k, oh, ow)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gk[:, :, i, j]
        return (gxp[:, :, pad:pad + h, pad:pad + w],)

    return Tensor._make(out, (x,), backward)


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (trailing odd row/col dropped)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, :h2 * 2, :w2 * 2]
    v = v.reshape(n, c, h2, 2, w2, 2)
    return v.mean(axis=5).mean(axis=3)


def _resize_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """1-D bilinear interpolation matrix (align-corners-false)."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    scale = in_size / out_size
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    m[np.arange(out_size), lo] += (1.0 - frac)
    m[np.arange(out_size), hi] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (..., H, W); exact at identity sizes."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError("output dims must be >= 1")
    h, w = x.shape[-2], x.shape[-1]
    if out_h == h and out_w == w:
        return x * 1.0
    ry = _resize_matrix(out_h, h, x.dtype)
    rx = _resize_matrix(out_w, w, x.dtype)
    # out = Ry @ x @ Rx^T over the trailing two axes
    out = np.matmul(ry, np.matmul(x.data, rx.T))

    def backward(g):
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, axis: int, gain: Tensor, bias: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`, then affine.

    gain/bias are 1-D with length equal to the normalized axis and are
    broadcast into position.
    """
    x = as_tensor(x)
    dim = x.shape[axis]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError("gain/bias length must equal the normalized axis size")
    shape = [1] * x.ndim
    shape[axis] = dim
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    xn = xc / (var + eps).sqrt()
    return xn * gain.reshape(shape) + bias.reshape(shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtracted)."""
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)


def batch_norm2d(x: Tensor, gain: Tensor, bias: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 momentum: float, training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm on NCHW; updates running stats in training."""
    x = as_tensor(x)
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.data.reshape(c)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.data.reshape(c)
        xn = xc / (var + eps).sqrt()
    else:
        xn = (x - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
    return xn * gain.reshape(shape) + bias.reshape(shape)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3))


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the trailing two axes on the bottom/right only."""
    x = as_tensor(x)
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    out = np.pad(x.data, widths, mode="reflect")

    h, w = x.shape[-2], x.shape[-1]

    def backward(g):
        g = g.copy()
        # reflected rows/cols fold their gradient back onto the interior
        for j in range(pad_w):
            g[..., :, w - 2 - j] += g[..., :, w + j]
        g = g[..., :, :w]
        for i in range(pad_h):
            g[..., h - 2 - i, :] += g[..., h + i, :]
        return (np.ascontiguousarray(g[..., :h, :]),)

    return Tensor._make(out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return Tensor._make(out, tuple(tensors), backward)
