"""Layer primitives: convolution, batch norm, bilinear resize, losses.

Convolution is computed by patch expansion (im2col) followed by one matmul;
the nested-loop reference used to cross-validate it lives in the test suite,
not here.
"""
from __future__ import annotations

import numpy as np

from . import config
from .autodiff import Tensor, accumulate, as_tensor, record


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    effective = dilation * (kernel - 1) + 1
    return (size + 2 * padding - effective) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for a in range(kh):
        ia = a * dilation
        for b in range(kw):
            jb = b * dilation
            cols[:, :, a, b] = xp[:, :, ia:ia + stride * out_h:stride, jb:jb + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, dilation: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, out_h, out_w)
    for a in range(kh):
        ia = a * dilation
        for b in range(kw):
            jb = b * dilation
            dxp[:, :, ia:ia + stride * out_h:stride, jb:jb + stride * out_w:stride] += dcols[:, :, a, b]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d convolution (cross-correlation) with dilation support, NCHW."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride}, padding={padding}, dilation={dilation}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    out_h = conv_output_size(h, kh, stride, padding, dilation)
    out_w = conv_output_size(w, kw, stride, padding, dilation)
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"conv2d: output size {out_h}x{out_w} is not positive for input {h}x{w}")

    if (kh, kw) == (1, 1) and padding == 0:
        # pointwise fast path: a single matmul over strided pixels
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        flat = np.ascontiguousarray(xs).reshape(n, c, out_h * out_w)
        w2 = weight.data.reshape(c_out, c)
        out = np.matmul(w2, flat)
        if bias is not None:
            out = out + bias.data[None, :, None]
        out = out.reshape(n, c_out, out_h, out_w)

        def bw_point(g):
            g2 = g.reshape(n, c_out, out_h * out_w)
            if bias is not None:
                accumulate(bias, g2.sum(axis=(0, 2)))
            accumulate(weight, np.einsum("nol,nfl->of", g2, flat, optimize=True).reshape(weight.shape))
            if x._needs_grad:
                dflat = np.matmul(w2.T, g2).reshape(n, c, out_h, out_w)
                if stride > 1:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dflat
                else:
                    dx = dflat
                accumulate(x, dx)

        parents = (x, weight) if bias is None else (x, weight, bias)
        return record(out, parents, bw_point)

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols)  # (n, c_out, L)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, c_out, out_h, out_w)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(n, c_out, out_h * out_w)
        if bias is not None:
            accumulate(bias, g2.sum(axis=(0, 2)))
        accumulate(weight, np.einsum("nol,nfl->of", g2, cols, optimize=True).reshape(weight.shape))
        if x._needs_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, dilation, out_h, out_w)
            accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp)

    return record(out, parents, bw)


class RunningStats:
    """Per-channel running mean/variance for eval-mode batch norm."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.initialized = False

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var
        self.initialized = True


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running: RunningStats,
               train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over (N, H, W) per channel; population variance."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({c},)")
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.update(mean.astype(np.float64), var.astype(np.float64), momentum)
    else:
        if not running.initialized:
            raise ValueError("batch_norm: eval mode before any training batch initialized running stats")
        mean = running.mean.astype(x.data.dtype)
        var = running.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale.data[None, :, None, None] * x_hat + shift.data[None, :, None, None]

    def bw(g):
        accumulate(shift, g.sum(axis=(0, 2, 3)))
        accumulate(scale, (g * x_hat).sum(axis=(0, 2, 3)))
        if not x._needs_grad:
            return
        dxh = g * scale.data[None, :, None, None]
        if train:
            m = n * h * w
            s1 = dxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxh * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxh - s1 - x_hat * s2)
        else:
            dx = dxh * inv_std[None, :, None, None]
        accumulate(x, dx)

    return record(out, (x, scale, shift), bw)


def _resize_plan(in_size: int, out_size: int):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def _scatter_last_axis(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    # move the scatter axis to the front so ufunc.at indexes it directly
    view = np.moveaxis(target, -1, 0)
    np.add.at(view, idx, np.moveaxis(values, -1, 0))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation (align-corners=false), NCHW, differentiable."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize expects NCHW, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def bw_same(g):
            accumulate(x, g)
        return record(x.data.copy(), (x,), bw_same)

    y_lo, y_hi, fy = _resize_plan(h, out_h)
    x_lo, x_hi, fx = _resize_plan(w, out_w)
    dt = x.data.dtype
    fy_col = fy.astype(dt)[:, None]
    fx_row = fx.astype(dt)
    rows = x.data[:, :, y_lo, :] * (1 - fy_col) + x.data[:, :, y_hi, :] * fy_col
    out = rows[:, :, :, x_lo] * (1 - fx_row) + rows[:, :, :, x_hi] * fx_row

    def bw(g):
        drows = np.zeros((n, c, out_h, w), dtype=g.dtype)
        _scatter_last_axis(drows, x_lo, g * (1 - fx_row))
        _scatter_last_axis(drows, x_hi, g * fx_row)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        dcols = np.moveaxis(drows, 2, -1)  # (n, c, w, out_h)
        acc = np.zeros((n, c, w, h), dtype=g.dtype)
        _scatter_last_axis(acc, y_lo, dcols * (1 - fy.astype(g.dtype)))
        _scatter_last_axis(acc, y_hi, dcols * fy.astype(g.dtype))
        dx += np.moveaxis(acc, -1, 2)
        accumulate(x, dx)

    return record(out, (x,), bw)


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of an (H, W) array on the bilinear grid."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"nearest_resize: target {out_h}x{out_w} must be positive")
    h, w = mask.shape
    if (out_h, out_w) == (h, w):
        return mask.copy()
    ys = np.clip(np.rint((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).astype(np.int64), 0, h - 1)
    xs = np.clip(np.rint((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).astype(np.int64), 0, w - 1)
    return mask[np.ix_(ys, xs)]


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixelwise negative log-likelihood over non-ignored pixels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ValueError(f"cross_entropy expects NKHW logits, got shape {logits.shape}")
    n, k, h, w = logits.shape
    if k < 2:
        raise ValueError(f"cross_entropy needs at least 2 classes, got {k}")
    if labels.shape != (n, h, w):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} does not match logits {(n, h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    valid = labels != ignore_index
    if not valid.any():
        raise ValueError("cross_entropy: every pixel is ignored; mean is undefined")
    in_range = (labels >= 0) & (labels < k)
    if not (in_range | ~valid).all():
        bad = int(labels[valid & ~in_range].flat[0])
        raise ValueError(f"cross_entropy: label {bad} outside [0, {k - 1}] and not ignore_index")

    logp = log_softmax(logits.data, axis=1)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
    m = int(valid.sum())
    loss = -(picked[valid].sum()) / m

    def bw(g):
        grad = softmax(logits.data, axis=1)
        ni = np.arange(n)[:, None, None]
        hi = np.arange(h)[None, :, None]
        wi = np.arange(w)[None, None, :]
        grad[ni, safe, hi, wi] -= 1.0
        grad *= valid[:, None, :, :]
        grad *= float(g) / m
        accumulate(logits, grad.astype(logits.data.dtype, copy=False))

    return record(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)
