"""Differentiable layers and losses used by the segmentation network."""
from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from mdil import kernels
from mdil.tensor import Tensor, make_node

IGNORE_INDEX = 255
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``, no bias."""
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if pad is None:
        pad = (kh - 1) // 2
    ho = kernels.out_extent(h, kh, stride, pad)
    wo = kernels.out_extent(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent {ho}x{wo}")
    xd, wdat = x.data, w.data
    w2 = wdat.reshape(cout, -1)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        xr = xd.reshape(n, cin, h * wd)
        out = np.matmul(w2, xr).reshape(n, cout, h, wd)

        def bw(g):
            gr = g.reshape(n, cout, h * wd)
            gx = np.matmul(w2.T, gr).reshape(x.shape) if x.requires_grad else None
            gw = None
            if w.requires_grad:
                gw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            return gx, gw

        return make_node(out, (x, w), bw, "conv2d")

    cols = kernels.im2col(xd, kh, kw, stride, pad)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(w2.T @ g2, x.shape, kh, kw, stride, pad)
        return gx, gw

    return make_node(out, (x, w), bw, "conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 2, pad: Optional[int] = None) -> Tensor:
    """Stride-2 transposed convolution doubling the spatial extent.

    ``w`` has shape ``[Cin, Cout, k, k]`` with ``k`` in {2, 4}; padding defaults
    to ``(k - 2) // 2`` so that the output is exactly ``2H x 2W``.
    """
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(f"transposed_conv2d: input has {cin} channels, weight expects {wcin}")
    if stride != 2 or kh != kw or kh not in (2, 4):
        raise ValueError(f"transposed_conv2d: unsupported kernel {kh}x{kw} with stride {stride}")
    if pad is None:
        pad = (kh - 2) // 2
    if pad != (kh - 2) // 2:
        raise ValueError("transposed_conv2d: padding must keep the output at twice the input size")
    out_shape = (n, cout, 2 * h, 2 * wd)
    w2 = w.data.reshape(cin, cout * kh * kw)
    xr = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    out = kernels.col2im(w2.T @ xr, out_shape, kh, kw, stride, pad)

    def bw(g):
        gcols = kernels.im2col(g, kh, kw, stride, pad)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((w2 @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3))
        gw = (xr @ gcols.T).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return make_node(out, (x, w), bw, "transposed_conv2d")


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, mode: str, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization followed by ``scale * xhat + shift``.

    In ``train`` mode the batch statistics normalize and ``running_mean`` /
    ``running_var`` are updated in place (the variance update uses the
    unbiased estimate when more than one value per channel exists). In
    ``infer`` mode the running statistics normalize and nothing is updated.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batchnorm2d: scale/shift must have length {c}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    xd = x.data
    s = scale.data.reshape(1, c, 1, 1)
    if mode == "train":
        m = xd.size // c
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = xc * inv.reshape(1, c, 1, 1)
        out = s * xhat + shift.data.reshape(1, c, 1, 1)

        def bw(g):
            gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
            gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * s
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv.reshape(1, c, 1, 1)
            return gx, gscale, gshift

    elif mode == "infer":
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = s * xhat + shift.data.reshape(1, c, 1, 1)

        def bw(g):
            gscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
            gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
            gx = g * (s * inv.reshape(1, c, 1, 1)) if x.requires_grad else None
            return gx, gscale, gshift

    else:
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'infer', got {mode!r}")
    return make_node(out.astype(xd.dtype, copy=False), (x, scale, shift), bw, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    out = _log_softmax(x.data, axis)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.exp(_log_softmax(logits, axis))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel-wise negative log-likelihood over non-ignored pixels.

    Returns an exact zero (and warns) when every pixel is ignored.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"cross_entropy: label {int(labels[bad][0])} outside [0, {c})")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: every pixel is ignored", RuntimeWarning, stacklevel=2)
        out = make_node(np.zeros((), dtype=logits.dtype), (logits,),
                        lambda g: (np.zeros_like(logits.data),), "cross_entropy")
        out.all_ignored = True
        return out
    logp = _log_softmax(logits.data, 1)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad -= onehot
        grad *= (valid / count).astype(grad.dtype)[:, None]
        return (grad * g,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def kl_div(student: Tensor, teacher) -> Tensor:
    """KL(teacher || student) between per-pixel channel softmaxes, averaged over pixels.

    The teacher is treated as a constant; gradients reach only the student.
    """
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if t.shape != student.shape:
        raise ValueError(f"kl_div: shape mismatch {student.shape} vs {t.shape}")
    n, c = student.shape[:2]
    pixels = student.data.size // c
    log_ps = _log_softmax(student.data, 1)
    log_pt = _log_softmax(t.astype(student.dtype, copy=False), 1)
    pt = np.exp(log_pt)
    value = (pt * (log_pt - log_ps)).sum() / pixels

    def bw(g):
        return ((np.exp(log_ps) - pt) * (g / pixels),)

    return make_node(np.asarray(value, dtype=student.dtype), (student,), bw, "kl_div")
