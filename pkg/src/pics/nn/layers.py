"""Layer primitives: convolution, batch normalization, activations, pooling.

Every forward returns (output, cache); every backward consumes that cache
and returns input/parameter gradients. Convolutions run as im2col with a
channel-first cols layout: the 3x3 window is gathered by nine strided
slice copies into a (C*kh*kw, N*Ho*Wo) buffer feeding a single GEMM,
which is markedly faster here than the transpose-gather layout. The
backward pass recomputes cols instead of caching them, trading a little
copy time for a much smaller training footprint.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # new_running = 0.9 * old + 0.1 * batch


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (N,C,H,W), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{name} contains non-finite values")
    return x.astype(np.float64, copy=False)


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> cols (C*kh*kw, N*Ho*Wo), channel-first layout."""
    n, c, h, w = x.shape
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        ilim = i + stride * ho
        for j in range(kw):
            jlim = j + stride * wo
            cols[:, i, j] = xp[:, :, i:ilim:stride, j:jlim:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 1):
    """y[n,o] = sum_c w[o,c] * x[n,c] (cross-correlation) + b[o]."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(wd, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = w.reshape(co, -1) @ cols
    out += b[:, None]
    y = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    cache = (x, w, stride, pad)
    return y, cache


def conv2d_backward(dy, cache):
    x, w, stride, pad = cache
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]

    dy_mat = dy.transpose(1, 0, 2, 3).reshape(co, -1)          # (Co, N*Ho*Wo)
    cols = _im2col(x, kh, kw, stride, pad)                     # recomputed
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)

    dcols = (w.reshape(co, -1).T @ dy_mat).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    for i in range(kh):
        ilim = i + stride * ho
        for j in range(kw):
            jlim = j + stride * wo
            dxp[:, :, i:ilim:stride, j:jlim:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode: str):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics (biased variance) and
    returns updated running stats blended with momentum 0.9; eval mode
    normalizes with the running stats and returns them unchanged.
    """
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mu
        new_var = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
    elif mode == "eval":
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ShapeError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, mode)
    return y, cache, new_mean, new_var


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, mode = cache
    if mode != "train":
        raise ShapeError("batchnorm backward needs a train-mode cache")
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def leaky_relu_forward(x, slope: float = 0.2):
    mask = x > 0
    y = np.where(mask, x, slope * x)
    return y, (mask, slope)


def leaky_relu_backward(dy, cache):
    mask, slope = cache
    return np.where(mask, dy, slope * dy)


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    maximal element of the window (argmax convention)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    idx, shape = cache
    n, c, h, w = shape
    dflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def upsample2_forward(x):
    """Nearest-neighbor 2x upsample."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def upsample2_backward(dy, in_shape):
    n, c, h, w = in_shape
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
