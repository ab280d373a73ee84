"""Deterministic tensor math for the reference engine.

Everything works on float64 numpy arrays in NCHW layout. Convolution is
lowered to a patch matrix (im2col) whose column order is channel-major,
then kernel row, then kernel column; the crossbar mapper relies on the
same order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spindrop.errors import DimensionError

BN_EPS = 1e-5
STE_CLIP = 1.0


class DegenerateLayerWarning(UserWarning):
    """A weight tensor with zero spread was normalized."""


@dataclass
class ConvWeight:
    proxy: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.proxy = np.asarray(self.proxy, dtype=np.float64)
        if self.proxy.ndim != 4 or self.proxy.shape[2] != self.proxy.shape[3]:
            raise DimensionError(f"conv weight must be (C_out, C_in, K, K), got {self.proxy.shape}")
        if self.proxy.shape[2] < 1 or self.stride < 1 or self.padding < 0:
            raise DimensionError("kernel size and stride must be >= 1, padding >= 0")
        if not np.all(np.isfinite(self.proxy)):
            raise ValueError("conv weight contains non-finite values")

    @property
    def c_out(self) -> int:
        return self.proxy.shape[0]

    @property
    def c_in(self) -> int:
        return self.proxy.shape[1]

    @property
    def k(self) -> int:
        return self.proxy.shape[2]

    def binary_view(self) -> np.ndarray:
        return binarize(normalize_weights(self.proxy))


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Return patches with shape (B, H_out, W_out, C*K*K)."""
    b, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} with stride {stride}, pad {pad} does not fit input {x.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, K, K) -> (B, Ho, Wo, C, K, K)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    b, c, h, w = x_shape
    _, ho, wo, _ = dcols.shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += d[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def conv2d_kernel(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolve ``x`` (B, C_in, H, W) with an explicit (C_out, C_in, K, K) kernel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"input must be 4D (batch, channels, height, width), got {x.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"input {x.shape} has {x.shape[1]} channels but weight {kernel.shape} expects {kernel.shape[1]}")
    k = kernel.shape[2]
    cols = im2col(x, k, stride, pad)
    out = cols @ kernel.reshape(kernel.shape[0], -1).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, w: ConvWeight, weights_binary: bool = False) -> np.ndarray:
    kernel = w.binary_view() if weights_binary else w.proxy
    return conv2d_kernel(x, kernel, w.stride, w.padding)


def conv2d_backward(dy, x, kernel, stride=1, pad=0):
    """Gradients of ``conv2d_kernel`` with respect to input and kernel."""
    c_out, c_in, k, _ = kernel.shape
    cols = im2col(x, k, stride, pad)
    dy_t = dy.transpose(0, 2, 3, 1)  # (B, Ho, Wo, C_out)
    dkernel = np.tensordot(dy_t, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(kernel.shape)
    dcols = dy_t @ kernel.reshape(c_out, -1)
    dx = col2im(dcols, x.shape, k, stride, pad)
    return dx, dkernel


def normalize_weights(w) -> np.ndarray:
    """Standardize a whole layer's weights to zero mean and unit std.

    A layer whose weights are all equal normalizes to zeros and emits a
    :class:`DegenerateLayerWarning`.
    """
    proxy = w.proxy if isinstance(w, ConvWeight) else np.asarray(w, dtype=np.float64)
    mu = proxy.mean()
    sigma = proxy.std()
    if sigma == 0.0:
        warnings.warn(f"degenerate layer: all {proxy.size} weights equal", DegenerateLayerWarning, stacklevel=2)
        return np.zeros_like(proxy)
    return (proxy - mu) / sigma


def binarize(w_normalized) -> np.ndarray:
    return np.where(np.asarray(w_normalized) >= 0, 1.0, -1.0)


def sign_activation(x) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def ste_backward(upstream_grad, proxy, clip: float = STE_CLIP) -> np.ndarray:
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    proxy = np.asarray(proxy)
    if upstream_grad.shape != proxy.shape:
        raise DimensionError(f"gradient shape {upstream_grad.shape} does not match {proxy.shape}")
    return np.where(np.abs(proxy) <= clip, upstream_grad, 0.0)


def linear(x, W, b=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"input {x.shape} does not match weight {W.shape}")
    out = x @ W.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias {b.shape} does not match weight {W.shape}")
        out = out + b
    return out


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_shape(x):
    return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)


def batchnorm(x, mean, var, gamma, beta, eps: float = BN_EPS) -> np.ndarray:
    """Per-channel normalization with fixed statistics (inference mode)."""
    s = _bn_shape(x)
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    return (x - np.reshape(mean, s)) * np.reshape(inv * gamma, s) + np.reshape(beta, s)


def batchnorm_train(x, gamma, beta, eps: float = BN_EPS):
    """Batch-statistics normalization; returns (out, batch_mean, batch_var, cache)."""
    axes, s = _bn_axes(x), _bn_shape(x)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(s)) * inv.reshape(s)
    out = xhat * np.reshape(gamma, s) + np.reshape(beta, s)
    return out, mean, var, (xhat, inv)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv = cache
    axes, s = _bn_axes(dy), _bn_shape(dy)
    m = dy.size // dy.shape[1]
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * np.reshape(gamma, s)
    dx = (inv.reshape(s) / m) * (m * dxhat - dxhat.sum(axis=axes).reshape(s) - xhat * (dxhat * xhat).sum(axis=axes).reshape(s))
    return dx, dgamma, dbeta


def avgpool2d(x, k: int = 2) -> np.ndarray:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"pool size {k} does not divide spatial dims {(h, w)}")
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool2d_backward(dy, k: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)


def adaptive_avgpool_to_1x1(x) -> np.ndarray:
    """Average every channel to a single value: (B, C, H, W) -> (B, C)."""
    return np.asarray(x, dtype=np.float64).mean(axis=(2, 3))


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -np.mean(np.log(np.maximum(p[idx, labels], 1e-300)))
    grad = p.copy()
    grad[idx, labels] -= 1.0
    return loss, grad / n
