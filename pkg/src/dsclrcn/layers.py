"""Non-recurrent layers with paired forward/backward passes.

Feature maps are ``(H, W, C)``; the ``*_forward``/``*_backward`` functions
work on batched ``(B, H, W, C)`` arrays and return a cache from the forward
pass. Single-map convenience wrappers mirror the batched functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ConfigError, DegenerateInputError, ShapeError

NORM_EPS = 1e-12
BLUR_SIGMA_FRACTION = 0.035


@dataclass
class Conv2DParams:
    kernels: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    stride: int = 1
    dilation: int = 1
    activation: str = "none"

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ShapeError(f"kernels must be out x in x kh x kw, got {self.kernels.shape}")
        kh, kw = self.kernels.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.dilation < 1:
            raise ConfigError("stride and dilation must be >= 1")
        if self.activation not in ("none", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} outputs")

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]


@dataclass
class L2NormScaleParams:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"L2-norm scale must be positive, got {self.scale}")


# --- convolution --------------------------------------------------------------

def conv2d_forward(x, kernels, bias, stride=1, dilation=1, activation="none"):
    if x.shape[-1] != kernels.shape[1]:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernels expect {kernels.shape[1]}")
    out = _kernels.active().conv2d_forward(x, kernels, bias, stride, dilation)
    if activation == "relu":
        out = np.maximum(out, 0)
    return out, (x, kernels, stride, dilation, activation, out)


def conv2d_backward(dout, cache):
    x, kernels, stride, dilation, activation, out = cache
    if activation == "relu":
        dout = dout * (out > 0)
    return _kernels.active().conv2d_backward(dout, x, kernels, stride, dilation)


def dilated_conv_forward(x: np.ndarray, params: Conv2DParams) -> np.ndarray:
    """Zero-padded 'same' convolution of one ``(H, W, C)`` map."""
    out, _ = conv2d_forward(
        x[None], params.kernels, params.bias, params.stride, params.dilation, params.activation
    )
    return out[0]


def receptive_field(layers) -> int:
    """Receptive field of a stack of ``(kernel, stride, dilation)`` layers."""
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += d * (k - 1) * jump
        jump *= s
    return rf


# --- pooling ------------------------------------------------------------------

def maxpool_forward(x, size=2, stride=2):
    """Max pooling with ceil-mode output ``ceil(H / stride)``."""
    B, H, W, C = x.shape
    Ho, Wo = -(-H // stride), -(-W // stride)
    eh = max(0, (Ho - 1) * stride + size - H)
    ew = max(0, (Wo - 1) * stride + size - W)
    xp = np.pad(x, ((0, 0), (0, eh), (0, ew), (0, 0)), constant_values=-np.inf)
    taps = np.stack(
        [
            xp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
            for i in range(size)
            for j in range(size)
        ]
    )
    arg = taps.argmax(axis=0)
    out = np.take_along_axis(taps, arg[None], axis=0)[0]
    return out, (x.shape, xp.shape, arg, size, stride)


def maxpool_backward(dout, cache):
    shape, padded, arg, size, stride = cache
    B, H, W, C = shape
    Ho, Wo = dout.shape[1:3]
    dxp = np.zeros(padded, dtype=dout.dtype)
    for t in range(size * size):
        i, j = divmod(t, size)
        view = dxp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
        view += np.where(arg == t, dout, 0)
    return np.ascontiguousarray(dxp[:, :H, :W, :])


# --- L2 normalisation -----------------------------------------------------------

def l2norm_scale_forward(x, scale):
    """Scale each sample (leading axis) to L2 norm ``scale`` over all its elements."""
    flat = x.reshape(x.shape[0], -1)
    norms = np.sqrt(np.einsum("bi,bi->b", flat, flat))
    if np.any(norms < NORM_EPS):
        raise DegenerateInputError("L2-norm layer received an (almost) all-zero input")
    unit = flat / norms[:, None]
    out = (scale * unit).reshape(x.shape)
    return out, (unit, norms, scale, x.shape)


def l2norm_scale_backward(dout, cache):
    """Returns ``(dx, dscale)``."""
    unit, norms, scale, shape = cache
    g = dout.reshape(shape[0], -1)
    proj = np.einsum("bi,bi->b", g, unit)
    dscale = proj.sum()
    dx = scale * (g - unit * proj[:, None]) / norms[:, None]
    return dx.reshape(shape), dscale


def l2norm_scale(x: np.ndarray, params: L2NormScaleParams) -> np.ndarray:
    out, _ = l2norm_scale_forward(x[None], params.scale)
    return out[0]


# --- softmax over a whole map ---------------------------------------------------

def softmax_map_forward(logits):
    """Softmax over all positions of each ``(H, W)`` map in a ``(B, H, W)`` batch."""
    B = logits.shape[0]
    z = logits.reshape(B, -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=1, keepdims=True)).reshape(logits.shape)
    return out, out


def softmax_map_backward(dout, cache):
    y = cache
    B = y.shape[0]
    yf = y.reshape(B, -1)
    gf = dout.reshape(B, -1)
    return (yf * (gf - np.einsum("bi,bi->b", yf, gf)[:, None])).reshape(y.shape)


def softmax_map(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_map needs finite logits")
    out, _ = softmax_map_forward(logits[None, ..., 0])
    return out[0][..., None]


# --- bilinear upsampling ---------------------------------------------------------

def bilinear_kernel_1d(factor: int, dtype=np.float64) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    size = 2 * factor - factor % 2
    center = (size - 1) / (2 * factor)
    i = np.arange(size)
    return (1 - np.abs(i / factor - center)).astype(dtype)


def bilinear_kernel_2d(factor: int, dtype=np.float64) -> np.ndarray:
    k = bilinear_kernel_1d(factor, dtype)
    return np.outer(k, k)


def upsample_forward(x, factor):
    """Fixed bilinear transposed convolution of ``(B, H, W)`` maps."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return _kernels.active().upsample(x, bilinear_kernel_1d(factor, x.dtype), factor)


def upsample_backward(dout, factor):
    if factor == 1:
        return dout.copy()
    return _kernels.active().upsample_backward(dout, bilinear_kernel_1d(factor, dout.dtype), factor)


def bilinear_upsample(m: np.ndarray, factor: int) -> np.ndarray:
    """Upsample an ``(H, W, 1)`` map to ``(H*factor, W*factor, 1)``."""
    return upsample_forward(m[None, ..., 0], factor)[0][..., None]


# --- gaussian blur -----------------------------------------------------------------

def blur_sigma(height: int, width: int) -> float:
    return BLUR_SIGMA_FRACTION * min(height, width)


def blur_size(sigma: float) -> int:
    """Filter width ``round(4 sigma)``, bumped to the next odd number."""
    size = int(math.floor(4 * sigma + 0.5))
    if size % 2 == 0:
        size += 1
    return size


def gaussian_kernel_1d(sigma: float, size: int | None = None, dtype=np.float64) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    size = blur_size(sigma) if size is None else size
    if size % 2 == 0:
        size += 1
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2 * sigma * sigma))
    return (k / k.sum()).astype(dtype)


def gaussian_blur(m: np.ndarray, sigma: float, size: int | None = None) -> np.ndarray:
    """Separable Gaussian blur of an ``(H, W)`` or ``(H, W, 1)`` map.

    Near the borders the kernel is renormalised over in-bounds taps, so a
    constant map is returned unchanged.
    """
    squeeze = m.ndim == 3
    x = m[..., 0] if squeeze else m
    x = np.asarray(x, dtype=np.result_type(x.dtype, np.float32))
    out = _kernels.active().blur(x, gaussian_kernel_1d(sigma, size, x.dtype))
    return out[..., None] if squeeze else out


# --- misc -----------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, shape) -> np.ndarray:
    """Resize the first two axes of ``img`` to ``shape`` (pixel-centre aligned)."""
    h, w = shape
    if img.shape[:2] == (h, w):
        return img.copy()
    zoom = (h / img.shape[0], w / img.shape[1]) + (1,) * (img.ndim - 2)
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return out[:h, :w]
