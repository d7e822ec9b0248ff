"""Stride-8 local feature encoders, the 128-d scene encoder and feature loaders.

Parameters live in a flat ``{name: ndarray}`` dict shared with the rest of
the model; every function here takes a ``prefix`` so several encoders can
coexist in one dict.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError
from .numerics import load_tensor

SCENE_DIM = 128


@dataclass(frozen=True)
class Block:
    """``repeat`` conv layers of ``[channels, kernel, stride, dilation]``.

    The stride applies to the first layer of the block only; ``pool`` is an
    optional ``(kernel, stride)`` max pool after the block.
    """

    channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    repeat: int = 1
    activation: str = "relu"
    pool: Optional[tuple] = None

    def layer_settings(self):
        for r in range(self.repeat):
            yield self.kernel, (self.stride if r == 0 else 1), self.dilation

    def to_string(self) -> str:
        pool = "-" if self.pool is None else f"{self.pool[0]}/{self.pool[1]}"
        return (f"{self.channels},{self.kernel},{self.stride},{self.dilation},"
                f"{self.repeat},{self.activation},{pool}")

    @classmethod
    def parse(cls, text: str) -> "Block":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 7:
            raise ConfigError(f"block string needs 7 fields, got {text!r}")
        ch, k, s, d, r = (int(p) for p in parts[:5])
        pool = None if parts[6] in ("-", "") else tuple(int(v) for v in parts[6].split("/"))
        return cls(ch, k, s, d, r, parts[5], pool)


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple
    l2_scale: float = 400.0
    in_channels: int = 3
    # multilayer fusion: two block indices whose outputs are tapped
    taps: Optional[tuple] = None
    tap_channels: int = 16
    output_channels: Optional[int] = None

    def __post_init__(self):
        if self.stride_product() != 8:
            raise ConfigError(f"encoder strides must multiply to 8, got {self.stride_product()}")
        if self.taps is not None:
            if len(self.taps) != 2 or not all(0 <= t < len(self.blocks) for t in self.taps):
                raise ConfigError(f"need two valid tap block indices, got {self.taps}")
            if self.output_channels is None:
                raise ConfigError("multilayer encoder needs output_channels")

    def stride_product(self) -> int:
        total = 1
        for b in self.blocks:
            total *= b.stride * (b.pool[1] if b.pool else 1)
        return total

    @property
    def channels(self) -> int:
        if self.taps is not None:
            return self.output_channels
        return self.blocks[-1].channels

    def layer_settings(self, upto: Optional[int] = None):
        """``(kernel, stride, dilation)`` of every conv/pool layer, in order."""
        out = []
        for bi, b in enumerate(self.blocks):
            if upto is not None and bi > upto:
                break
            out.extend(b.layer_settings())
            if b.pool:
                out.append((b.pool[0], b.pool[1], 1))
        return out

    def receptive_field(self, upto: Optional[int] = None) -> int:
        return L.receptive_field(self.layer_settings(upto))

    def blocks_string(self) -> str:
        return ";".join(b.to_string() for b in self.blocks)


@dataclass(frozen=True)
class SceneEncoderConfig:
    blocks: tuple = (Block(8, 3, 2), Block(16, 3, 2))
    input_size: tuple = (32, 32)
    fc_dim: int = SCENE_DIM
    l2_scale: float = 9.0
    in_channels: int = 3

    @property
    def channels(self) -> int:
        return self.blocks[-1].channels


def toy_encoder_config(dilation: int = 2, extra_blocks: int = 0, l2_scale: float = 400.0,
                       width: int = 32) -> EncoderConfig:
    """Reduced-width VGG-like stack: three conv+pool stages then dilated convs."""
    blocks = [
        Block(8, 3, pool=(2, 2)),
        Block(16, 3, pool=(2, 2)),
        Block(width, 3, pool=(2, 2)),
        Block(width, 3, dilation=dilation),
    ]
    blocks += [Block(width, 3, dilation=dilation)] * extra_blocks
    return EncoderConfig(tuple(blocks), l2_scale=l2_scale)


def toy_multilayer_config(output_channels: int = 32, tap_channels: int = 16) -> EncoderConfig:
    base = toy_encoder_config()
    return EncoderConfig(base.blocks, base.l2_scale, taps=(2, 3), tap_channels=tap_channels,
                         output_channels=output_channels)


def vgg16_dilated_config() -> EncoderConfig:
    """Layer schema of the dilated VGG-16 extractor (untrained)."""
    return EncoderConfig(
        (
            Block(64, 3, repeat=2, pool=(2, 2)),
            Block(128, 3, repeat=2, pool=(2, 2)),
            Block(256, 3, repeat=3, pool=(2, 2)),
            Block(512, 3, repeat=3),
            Block(512, 3, dilation=2, repeat=3),
            Block(512, 3, dilation=4, repeat=2),
            Block(512, 3, dilation=4, repeat=2),
        ),
        l2_scale=400.0,
    )


def resnet50_dilated_schema() -> EncoderConfig:
    """Flattened conv schema of the dilated ResNet-50 extractor.

    Residual shortcuts and batch norm are not modelled; this preset is for
    shape and stride bookkeeping. Even-sized pooling replaces the 3x3/2 pool.
    """
    def bottleneck(mid, out, stride, dilation, times):
        first = (Block(mid, 1, stride), Block(mid, 3, dilation=dilation), Block(out, 1))
        rest = (Block(mid, 1), Block(mid, 3, dilation=dilation), Block(out, 1))
        return first + rest * (times - 1)

    blocks = (Block(64, 7, 2, pool=(3, 2)),)
    blocks += bottleneck(64, 256, 1, 1, 3)
    blocks += bottleneck(128, 512, 2, 1, 4)
    blocks += bottleneck(256, 1024, 1, 2, 6)
    blocks += bottleneck(512, 2048, 1, 2, 3)
    blocks += (Block(512, 1),)
    return EncoderConfig(blocks, l2_scale=400.0)


# --- parameters ---------------------------------------------------------------------

def _conv_init(rng, out_ch, in_ch, k, dtype):
    fan_in = in_ch * k * k
    r = np.sqrt(6.0 / fan_in)
    return rng.uniform(-r, r, size=(out_ch, in_ch, k, k)).astype(dtype)


def param_rng(seed: int, name: str):
    """Independent stream per parameter name, so adding tensors never shifts others."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _conv_layers(blocks, in_channels):
    c = in_channels
    for bi, b in enumerate(blocks):
        for li, (k, s, d) in enumerate(b.layer_settings()):
            yield bi, li, c, b, k, s, d
            c = b.channels


def init_encoder_params(config: EncoderConfig, seed: int, prefix: str = "enc",
                        dtype=np.float64) -> dict:
    p = {}
    for bi, li, cin, b, k, s, d in _conv_layers(config.blocks, config.in_channels):
        name = f"{prefix}.b{bi}.l{li}"
        p[name + ".w"] = _conv_init(param_rng(seed, name + ".w"), b.channels, cin, k, dtype)
        p[name + ".b"] = np.zeros(b.channels, dtype)
    if config.taps is not None:
        for k, t in enumerate(config.taps):
            cin = config.blocks[t].channels
            name = f"{prefix}.tap{k}"
            p[name + ".w"] = _conv_init(param_rng(seed, name + ".w"), config.tap_channels, cin, 1, dtype)
            p[name + ".b"] = np.zeros(config.tap_channels, dtype)
        name = f"{prefix}.fuse"
        p[name + ".w"] = _conv_init(param_rng(seed, name + ".w"), config.output_channels,
                                    2 * config.tap_channels, 1, dtype)
        p[name + ".b"] = np.zeros(config.output_channels, dtype)
    p[f"{prefix}.scale"] = np.array([config.l2_scale], dtype)
    return p


def init_scene_params(config: SceneEncoderConfig, seed: int, prefix: str = "scene",
                      dtype=np.float64) -> dict:
    p = {}
    for bi, li, cin, b, k, s, d in _conv_layers(config.blocks, config.in_channels):
        name = f"{prefix}.b{bi}.l{li}"
        p[name + ".w"] = _conv_init(param_rng(seed, name + ".w"), b.channels, cin, k, dtype)
        p[name + ".b"] = np.zeros(b.channels, dtype)
    r = np.sqrt(6.0 / config.channels)
    p[f"{prefix}.fc.w"] = param_rng(seed, f"{prefix}.fc.w").uniform(
        -r, r, size=(config.fc_dim, config.channels)).astype(dtype)
    # small positive bias keeps some units alive so the L2 layer never sees zeros
    p[f"{prefix}.fc.b"] = np.full(config.fc_dim, 0.1, dtype)
    p[f"{prefix}.scale"] = np.array([config.l2_scale], dtype)
    return p


# --- forward / backward ----------------------------------------------------------------

def _blocks_forward(p, blocks, in_channels, x, prefix, keep_outputs=False):
    caches = []
    outs = []
    for bi, b in enumerate(blocks):
        for li, (k, s, d) in enumerate(b.layer_settings()):
            name = f"{prefix}.b{bi}.l{li}"
            x, c = L.conv2d_forward(x, p[name + ".w"], p[name + ".b"], s, d, b.activation)
            caches.append(("conv", name, c))
        if b.pool:
            x, c = L.maxpool_forward(x, *b.pool)
            caches.append(("pool", None, c))
        outs.append(x)
    return x, caches, outs


def _blocks_backward(dx, caches, grads, block_grads=None):
    """Backprop through conv/pool caches; ``block_grads`` maps cache index -> extra grad."""
    for idx in range(len(caches) - 1, -1, -1):
        if block_grads and idx in block_grads:
            dx = block_grads[idx] if dx is None else dx + block_grads[idx]
        kind, name, c = caches[idx]
        if kind == "conv":
            dx, dw, db = L.conv2d_backward(dx, c)
            grads[name + ".w"] = grads.get(name + ".w", 0) + dw
            grads[name + ".b"] = grads.get(name + ".b", 0) + db
        else:
            dx = L.maxpool_backward(dx, c)
    return dx


def _block_end_index(blocks):
    """Index (in the cache list) of the last cache of every block."""
    ends, i = [], -1
    for b in blocks:
        i += b.repeat + (1 if b.pool else 0)
        ends.append(i)
    return ends


def encoder_forward(p, config: EncoderConfig, images, prefix="enc"):
    """``(B, P, Q, 3)`` images to ``(B, ceil(P/8), ceil(Q/8), C)`` L2-scaled features."""
    if images.shape[-1] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {images.shape[-1]}")
    scale = p[f"{prefix}.scale"][0]
    x, caches, outs = _blocks_forward(p, config.blocks, config.in_channels, images, prefix)
    if config.taps is None:
        out, nc = L.l2norm_scale_forward(x, scale)
        return out, ("plain", caches, nc)
    taps = [outs[t] for t in config.taps]
    if taps[0].shape[1:3] != taps[1].shape[1:3]:
        raise ShapeError(f"tap spatial dims differ: {taps[0].shape[1:3]} vs {taps[1].shape[1:3]}")
    reduced, rc, nc = [], [], []
    for k, t in enumerate(taps):
        name = f"{prefix}.tap{k}"
        r, c = L.conv2d_forward(t, p[name + ".w"], p[name + ".b"], activation="relu")
        n, ncache = L.l2norm_scale_forward(r, scale)
        reduced.append(n)
        rc.append(c)
        nc.append(ncache)
    cat = np.concatenate(reduced, axis=-1)
    out, fc = L.conv2d_forward(cat, p[f"{prefix}.fuse.w"], p[f"{prefix}.fuse.b"], activation="relu")
    return out, ("multi", caches, (rc, nc, fc))


def encoder_backward(dout, cache, config: EncoderConfig, prefix="enc"):
    """Gradients of all encoder parameters; the image gradient is dropped."""
    kind, caches, rest = cache
    grads = {}
    if kind == "plain":
        dx, dscale = L.l2norm_scale_backward(dout, rest)
        grads[f"{prefix}.scale"] = np.array([dscale])
        _blocks_backward(dx, caches, grads)
        return grads
    rc, nc, fc = rest
    dcat, dw, db = L.conv2d_backward(dout, fc)
    grads[f"{prefix}.fuse.w"], grads[f"{prefix}.fuse.b"] = dw, db
    half = config.tap_channels
    ends = _block_end_index(config.blocks)
    extra = {}
    dscale = 0.0
    for k, t in enumerate(config.taps):
        dn = dcat[..., k * half:(k + 1) * half]
        dr, ds = L.l2norm_scale_backward(dn, nc[k])
        dscale += ds
        dt, dw, db = L.conv2d_backward(dr, rc[k])
        grads[f"{prefix}.tap{k}.w"], grads[f"{prefix}.tap{k}.b"] = dw, db
        extra[ends[t]] = extra.get(ends[t], 0) + dt
    grads[f"{prefix}.scale"] = np.array([dscale])
    # blocks after the last tap do not reach the output
    _blocks_backward(None, caches[: max(extra) + 1], grads, extra)
    return grads


def scene_forward(p, config: SceneEncoderConfig, images, prefix="scene"):
    """Images already resized to ``config.input_size``; returns ``(B, 128)``."""
    x, caches, _ = _blocks_forward(p, config.blocks, config.in_channels, images, prefix)
    pooled = x.mean(axis=(1, 2))
    pre = pooled @ p[f"{prefix}.fc.w"].T + p[f"{prefix}.fc.b"]
    act = np.maximum(pre, 0)
    out, nc = L.l2norm_scale_forward(act, p[f"{prefix}.scale"][0])
    return out, (caches, x.shape, pooled, act, nc)


def scene_backward(dout, cache, p, config: SceneEncoderConfig, prefix="scene"):
    caches, xshape, pooled, act, nc = cache
    grads = {}
    dact, dscale = L.l2norm_scale_backward(dout, nc)
    grads[f"{prefix}.scale"] = np.array([dscale])
    dpre = dact * (act > 0)
    grads[f"{prefix}.fc.w"] = dpre.T @ pooled
    grads[f"{prefix}.fc.b"] = dpre.sum(axis=0)
    dpooled = dpre @ p[f"{prefix}.fc.w"]
    dx = np.broadcast_to(dpooled[:, None, None, :] / (xshape[1] * xshape[2]), xshape).copy()
    _blocks_backward(dx, caches, grads)
    return grads


# --- single-image API ---------------------------------------------------------------------

def toy_local_encode(image, config: EncoderConfig, params, prefix="enc"):
    out, _ = encoder_forward(params, config, np.asarray(image)[None], prefix)
    return out[0]


def toy_local_encode_multilayer(image, config: EncoderConfig, params, prefix="enc"):
    if config.taps is None:
        raise ConfigError("config has no tap points")
    return toy_local_encode(image, config, params, prefix)


def toy_scene_encode(image, config: SceneEncoderConfig, params, prefix="scene"):
    """Resizes the image to the scene input size and returns the 128-d scene vector."""
    img = L.resize_bilinear(np.asarray(image), config.input_size)
    out, _ = scene_forward(params, config, img[None], prefix)
    return out[0]


# --- loaders --------------------------------------------------------------------------------

def _load_checked(path, rank, renormalize):
    x = load_tensor(path)
    if x.ndim != rank:
        raise FormatError(f"{path}: expected a rank-{rank} tensor, got rank {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite values")
    if renormalize is not None:
        x = L.l2norm_scale(x, L.L2NormScaleParams(renormalize))
    return x


def load_feature_map(path, renormalize: Optional[float] = None) -> np.ndarray:
    """Load an ``(H, W, C)`` feature map; optionally rescale it to L2 norm ``renormalize``."""
    return _load_checked(path, 3, renormalize)


def load_scene_vector(path, renormalize: Optional[float] = None) -> np.ndarray:
    return _load_checked(path, 1, renormalize)
