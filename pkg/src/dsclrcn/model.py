"""The full saliency network over a flat parameter dict.

images -> local encoder -> stacked spatial LSTMs (optionally scene-injected)
-> 1x1 conv -> softmax over the map -> fixed bilinear upsampling x8.
With ``depth == 0`` the head sits directly on the encoder (FCN baseline).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import encoders as E
from . import layers as L
from .errors import ConfigError, ShapeError
from .lstm import LSTMParams, init_lstm_params
from .spatial_context import (
    DSCLSTMParams,
    SLSTMParams,
    dsclstm_stack_backward,
    dsclstm_stack_forward,
)

UPSAMPLE = 8


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (64, 64)
    encoder: E.EncoderConfig = field(default_factory=E.toy_encoder_config)
    scene: Optional[E.SceneEncoderConfig] = field(default_factory=E.SceneEncoderConfig)
    hidden: int = 32
    depth: int = 2
    inject_scene: bool = True
    scene_every_step: bool = False

    def __post_init__(self):
        if not 0 <= self.depth <= 4:
            raise ConfigError(f"depth must be in 0..4, got {self.depth}")
        if self.inject_scene and self.depth > 0 and self.scene is None:
            raise ConfigError("scene injection needs a scene encoder")
        if any(v % 8 for v in self.input_size):
            raise ConfigError(f"input size must be divisible by 8, got {self.input_size}")

    @property
    def uses_scene(self) -> bool:
        return self.scene is not None and self.inject_scene and self.depth > 0

    @property
    def feature_size(self) -> tuple:
        return tuple(v // UPSAMPLE for v in self.input_size)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# Feature scale giving the toy 8x8x32 map the same per-element magnitude as
# scale 400 on a 60x80x512 map: 400 * sqrt(8*8*32 / (60*80*512)).
TOY_L2_SCALE = 11.5


def toy_model_config(depth=2, scene=True, dilation=2, extra_blocks=0, hidden=32) -> ModelConfig:
    enc = E.toy_encoder_config(dilation=dilation, extra_blocks=extra_blocks, l2_scale=TOY_L2_SCALE)
    return ModelConfig(encoder=enc, depth=depth, hidden=hidden, inject_scene=scene,
                       scene=E.SceneEncoderConfig() if scene else None)


def _lstm_names(k, part):
    return f"ctx.l{k}.{part}"


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    p = E.init_encoder_params(config.encoder, seed, "enc", dtype)
    if config.uses_scene:
        p.update(E.init_scene_params(config.scene, seed, "scene", dtype))
    m = config.encoder.channels
    n = config.hidden
    s = config.scene.fc_dim if config.uses_scene else None
    for k in range(config.depth):
        for part, in_dim in (("h", m), ("v", 2 * n)):
            name = _lstm_names(k, part)
            lp = init_lstm_params(E.param_rng(seed, name), in_dim, n, s, dtype=dtype)
            for key, arr in lp.arrays().items():
                p[f"{name}.{key}"] = arr
        m = 2 * n
    r = 1.0 / np.sqrt(m)
    p["head.w"] = E.param_rng(seed, "head.w").uniform(-r, r, size=(1, m, 1, 1)).astype(dtype)
    p["head.b"] = np.zeros(1, dtype)
    return p


def param_group(name: str) -> str:
    """Learning-rate group: encoder convolutions count as 'pretrained'."""
    if name.startswith("enc.b") or name.startswith("scene.b"):
        return "pretrained"
    return "new"


def dsclstm_view(p: dict, config: ModelConfig) -> DSCLSTMParams:
    """DSCLSTM parameter objects that alias the arrays in ``p``."""
    layers = []
    for k in range(config.depth):
        parts = []
        for part in ("h", "v"):
            name = _lstm_names(k, part)
            parts.append(LSTMParams(p[f"{name}.Wx"], p[f"{name}.Wh"], p[f"{name}.b"],
                                    p.get(f"{name}.Ws")))
        layers.append(SLSTMParams(*parts))
    return DSCLSTMParams(layers, [config.uses_scene] * config.depth, config.scene_every_step)


def scene_input(images: np.ndarray, config: ModelConfig) -> Optional[np.ndarray]:
    if not config.uses_scene:
        return None
    return np.stack([L.resize_bilinear(im, config.scene.input_size) for im in images])


def forward(p: dict, config: ModelConfig, images: np.ndarray, scene_images=None):
    """Returns ``(maps, cache)``; ``maps`` is ``(B, P, Q)``."""
    if images.shape[1:3] != tuple(config.input_size):
        raise ShapeError(f"model expects {config.input_size} images, got {images.shape[1:3]}")
    feats, ecache = E.encoder_forward(p, config.encoder, images, "enc")
    scache = svec = None
    if config.uses_scene:
        if scene_images is None:
            scene_images = scene_input(images, config)
        svec, scache = E.scene_forward(p, config.scene, scene_images, "scene")
    ctx, ccache = feats, None
    if config.depth:
        ctx, ccache = dsclstm_stack_forward(feats, dsclstm_view(p, config), svec)
    logits, hcache = L.conv2d_forward(ctx, p["head.w"], p["head.b"])
    prob, pcache = L.softmax_map_forward(logits[..., 0])
    maps = L.upsample_forward(prob, UPSAMPLE)
    return maps, (ecache, scache, ccache, hcache, pcache)


def backward(dmaps: np.ndarray, cache, p: dict, config: ModelConfig) -> dict:
    ecache, scache, ccache, hcache, pcache = cache
    grads = {}
    dprob = L.upsample_backward(dmaps, UPSAMPLE)
    dlogits = L.softmax_map_backward(dprob, pcache)
    dctx, grads["head.w"], grads["head.b"] = L.conv2d_backward(dlogits[..., None], hcache)
    dfeats = dctx
    if config.depth:
        view = dsclstm_view(p, config)
        gview = view.zeros_like()
        dfeats, dscene = dsclstm_stack_backward(dctx, ccache, view, gview)
        for k, (lyr, glyr) in enumerate(zip(view.layers, gview.layers)):
            for part, lp in (("h", glyr.horizontal), ("v", glyr.vertical)):
                for key, arr in lp.arrays().items():
                    grads[f"{_lstm_names(k, part)}.{key}"] = arr
        if config.uses_scene:
            grads.update(E.scene_backward(dscene, scache, p, config.scene, "scene"))
    grads.update(E.encoder_backward(dfeats, ecache, config.encoder, "enc"))
    return grads
