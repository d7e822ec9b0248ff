"""Negative-NSS training with momentum SGD, checkpoints and prediction."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import encoders as E
from . import layers as L
from . import metrics as M
from . import model as net
from .errors import ConfigError, DegenerateInputError, FormatError, NumericalError
from .numerics import load_tensor, save_tensor
from .synthetic import Sample, flip_sample

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "lr", "train_loss", "val_nss", "val_cc", "val_auc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    base_lr_pretrained: float = 0.001
    base_lr_new: float = 0.01
    lr_decay_factor: float = 2.5
    lr_decay_every: int = 500
    total_steps: int = 5000
    validate_every: int = 500
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    flip_augment: bool = False

    def __post_init__(self):
        for f in ("batch_size", "base_lr_pretrained", "base_lr_new", "lr_decay_factor",
                  "lr_decay_every", "validate_every"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be positive")
        if self.total_steps < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("total_steps, momentum and weight_decay must be non-negative")
        if self.total_steps and self.validate_every > self.total_steps:
            raise ConfigError("validate_every exceeds total_steps")


PRESETS = {
    "salicon": TrainConfig(),
    "mit-finetune": TrainConfig(base_lr_pretrained=0.001, base_lr_new=0.001, lr_decay_every=100,
                                total_steps=1000, validate_every=100, flip_augment=True),
    # the salicon schedule compressed tenfold; base rates recalibrated for an
    # untrained encoder (the salicon rates stall on the plateau, see README)
    "toy": TrainConfig(base_lr_pretrained=0.01, base_lr_new=0.1, lr_decay_every=50,
                       total_steps=500, validate_every=50),
}


# --- objective -------------------------------------------------------------------------

def nss_loss_batch(maps: np.ndarray, masks: np.ndarray):
    """Mean of ``-NSS`` over a ``(B, H, W)`` batch and its gradient w.r.t. ``maps``."""
    B = maps.shape[0]
    s = maps.reshape(B, -1).astype(np.float64)
    g = masks.reshape(B, -1).astype(np.float64)
    n = s.shape[1]
    k = g.sum(axis=1)
    if np.any(k == 0):
        raise ValueError("every map needs at least one fixation")
    mu = s.mean(axis=1, keepdims=True)
    d = s - mu
    sd = np.sqrt((d * d).mean(axis=1, keepdims=True))
    if np.any(sd < M.STD_EPS):
        raise DegenerateInputError("constant saliency map in NSS loss")
    z = d / sd
    value = (z * g).sum(axis=1) / k
    # d NSS / d s = (g/k - 1/n) / sd - NSS * z / (n sd)
    grad = (g / k[:, None] - 1.0 / n) / sd - value[:, None] * z / (n * sd)
    loss = -value.mean()
    return float(loss), (-grad / B).reshape(maps.shape).astype(maps.dtype)


def nss_loss(s: np.ndarray, fix):
    """``(-NSS(s, fix), d/ds)`` for one ``(H, W)`` or ``(H, W, 1)`` map."""
    arr = np.asarray(s)
    plane = arr[..., 0] if arr.ndim == 3 else arr
    mask = M.fixation_mask(fix, plane.shape)
    loss, grad = nss_loss_batch(plane[None], mask[None])
    return loss, grad[0].reshape(arr.shape)


# --- optimisation ------------------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0


def sgd_momentum_step(params: dict, grads: dict, lr, state: OptimizerState, momentum=0.9,
                      weight_decay=0.0005, frozen=()):
    """In-place ``v = m v + (g + wd p); p -= lr v``. ``lr`` may be a per-name dict."""
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g + weight_decay * p
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * v
    state.step += 1
    return params, state


def lr_schedule(step: int, group: str, config: TrainConfig) -> float:
    base = {"pretrained": config.base_lr_pretrained, "new": config.base_lr_new}[group]
    return base / config.lr_decay_factor ** (step // config.lr_decay_every)


# --- data ----------------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    scene_images: Optional[np.ndarray]
    masks: np.ndarray


def prepare(samples: list[Sample], config: net.ModelConfig, flip=False, dtype=np.float64) -> Batch:
    if flip:
        samples = [t for s in samples for t in (s, flip_sample(s))]
    imgs = np.stack([L.resize_bilinear(s.image, config.input_size) for s in samples]).astype(dtype)
    masks = np.zeros((len(samples),) + tuple(config.input_size), dtype=bool)
    for k, s in enumerate(samples):
        fix = s.fixations
        h, w = s.image.shape[:2]
        if (h, w) != tuple(config.input_size):
            fix = M.pool_negative_locations([M.fixation_mask(fix, (h, w))], config.input_size)
        masks[k] = M.fixation_mask(fix, config.input_size)
    return Batch(imgs, net.scene_input(imgs, config), masks)


def _take(batch: Batch, idx) -> Batch:
    return Batch(batch.images[idx], None if batch.scene_images is None else batch.scene_images[idx],
                 batch.masks[idx])


# --- evaluation ------------------------------------------------------------------------------

def postprocess(maps: np.ndarray, out_shape=None) -> np.ndarray:
    """Resize each ``(P, Q)`` map to ``out_shape`` and blur with sigma ``0.035 min(P, Q)``."""
    out = []
    for m in maps:
        if out_shape is not None:
            m = L.resize_bilinear(m, out_shape)
        out.append(L.gaussian_blur(m, L.blur_sigma(*m.shape)))
    return np.stack(out)


def predict_maps(params, config, data: Batch, batch_size=50) -> np.ndarray:
    outs = []
    for lo in range(0, len(data.images), batch_size):
        part = _take(data, slice(lo, lo + batch_size))
        maps, _ = net.forward(params, config, part.images, part.scene_images)
        outs.append(postprocess(maps))
    return np.concatenate(outs)


def evaluate(params, config, data: Batch, with_sauc=False) -> dict:
    maps = predict_maps(params, config, data)
    rows = {"nss": [], "cc": [], "auc": []}
    if with_sauc:
        rows["sauc"] = []
    for k, (m, mask) in enumerate(zip(maps, data.masks)):
        rows["nss"].append(M.nss(m, mask))
        rows["cc"].append(M.cc(m, M.fixation_density(mask)))
        rows["auc"].append(M.auc_judd(m, mask))
        if with_sauc:
            others = [data.masks[j] for j in range(len(maps)) if j != k]
            rows["sauc"].append(M.sauc(m, mask, others, splits=10, seed=k))
    return {key: float(np.mean(v)) for key, v in rows.items()}


# --- training loop ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    config: net.ModelConfig
    history: list
    best_step: int
    best_val_nss: float


def train(config: net.ModelConfig, train_samples: list[Sample], val_samples: list[Sample],
          tc: TrainConfig, init: Optional[dict] = None, dtype=np.float64, progress=None) -> TrainResult:
    """Mini-batch SGD on ``-NSS``; keeps the parameters with the best validation NSS."""
    params = init if init is not None else net.init_params(config, tc.seed, dtype)
    history = []
    if tc.total_steps == 0:
        return TrainResult(params, config, history, 0, float("nan"))
    data = prepare(train_samples, config, tc.flip_augment, dtype)
    val = prepare(val_samples, config, False, dtype)
    rng = np.random.default_rng(tc.seed)
    state = OptimizerState()
    groups = {name: net.param_group(name) for name in params}
    best = (-math.inf, 0, copy.deepcopy(params))
    order = np.empty(0, dtype=np.int64)
    losses = []
    n = len(data.images)
    for step in range(tc.total_steps):
        if len(order) < tc.batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:tc.batch_size], order[tc.batch_size:]
        batch = _take(data, idx)
        maps, cache = net.forward(params, config, batch.images, batch.scene_images)
        loss, dmaps = nss_loss_batch(maps, batch.masks)
        if not np.isfinite(loss):
            raise NumericalError(f"loss became non-finite at step {step}")
        grads = net.backward(dmaps, cache, params, config)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name} at step {step}")
        rates = {name: lr_schedule(step, groups[name], tc) for name in params}
        sgd_momentum_step(params, grads, rates, state, tc.momentum, tc.weight_decay)
        losses.append(loss)
        done = step + 1
        if done % tc.validate_every == 0 or done == tc.total_steps:
            scores = evaluate(params, config, val)
            row = {"step": done, "lr": lr_schedule(step, "new", tc),
                   "train_loss": float(np.mean(losses)), "val_nss": scores["nss"],
                   "val_cc": scores["cc"], "val_auc": scores["auc"]}
            history.append(row)
            losses = []
            log.info("step %d loss %.4f val nss %.4f cc %.4f auc %.4f", done, row["train_loss"],
                     row["val_nss"], row["val_cc"], row["val_auc"])
            if progress:
                progress(row)
            if scores["nss"] > best[0]:
                best = (scores["nss"], done, copy.deepcopy(params))
    return TrainResult(best[2], config, history, best[1], best[0])


def predict(params: dict, config: net.ModelConfig, image: np.ndarray) -> np.ndarray:
    """Saliency map at the image's own resolution (resize, forward, resize back, blur)."""
    h, w = image.shape[:2]
    dtype = params["head.w"].dtype
    img = L.resize_bilinear(np.asarray(image, dtype=np.float64), config.input_size).astype(dtype)
    maps, _ = net.forward(params, config, img[None])
    return postprocess(maps, (h, w))[0]


# --- center baseline -------------------------------------------------------------------------------

def fit_center_gaussian(samples: list[Sample], shape) -> np.ndarray:
    """Gaussian saliency map fitted (mean and covariance) to all training fixations."""
    pts = []
    for s in samples:
        f = s.fixations.astype(np.float64)
        h, w = s.image.shape[:2]
        pts.append(f * [(shape[0] / h), (shape[1] / w)])
    pts = np.concatenate(pts)
    mu = pts.mean(axis=0)
    cov = np.cov(pts.T) + 1e-6 * np.eye(2)
    inv = np.linalg.inv(cov)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.stack([yy - mu[0], xx - mu[1]], axis=-1)
    return np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, inv, d))


# --- config files and checkpoints ------------------------------------------------------------------

def parse_value(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def read_kv(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def train_config_from(values: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        if f.name in values:
            kw[f.name] = parse_value(str(values[f.name]), getattr(base, f.name))
    return replace(base, **kw)


ENCODER_PRESETS = {
    "toy": E.toy_encoder_config,
    "toy-ml": E.toy_multilayer_config,
    "vgg16": E.vgg16_dilated_config,
}


def model_config_to_kv(c: net.ModelConfig) -> dict:
    enc = c.encoder
    kv = {
        "input_size": f"{c.input_size[0]}x{c.input_size[1]}",
        "hidden": c.hidden,
        "depth": c.depth,
        "inject_scene": c.inject_scene,
        "scene_every_step": c.scene_every_step,
        "encoder_blocks": enc.blocks_string(),
        "l2_scale": enc.l2_scale,
        "scene": c.scene is not None,
    }
    if enc.taps is not None:
        kv.update(taps=f"{enc.taps[0]},{enc.taps[1]}", tap_channels=enc.tap_channels,
                  output_channels=enc.output_channels)
    if c.scene is not None:
        kv.update(scene_blocks=";".join(b.to_string() for b in c.scene.blocks),
                  scene_size=f"{c.scene.input_size[0]}x{c.scene.input_size[1]}",
                  scene_scale=c.scene.l2_scale)
    return kv


def model_config_from(values: dict) -> net.ModelConfig:
    base = net.toy_model_config()

    def size(text):
        h, w = (int(v) for v in text.lower().split("x"))
        return (h, w)

    enc = base.encoder
    if "encoder" in values:
        if values["encoder"] not in ENCODER_PRESETS:
            raise ConfigError(f"unknown encoder preset {values['encoder']!r}")
        enc = ENCODER_PRESETS[values["encoder"]]()
    if "encoder_blocks" in values:
        blocks = tuple(E.Block.parse(b) for b in values["encoder_blocks"].split(";"))
        taps = None
        if "taps" in values:
            taps = tuple(int(v) for v in values["taps"].split(","))
        enc = E.EncoderConfig(blocks, float(values.get("l2_scale", enc.l2_scale)), taps=taps,
                              tap_channels=int(values.get("tap_channels", 16)),
                              output_channels=(int(values["output_channels"])
                                               if "output_channels" in values else None))
    elif "l2_scale" in values:
        enc = replace(enc, l2_scale=float(values["l2_scale"]))
    scene = base.scene
    if "scene" in values and not parse_value(values["scene"], True):
        scene = None
    elif "scene_blocks" in values or "scene_size" in values or "scene_scale" in values:
        blocks = (tuple(E.Block.parse(b) for b in values["scene_blocks"].split(";"))
                  if "scene_blocks" in values else scene.blocks)
        scene = E.SceneEncoderConfig(blocks, size(values.get("scene_size", "32x32")),
                                     l2_scale=float(values.get("scene_scale", 9.0)))
    kw = dict(encoder=enc, scene=scene)
    if "input_size" in values:
        kw["input_size"] = size(values["input_size"])
    for key in ("hidden", "depth", "inject_scene", "scene_every_step"):
        if key in values:
            kw[key] = parse_value(str(values[key]), getattr(base, key))
    if scene is None and "inject_scene" not in values:
        kw["inject_scene"] = False
    return net.ModelConfig(**kw)


def save_checkpoint(path, params: dict, config: net.ModelConfig, extra: Optional[dict] = None):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        fname = name + ".dsct"
        save_tensor(d / fname, params[name])
        lines.append(f"{name} {fname} {'x'.join(str(v) for v in params[name].shape)}\n")
    (d / "manifest.txt").write_text("".join(lines))
    kv = model_config_to_kv(config)
    if extra:
        kv.update(extra)
    write_kv(d / "model.cfg", kv)


def load_checkpoint(path, dtype=np.float64):
    d = Path(path)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{d} has no manifest.txt")
    config = model_config_from(read_kv(d / "model.cfg"))
    params = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split()
        arr = load_tensor(d / fname)
        expect = tuple(int(v) for v in shape.split("x"))
        if arr.shape != expect:
            raise FormatError(f"{name}: manifest says {expect}, file holds {arr.shape}")
        params[name] = arr.astype(dtype)
    expected = net.init_params(config, 0, dtype)
    missing = set(expected) - set(params)
    if missing or any(expected[k].shape != params[k].shape for k in expected):
        raise FormatError(f"checkpoint does not match its model config (missing {sorted(missing)})")
    return params, config


def history_csv(history: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(float(v)) if k != "step" else int(v)) for k, v in row.items()})
    return buf.getvalue()


def train_config_to_kv(tc: TrainConfig) -> dict:
    return asdict(tc)
