"""Synthetic visual-search stimuli with simulated fixations.

Objects sit in a jittered grid of cells on a grey background. In the
pop-out modes one target differs from the distractors in a single feature
(colour or orientation), with the two feature values drawn at random per
image so that no colour or orientation is salient on its own. Fixations
cluster on the target with a small centre-bias mixture.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("color", "orientation", "lone", "none")

PALETTE = np.array(
    [
        [0.9, 0.15, 0.15],
        [0.15, 0.8, 0.15],
        [0.2, 0.3, 0.95],
        [0.9, 0.85, 0.1],
    ]
)


@dataclass(frozen=True)
class GenConfig:
    size: tuple = (64, 64)
    mode: str = "color"
    n_distractors: int = 8
    cell: int = 16
    object_size: int = 8
    n_fixations: int = 16
    target_sigma: float = 0.04  # fraction of min(P, Q)
    center_bias: float = 0.1  # fraction of fixations from the centre Gaussian
    center_sigma: float = 0.2  # fraction of min(P, Q)
    background: float = 0.5
    noise: float = 0.02

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.center_bias <= 1:
            raise ConfigError("center_bias must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # (P, Q, 3) in [0, 1]
    fixations: np.ndarray  # (K, 2) unique (row, col) points
    target: tuple  # (row, col) centre of the target
    target_box: tuple  # (r0, c0, r1, c1), end exclusive


def _cells(cfg: GenConfig):
    P, Q = cfg.size
    rows, cols = P // cfg.cell, Q // cfg.cell
    if cfg.object_size > cfg.cell:
        raise ConfigError(f"object size {cfg.object_size} does not fit in cell {cfg.cell}")
    n_objects = 1 if cfg.mode == "lone" else cfg.n_distractors + 1
    if n_objects > rows * cols:
        raise ConfigError(f"{n_objects} objects do not fit into a {rows}x{cols} grid")
    return rows, cols, n_objects


def _draw_object(img, r0, c0, cfg, color, horizontal):
    s = cfg.object_size
    if cfg.mode == "orientation":
        thick = max(1, s // 4)
        off = (s - thick) // 2
        if horizontal:
            img[r0 + off:r0 + off + thick, c0:c0 + s] = color
        else:
            img[r0:r0 + s, c0 + off:c0 + off + thick] = color
    else:
        img[r0:r0 + s, c0:c0 + s] = color


def generate_synthetic_sample(seed, cfg: GenConfig = GenConfig()) -> Sample:
    rows, cols, n_objects = _cells(cfg)
    rng = np.random.default_rng(seed)
    P, Q = cfg.size
    s = cfg.object_size
    img = np.full((P, Q, 3), cfg.background)
    chosen = rng.choice(rows * cols, size=n_objects, replace=False)
    target_idx = rng.integers(n_objects)
    pair = rng.choice(len(PALETTE), size=2, replace=False)
    distractor_color, target_color = PALETTE[pair[0]], PALETTE[pair[1]]
    horizontal = bool(rng.integers(2))
    target = box = None
    for k, cell in enumerate(chosen):
        cr, cc = divmod(int(cell), cols)
        r0 = cr * cfg.cell + int(rng.integers(cfg.cell - s + 1))
        c0 = cc * cfg.cell + int(rng.integers(cfg.cell - s + 1))
        is_target = k == target_idx
        if cfg.mode == "orientation":
            color, horiz = distractor_color, horizontal != is_target
        else:
            color, horiz = (target_color if is_target else distractor_color), True
        _draw_object(img, r0, c0, cfg, color, horiz)
        if is_target:
            target = (r0 + (s - 1) / 2, c0 + (s - 1) / 2)
            box = (r0, c0, r0 + s, c0 + s)
    if cfg.noise:
        img = img + rng.normal(0, cfg.noise, img.shape)
    img = np.clip(img, 0, 1)

    m = min(P, Q)
    center = ((P - 1) / 2, (Q - 1) / 2)
    k = cfg.n_fixations
    from_center = rng.random(k) < (1.0 if cfg.mode == "none" else cfg.center_bias)
    mu = np.where(from_center[:, None], center, target)
    sd = np.where(from_center, cfg.center_sigma * m, cfg.target_sigma * m)[:, None]
    pts = np.rint(mu + rng.normal(size=(k, 2)) * sd).astype(np.int64)
    pts[:, 0] = np.clip(pts[:, 0], 0, P - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, Q - 1)
    return Sample(img, np.unique(pts, axis=0), target, box)


def generate_dataset(n: int, seed: int, cfg: GenConfig = GenConfig()) -> list[Sample]:
    """``n`` samples whose per-sample seeds derive from ``seed``."""
    ss = np.random.SeedSequence(seed)
    return [generate_synthetic_sample(child, cfg) for child in ss.spawn(n)]


def flip_sample(sample: Sample) -> Sample:
    """Horizontal mirror of image, fixations and target."""
    Q = sample.image.shape[1]
    fix = sample.fixations.copy()
    fix[:, 1] = Q - 1 - fix[:, 1]
    r0, c0, r1, c1 = sample.target_box
    return Sample(
        np.ascontiguousarray(sample.image[:, ::-1]),
        np.unique(fix, axis=0),
        (sample.target[0], Q - 1 - sample.target[1]),
        (r0, Q - c1, r1, Q - c0),
    )
