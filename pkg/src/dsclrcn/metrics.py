"""Eye-fixation metrics: NSS, CC, AUC-Judd, shuffled AUC and density maps.

Saliency maps are 2-D arrays (a trailing singleton channel is accepted).
Fixations are either a binary mask of the same shape or an ``(K, 2)`` array
of 0-based ``(row, col)`` points; duplicates collapse to one fixated pixel.
Standard deviations are population statistics.
"""
from __future__ import annotations

import numpy as np

from . import layers as L
from .errors import DegenerateInputError, ShapeError

STD_EPS = 1e-12


def _as_map(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 3 and s.shape[-1] == 1:
        s = s[..., 0]
    if s.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {s.shape}")
    return s


def _is_mask(fix: np.ndarray, shape=None) -> bool:
    if fix.dtype == bool:
        return True
    if shape is not None:
        return fix.shape == tuple(shape)
    return fix.ndim == 2 and fix.shape[1] != 2


def fixation_mask(fix, shape) -> np.ndarray:
    """Binary ``shape`` mask from a mask or a list of ``(row, col)`` points."""
    fix = np.asarray(fix)
    if fix.ndim == 3 and fix.shape[-1] == 1:
        fix = fix[..., 0]
    if _is_mask(fix, shape):
        if fix.shape != tuple(shape):
            raise ShapeError(f"fixation mask {fix.shape} does not match map {tuple(shape)}")
        return fix.astype(bool)
    pts = fix.reshape(-1, 2).astype(np.int64)
    h, w = shape
    if pts.size and (pts.min() < 0 or np.any(pts[:, 0] >= h) or np.any(pts[:, 1] >= w)):
        raise ShapeError("fixation point outside the map")
    mask = np.zeros(shape, dtype=bool)
    mask[pts[:, 0], pts[:, 1]] = True
    return mask


def fixation_points(mask) -> np.ndarray:
    return np.argwhere(np.asarray(mask, dtype=bool))


def _fixated(s, fix):
    mask = fixation_mask(fix, s.shape)
    if not mask.any():
        raise ValueError("no fixations")
    return mask


def standardize(s) -> np.ndarray:
    s = _as_map(s)
    sd = s.std()
    if sd < STD_EPS:
        raise DegenerateInputError("constant saliency map has no standardisation")
    return (s - s.mean()) / sd


def nss(s, fix) -> float:
    s = _as_map(s)
    mask = _fixated(s, fix)
    return float(standardize(s)[mask].mean())


def cc(s, d) -> float:
    s = _as_map(s)
    d = _as_map(d)
    if s.shape != d.shape:
        raise ShapeError(f"map shapes differ: {s.shape} vs {d.shape}")
    ss, sd = s.std(), d.std()
    if ss < STD_EPS or sd < STD_EPS:
        raise DegenerateInputError("CC is undefined for a constant map")
    cov = np.mean((s - s.mean()) * (d - d.mean()))
    return float(np.clip(cov / (ss * sd), -1.0, 1.0))


def fixation_density(fix, sigma: float | None = None, shape=None) -> np.ndarray:
    """Blurred fixation map, max-normalised to 1.

    ``sigma`` defaults to ``0.035 * min(H, W)``. ``shape`` is needed when
    ``fix`` is a point list.
    """
    if shape is None:
        shape = np.asarray(fix).shape[:2]
    mask = fixation_mask(fix, shape)
    if not mask.any():
        raise ValueError("fixation_density needs at least one fixation")
    if sigma is None:
        sigma = L.blur_sigma(*shape)
    d = L.gaussian_blur(mask.astype(np.float64), sigma)
    return d / d.max()


def _minmax(s):
    lo, hi = s.min(), s.max()
    if hi - lo <= 0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def _trapezoid(fp, tp):
    return float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]) / 2))


def roc_auc(pos, neg, thresholds) -> float:
    """Trapezoidal ROC area with thresholds swept from high to low.

    A value counts as positive-classified when it is ``>=`` the threshold.
    The curve is closed with the (0, 0) and (1, 1) end points.
    """
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    th = np.sort(np.unique(thresholds))[::-1]
    tp = (pos.size - np.searchsorted(pos, th, side="left")) / pos.size
    fp = (neg.size - np.searchsorted(neg, th, side="left")) / neg.size
    tp = np.concatenate([[0.0], tp, [1.0]])
    fp = np.concatenate([[0.0], fp, [1.0]])
    return _trapezoid(fp, tp)


def auc_judd(s, fix) -> float:
    """ROC area with thresholds at the distinct saliency values of fixated pixels."""
    s = _as_map(s)
    mask = _fixated(s, fix)
    if mask.all():
        raise ValueError("AUC needs at least one non-fixated pixel")
    sn = _minmax(s)
    pos = sn[mask]
    return roc_auc(pos, sn[~mask], pos)


def pool_negative_locations(others, shape) -> np.ndarray:
    """Unique fixation locations of other images, rescaled to ``shape`` if needed."""
    pts = []
    h, w = shape
    for f in others:
        f = np.asarray(f)
        if _is_mask(f):
            fh, fw = f.shape
            p = fixation_points(f)
        else:
            p = np.asarray(f, dtype=np.int64).reshape(-1, 2)
            fh, fw = h, w
        if (fh, fw) != (h, w):
            p = np.stack([np.minimum((p[:, 0] * h) // fh, h - 1),
                          np.minimum((p[:, 1] * w) // fw, w - 1)], axis=1)
        pts.append(p)
    if not pts:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pts).astype(np.int64), axis=0)


def shuffled_negative_sets(pool: np.ndarray, n: int, splits: int, seed) -> list:
    """``splits`` index sets of size ``n`` drawn without replacement from ``pool``."""
    if len(pool) < n:
        raise ValueError(f"only {len(pool)} negative locations for {n} positives")
    rng = np.random.default_rng(seed)
    return [pool[rng.choice(len(pool), size=n, replace=False)] for _ in range(splits)]


def sauc(s, fix, negative_fixations, splits: int = 100, seed=0) -> float:
    """Shuffled AUC: negatives are fixation locations of other images.

    Each split draws as many negatives as there are positives. The ROC is
    swept over every distinct value of the positives and the drawn negatives.
    """
    s = _as_map(s)
    mask = _fixated(s, fix)
    pool = pool_negative_locations(negative_fixations, s.shape)
    if len(pool):
        pool = pool[~mask[pool[:, 0], pool[:, 1]]]
    if len(pool) == 0:
        raise ValueError("no negative fixations left after removing positives")
    sn = _minmax(s)
    pos = sn[mask]
    scores = []
    for neg_pts in shuffled_negative_sets(pool, pos.size, splits, seed):
        neg = sn[neg_pts[:, 0], neg_pts[:, 1]]
        scores.append(roc_auc(pos, neg, np.concatenate([pos, neg])))
    return float(np.mean(scores))
