"""Netpbm images (binary PGM/PPM, 8 or 16 bit) and fixation CSV files.

Images are returned as float64 in [0, 1]; ``(H, W)`` for PGM and
``(H, W, 3)`` for PPM. Fixation CSVs hold a ``row,col`` header followed by
0-based integer points.
"""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = h * w * channels
    body = raw[m.end():]
    if len(body) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(body, dtype=dtype, count=count).astype(np.float64) / maxval
    return data.reshape(h, w, 3) if channels == 3 else data.reshape(h, w)


def write_pnm(path, img: np.ndarray, bits: int = 8) -> None:
    """Write ``(H, W)`` as PGM or ``(H, W, 3)`` as PPM; values are clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[-1] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot store an image of shape {img.shape}")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0, 1) * maxval)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + data)


def write_saliency_pgm(path, s: np.ndarray) -> None:
    """16-bit PGM of a map scaled so its maximum is full white."""
    s = np.asarray(s, dtype=np.float64)
    top = s.max()
    write_pnm(path, s / top if top > 0 else s, bits=16)


def read_fixations(path) -> np.ndarray:
    pts = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty fixation file")
    start = 1 if rows[0] and not rows[0][0].strip().lstrip("-").isdigit() else 0
    for lineno, row in enumerate(rows[start:], start + 1):
        if not row:
            continue
        try:
            r, c = (int(v) for v in row[:2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected two integers") from None
        pts.append((r, c))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def write_fixations(path, pts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "col"))
        w.writerows(np.asarray(pts, dtype=np.int64).tolist())
