"""Dense array helpers, the finite-difference oracle and the DSCT tensor format.

Tensors are plain ``numpy.ndarray`` objects. Feature maps use ``(H, W, C)``
order, batched maps ``(B, H, W, C)``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import FormatError, NumericalError, ShapeError

MAGIC = b"DSCT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBI")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    return expit(x)


def tanh(x):
    return np.tanh(x)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def concat_channels(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate ``(..., H, W, C_i)`` maps along the last axis."""
    if not maps:
        raise ShapeError("concat_channels needs at least one map")
    lead = maps[0].shape[:-1]
    for m in maps[1:]:
        if m.shape[:-1] != lead:
            raise ShapeError(f"spatial dims differ: {lead} vs {m.shape[:-1]}")
    return np.concatenate(maps, axis=-1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`."""
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"channel sizes {list(sizes)} do not sum to {x.shape[-1]}")
    return np.split(x, np.cumsum(sizes)[:-1], axis=-1)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    If ``indices`` (flat positions) is given only those coordinates are
    estimated and the rest of the result stays zero.
    """
    if x.dtype != np.float64:
        raise TypeError("finite differences require a float64 array")
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - g| / max(1, max |g|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


# --- DSCT binary format -----------------------------------------------------

def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, x.ndim)
    dims = struct.pack(f"<{x.ndim}I", *x.shape)
    return header + dims + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"expected {count} floats, payload has {(len(buf) - off) / 4:g}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(dims).astype(np.float32)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
