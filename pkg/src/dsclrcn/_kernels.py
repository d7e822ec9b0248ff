"""Hot inner loops: dilated convolution, separable resampling and blur.

Two interchangeable implementations live here. The numba one is compiled
with ``@njit`` and used by default when numba imports; the numpy one
(im2col and dense resampling matrices) is the fallback. Select explicitly
with the ``DSCL_BACKEND`` environment variable (``numba`` or ``numpy``) or
:func:`set_backend`.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


# --- shared helpers ---------------------------------------------------------

def conv_output_size(n: int, stride: int) -> int:
    return -(-n // stride)


def resample_matrix(n_in: int, kernel: np.ndarray, factor: int) -> np.ndarray:
    """Dense ``(n_in * factor, n_in)`` matrix of a 1-D strided transposed conv.

    Output position ``Y`` receives ``kernel[Y + pad - y * factor]`` from input
    ``y`` with ``pad = factor // 2``, which makes the output exactly
    ``n_in * factor`` long.
    """
    k = len(kernel)
    pad = factor // 2
    mat = np.zeros((n_in * factor, n_in), dtype=kernel.dtype)
    for y in range(n_in):
        for t in range(k):
            Y = y * factor - pad + t
            if 0 <= Y < n_in * factor:
                mat[Y, y] += kernel[t]
    return mat


def blur_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Dense ``(n, n)`` 1-D blur with in-bounds renormalisation per row."""
    r = len(kernel) // 2
    mat = np.zeros((n, n), dtype=kernel.dtype)
    for y in range(n):
        lo, hi = max(0, y - r), min(n, y + r + 1)
        w = kernel[lo - y + r:hi - y + r]
        mat[y, lo:hi] = w / w.sum()
    return mat


# --- numpy implementation ---------------------------------------------------

def _tap_slices(i, j, d, s, Ho, Wo):
    ys = slice(i * d, i * d + s * (Ho - 1) + 1, s)
    xs = slice(j * d, j * d + s * (Wo - 1) + 1, s)
    return ys, xs


def _pad_for(x, kh, kw, d, s, Ho, Wo):
    B, H, W, C = x.shape
    ph, pw = d * (kh // 2), d * (kw // 2)
    # enough trailing padding for the last strided tap
    eh = max(0, s * (Ho - 1) + d * (kh - 1) - ph - (H - 1))
    ew = max(0, s * (Wo - 1) + d * (kw - 1) - pw - (W - 1))
    return ph, pw, eh, ew


def _im2col(x, kh, kw, s, d):
    B, H, W, C = x.shape
    Ho, Wo = conv_output_size(H, s), conv_output_size(W, s)
    ph, pw, eh, ew = _pad_for(x, kh, kw, d, s, Ho, Wo)
    xp = np.pad(x, ((0, 0), (ph, eh), (pw, ew), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            ys, xs = _tap_slices(i, j, d, s, Ho, Wo)
            cols[:, :, :, i, j, :] = xp[:, ys, xs, :]
    return cols, xp.shape, (ph, pw)


def conv2d_forward_np(x, w, b, stride, dilation):
    O, C, kh, kw = w.shape
    cols, _, _ = _im2col(x, kh, kw, stride, dilation)
    B, Ho, Wo = cols.shape[:3]
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    out = cols.reshape(-1, kh * kw * C) @ wmat + b
    return out.reshape(B, Ho, Wo, O)


def conv2d_backward_np(dout, x, w, stride, dilation):
    O, C, kh, kw = w.shape
    B, H, W, _ = x.shape
    s, d = stride, dilation
    cols, padded_shape, (ph, pw) = _im2col(x, kh, kw, s, d)
    Ho, Wo = cols.shape[1:3]
    d2 = dout.reshape(-1, O)
    dwmat = cols.reshape(-1, kh * kw * C).T @ d2
    dw = dwmat.reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    dcols = (d2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
    dxp = np.zeros(padded_shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            ys, xs = _tap_slices(i, j, d, s, Ho, Wo)
            dxp[:, ys, xs, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, ph:ph + H, pw:pw + W, :]
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def upsample_np(x, kernel, factor):
    """Separable transposed conv of ``(B, H, W)`` maps."""
    B, H, W = x.shape
    uh = resample_matrix(H, kernel, factor)
    uw = resample_matrix(W, kernel, factor)
    return np.einsum("Yy,byx,Xx->bYX", uh, x, uw, optimize=True)


def upsample_backward_np(dout, kernel, factor):
    B, HH, WW = dout.shape
    uh = resample_matrix(HH // factor, kernel, factor)
    uw = resample_matrix(WW // factor, kernel, factor)
    return np.einsum("Yy,bYX,Xx->byx", uh, dout, uw, optimize=True)


def blur_np(x, kernel):
    """Separable renormalised blur of a single ``(H, W)`` map."""
    H, W = x.shape
    return blur_matrix(H, kernel) @ x @ blur_matrix(W, kernel).T


# --- numba implementation ---------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _conv_fwd_nb(x, wt, b, s, d, Ho, Wo):
        B, H, W, C = x.shape
        kh, kw, _, O = wt.shape
        ch = kh // 2
        cw = kw // 2
        out = np.empty((B, Ho, Wo, O), dtype=x.dtype)
        for n in range(B):
            for y in range(Ho):
                for q in range(Wo):
                    for o in range(O):
                        out[n, y, q, o] = b[o]
                    for i in range(kh):
                        yy = y * s + (i - ch) * d
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(kw):
                            xx = q * s + (j - cw) * d
                            if xx < 0 or xx >= W:
                                continue
                            for c in range(C):
                                v = x[n, yy, xx, c]
                                for o in range(O):
                                    out[n, y, q, o] += wt[i, j, c, o] * v
        return out

    @njit(cache=True)
    def _conv_bwd_nb(dout, x, wt, s, d):
        B, H, W, C = x.shape
        kh, kw, _, O = wt.shape
        Ho, Wo = dout.shape[1], dout.shape[2]
        ch = kh // 2
        cw = kw // 2
        dx = np.zeros_like(x)
        dwt = np.zeros_like(wt)
        db = np.zeros(O, dtype=x.dtype)
        for n in range(B):
            for y in range(Ho):
                for q in range(Wo):
                    for o in range(O):
                        db[o] += dout[n, y, q, o]
                    for i in range(kh):
                        yy = y * s + (i - ch) * d
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(kw):
                            xx = q * s + (j - cw) * d
                            if xx < 0 or xx >= W:
                                continue
                            for c in range(C):
                                v = x[n, yy, xx, c]
                                acc = 0.0
                                for o in range(O):
                                    g = dout[n, y, q, o]
                                    dwt[i, j, c, o] += v * g
                                    acc += wt[i, j, c, o] * g
                                dx[n, yy, xx, c] += acc
        return dx, dwt, db

    @njit(cache=True)
    def _upsample_axis_nb(x, kernel, factor):
        # transposed conv along the last axis of a (B, R, L) array
        B, R, L = x.shape
        K = kernel.shape[0]
        pad = factor // 2
        out = np.zeros((B, R, L * factor), dtype=x.dtype)
        for n in range(B):
            for r in range(R):
                for y in range(L):
                    v = x[n, r, y]
                    for t in range(K):
                        Y = y * factor - pad + t
                        if 0 <= Y < L * factor:
                            out[n, r, Y] += kernel[t] * v
        return out

    @njit(cache=True)
    def _upsample_axis_adj_nb(g, kernel, factor):
        B, R, LL = g.shape
        L = LL // factor
        K = kernel.shape[0]
        pad = factor // 2
        out = np.zeros((B, R, L), dtype=g.dtype)
        for n in range(B):
            for r in range(R):
                for y in range(L):
                    acc = 0.0
                    for t in range(K):
                        Y = y * factor - pad + t
                        if 0 <= Y < LL:
                            acc += kernel[t] * g[n, r, Y]
                    out[n, r, y] = acc
        return out

    @njit(cache=True)
    def _blur_axis_nb(x, kernel):
        # renormalised blur along the last axis of an (R, L) array
        R, L = x.shape
        K = kernel.shape[0]
        rad = K // 2
        out = np.empty_like(x)
        for y in range(L):
            lo = max(0, y - rad)
            hi = min(L, y + rad + 1)
            norm = 0.0
            for p in range(lo, hi):
                norm += kernel[p - y + rad]
            for r in range(R):
                acc = 0.0
                for p in range(lo, hi):
                    acc += kernel[p - y + rad] * x[r, p]
                out[r, y] = acc / norm
        return out

    def conv2d_forward_nb(x, w, b, stride, dilation):
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        Ho = conv_output_size(x.shape[1], stride)
        Wo = conv_output_size(x.shape[2], stride)
        return _conv_fwd_nb(np.ascontiguousarray(x), wt, b, stride, dilation, Ho, Wo)

    def conv2d_backward_nb(dout, x, w, stride, dilation):
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        dx, dwt, db = _conv_bwd_nb(
            np.ascontiguousarray(dout), np.ascontiguousarray(x), wt, stride, dilation
        )
        return dx, np.ascontiguousarray(dwt.transpose(3, 2, 0, 1)), db

    def upsample_nb(x, kernel, factor):
        kernel = kernel.astype(x.dtype)
        t = _upsample_axis_nb(np.ascontiguousarray(x), kernel, factor)
        t = _upsample_axis_nb(np.ascontiguousarray(t.transpose(0, 2, 1)), kernel, factor)
        return np.ascontiguousarray(t.transpose(0, 2, 1))

    def upsample_backward_nb(dout, kernel, factor):
        kernel = kernel.astype(dout.dtype)
        t = _upsample_axis_adj_nb(np.ascontiguousarray(dout), kernel, factor)
        t = _upsample_axis_adj_nb(np.ascontiguousarray(t.transpose(0, 2, 1)), kernel, factor)
        return np.ascontiguousarray(t.transpose(0, 2, 1))

    def blur_nb(x, kernel):
        kernel = kernel.astype(x.dtype)
        t = _blur_axis_nb(np.ascontiguousarray(x), kernel)
        t = _blur_axis_nb(np.ascontiguousarray(t.T), kernel)
        return np.ascontiguousarray(t.T)


# --- dispatch ---------------------------------------------------------------

BACKENDS = {
    "numpy": SimpleNamespace(
        name="numpy",
        conv2d_forward=conv2d_forward_np,
        conv2d_backward=conv2d_backward_np,
        upsample=upsample_np,
        upsample_backward=upsample_backward_np,
        blur=blur_np,
    )
}
if HAS_NUMBA:
    BACKENDS["numba"] = SimpleNamespace(
        name="numba",
        conv2d_forward=conv2d_forward_nb,
        conv2d_backward=conv2d_backward_nb,
        upsample=upsample_nb,
        upsample_backward=upsample_backward_nb,
        blur=blur_nb,
    )

_active = None


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]


def active():
    return _active


def apply_thread_limit() -> int:
    """Honour ``DSCL_THREADS`` for numba's pool; returns the effective count."""
    n = int(os.environ.get("DSCL_THREADS", "0") or 0)
    if HAS_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


set_backend(os.environ.get("DSCL_BACKEND", "numba" if HAS_NUMBA else "numpy"))
