"""Four-direction spatial LSTM scans and their stacking.

A row scan treats each row of a ``(B, H, W, C)`` map as a sequence: the
left-to-right LSTM starts at column 0, the right-to-left one at column
``W - 1``, both from a zero state and with one shared parameter set. Their
hidden states are concatenated as ``[left-to-right, right-to-left]``. A
column scan is the same thing on the transposed map, concatenated
``[top-to-bottom, bottom-to-top]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .lstm import LSTMParams, init_lstm_params, lstm_step_backward, lstm_step_forward


@dataclass
class SLSTMParams:
    horizontal: LSTMParams
    vertical: LSTMParams

    def __post_init__(self):
        n = self.horizontal.hidden
        if self.vertical.hidden != n:
            raise ShapeError("horizontal and vertical LSTMs must share the hidden size")
        if self.vertical.input_dim != 2 * n:
            raise ShapeError(f"vertical LSTM input must be 2N={2 * n}, got {self.vertical.input_dim}")

    @property
    def hidden(self) -> int:
        return self.horizontal.hidden

    def zeros_like(self) -> "SLSTMParams":
        return SLSTMParams(self.horizontal.zeros_like(), self.vertical.zeros_like())


@dataclass
class DSCLSTMParams:
    layers: list[SLSTMParams]
    inject_scene: list[bool] = field(default_factory=list)
    scene_every_step: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("need at least one SLSTM layer")
        if not self.inject_scene:
            self.inject_scene = [lyr.horizontal.Ws is not None for lyr in self.layers]
        if len(self.inject_scene) != len(self.layers):
            raise ConfigError("inject_scene needs one flag per layer")
        for k, lyr in enumerate(self.layers[1:], 1):
            if lyr.horizontal.input_dim != 2 * self.layers[k - 1].hidden:
                raise ShapeError(f"layer {k} input dim must equal 2N of layer {k - 1}")
        for on, lyr in zip(self.inject_scene, self.layers):
            if on and (lyr.horizontal.Ws is None or lyr.vertical.Ws is None):
                raise ConfigError("scene injection enabled on a layer without scene projections")

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    @property
    def depth(self) -> int:
        return len(self.layers)

    def zeros_like(self) -> "DSCLSTMParams":
        return DSCLSTMParams([lyr.zeros_like() for lyr in self.layers], list(self.inject_scene),
                             self.scene_every_step)


def init_slstm_params(rng, input_dim, hidden, scene_dim=None, dtype=np.float64):
    return SLSTMParams(
        init_lstm_params(rng, input_dim, hidden, scene_dim, dtype=dtype),
        init_lstm_params(rng, 2 * hidden, hidden, scene_dim, dtype=dtype),
    )


def init_dsclstm_params(rng, input_dim, hidden, depth=2, scene_dim=128, inject_scene=True,
                        dtype=np.float64):
    flags = [inject_scene] * depth if isinstance(inject_scene, bool) else list(inject_scene)
    layers = []
    m = input_dim
    for on in flags:
        layers.append(init_slstm_params(rng, m, hidden, scene_dim if on else None, dtype))
        m = 2 * hidden
    return DSCLSTMParams(layers, flags)


# --- row scan ----------------------------------------------------------------------

def row_scan_forward(x, params: LSTMParams, scene=None, every_step=False):
    B, H, W, M = x.shape
    if M != params.input_dim:
        raise ShapeError(f"map has {M} channels, LSTM expects {params.input_dim}")
    n = params.hidden
    seq = x.reshape(B * H, W, M)
    srep = None if scene is None else np.repeat(scene, H, axis=0)
    out = np.empty((B * H, W, 2 * n), dtype=x.dtype)
    caches = []
    for half, cols in enumerate((range(W), range(W - 1, -1, -1))):
        h = np.zeros((B * H, n), dtype=x.dtype)
        c = np.zeros_like(h)
        dcache = []
        for t, q in enumerate(cols):
            s = srep if (srep is not None and (t == 0 or every_step)) else None
            h, c, cache = lstm_step_forward(seq[:, q], h, c, params, s)
            out[:, q, half * n:(half + 1) * n] = h
            dcache.append((q, cache))
        caches.append(dcache)
    return out.reshape(B, H, W, 2 * n), (x.shape, caches, scene is not None)


def row_scan_backward(dout, cache, params: LSTMParams, grads: LSTMParams):
    """Returns ``(dx, dscene)``; both directions accumulate into ``grads``."""
    (B, H, W, M), caches, has_scene = cache
    n = params.hidden
    g = dout.reshape(B * H, W, 2 * n)
    dx = np.zeros((B * H, W, M), dtype=dout.dtype)
    dscene = None
    for half, dcache in enumerate(caches):
        dh_next = np.zeros((B * H, n), dtype=dout.dtype)
        dc_next = None
        for q, step_cache in reversed(dcache):
            dh = g[:, q, half * n:(half + 1) * n] + dh_next
            dxt, dh_next, dc_next, ds = lstm_step_backward(dh, dc_next, step_cache, params, grads)
            dx[:, q] += dxt
            if ds is not None:
                ds = ds.reshape(B, H, -1).sum(axis=1)
                dscene = ds if dscene is None else dscene + ds
    return dx.reshape(B, H, W, M), dscene


def column_scan_forward(x, params: LSTMParams, scene=None, every_step=False):
    out, cache = row_scan_forward(np.ascontiguousarray(x.transpose(0, 2, 1, 3)), params, scene,
                                  every_step)
    return np.ascontiguousarray(out.transpose(0, 2, 1, 3)), cache


def column_scan_backward(dout, cache, params: LSTMParams, grads: LSTMParams):
    dx, ds = row_scan_backward(np.ascontiguousarray(dout.transpose(0, 2, 1, 3)), cache, params, grads)
    return np.ascontiguousarray(dx.transpose(0, 2, 1, 3)), ds


# --- SLSTM and its stack -------------------------------------------------------------

def slstm_layer_forward(x, params: SLSTMParams, scene=None, every_step=False):
    hh, c1 = row_scan_forward(x, params.horizontal, scene, every_step)
    hv, c2 = column_scan_forward(hh, params.vertical, scene, every_step)
    return hv, (c1, c2)


def slstm_layer_backward(dout, cache, params: SLSTMParams, grads: SLSTMParams):
    c1, c2 = cache
    dhh, ds2 = column_scan_backward(dout, c2, params.vertical, grads.vertical)
    dx, ds1 = row_scan_backward(dhh, c1, params.horizontal, grads.horizontal)
    return dx, _add(ds1, ds2)


def dsclstm_stack_forward(x, params: DSCLSTMParams, scene=None):
    caches = []
    for on, lyr in zip(params.inject_scene, params.layers):
        x, cache = slstm_layer_forward(x, lyr, scene if on else None, params.scene_every_step)
        caches.append(cache)
    return x, caches


def dsclstm_stack_backward(dout, caches, params: DSCLSTMParams, grads: DSCLSTMParams):
    dscene = None
    for lyr, glyr, cache in zip(reversed(params.layers), reversed(grads.layers), reversed(caches)):
        dout, ds = slstm_layer_backward(dout, cache, lyr, glyr)
        dscene = _add(dscene, ds)
    return dout, dscene


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# --- single-map API ----------------------------------------------------------------------

def _batched_scene(scene):
    return None if scene is None else np.asarray(scene)[None]


def row_scan_bidirectional(m, params: LSTMParams, scene=None):
    return row_scan_forward(m[None], params, _batched_scene(scene))[0][0]


def column_scan_bidirectional(m, params: LSTMParams, scene=None):
    return column_scan_forward(m[None], params, _batched_scene(scene))[0][0]


def slstm_forward(m, params: SLSTMParams, scene=None):
    return slstm_layer_forward(m[None], params, _batched_scene(scene))[0][0]


def dsclstm_forward(m, scene, params: DSCLSTMParams):
    """Stacked SLSTMs with the scene vector injected where enabled.

    ``scene`` may be None, which runs the plain stacked model (no injection).
    """
    out, _ = dsclstm_stack_forward(m[None], params, _batched_scene(scene))
    if out.shape[1:3] != m.shape[:2]:
        raise ShapeError("spatial size changed")  # pragma: no cover
    return out[0]
