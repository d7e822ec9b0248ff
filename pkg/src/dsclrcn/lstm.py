"""LSTM transition, its scene-injected first step, and the backward pass.

Gate weights are stored stacked in ``[i, f, o, g]`` order: ``Wx`` is
``(4N, M)``, ``Wh`` is ``(4N, N)``, the optional scene projection ``Ws`` is
``(4N, S)`` and ``b`` is ``(4N,)``. The per-gate matrices (``W_xi`` and so on)
are views into these.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import sigmoid

GATES = ("i", "f", "o", "c")


@dataclass
class LSTMParams:
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray
    Ws: np.ndarray | None = None

    def __post_init__(self):
        n4 = self.Wh.shape[0]
        if n4 % 4 or self.Wh.shape != (n4, n4 // 4):
            raise ShapeError(f"Wh must be 4N x N, got {self.Wh.shape}")
        if self.Wx.ndim != 2 or self.Wx.shape[0] != n4:
            raise ShapeError(f"Wx must be 4N x M, got {self.Wx.shape}")
        if self.b.shape != (n4,):
            raise ShapeError(f"b must have length 4N={n4}, got {self.b.shape}")
        if self.Ws is not None and (self.Ws.ndim != 2 or self.Ws.shape[0] != n4):
            raise ShapeError(f"Ws must be 4N x S, got {self.Ws.shape}")

    @property
    def hidden(self) -> int:
        return self.Wh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[1]

    @property
    def scene_dim(self) -> int | None:
        return None if self.Ws is None else self.Ws.shape[1]

    def gate(self, name: str, gate: str) -> np.ndarray:
        n = self.hidden
        k = GATES.index(gate)
        mat = {"x": self.Wx, "h": self.Wh, "s": self.Ws, "b": self.b}[name]
        if mat is None:
            raise ConfigError("these parameters carry no scene projection")
        return mat[k * n:(k + 1) * n]

    def zeros_like(self) -> "LSTMParams":
        return LSTMParams(
            np.zeros_like(self.Wx),
            np.zeros_like(self.Wh),
            np.zeros_like(self.b),
            None if self.Ws is None else np.zeros_like(self.Ws),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        d = {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}
        if self.Ws is not None:
            d["Ws"] = self.Ws
        return d


def _gate_property(name, gate):
    return property(lambda self: self.gate(name, gate))


for _g in GATES:
    setattr(LSTMParams, f"W_x{_g}", _gate_property("x", _g))
    setattr(LSTMParams, f"W_h{_g}", _gate_property("h", _g))
    setattr(LSTMParams, f"W_s{_g}", _gate_property("s", _g))
    setattr(LSTMParams, f"b_{_g}", _gate_property("b", _g))


@dataclass
class LSTMState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, n: int, batch: int | None = None, dtype=np.float64) -> "LSTMState":
        shape = (n,) if batch is None else (batch, n)
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


def init_lstm_params(rng, input_dim, hidden, scene_dim=None, forget_bias=1.0, dtype=np.float64):
    """Uniform ``[-r, r]`` weights with ``r = 1/sqrt(fan_in)``; forget bias 1."""
    n4 = 4 * hidden

    def u(shape, fan_in):
        r = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-r, r, size=shape).astype(dtype)

    b = np.zeros(n4, dtype)
    b[hidden:2 * hidden] = forget_bias
    Ws = None if scene_dim is None else u((n4, scene_dim), scene_dim)
    return LSTMParams(u((n4, input_dim), input_dim), u((n4, hidden), hidden), b, Ws)


def lstm_step_forward(x, h, c, params: LSTMParams, scene=None):
    """One batched step. ``x`` is ``(B, M)``, ``h``/``c`` ``(B, N)``, ``scene`` ``(B, S)``.

    Returns ``(h_new, c_new, cache)``.
    """
    n = params.hidden
    if x.shape[-1] != params.input_dim or h.shape[-1] != n or c.shape[-1] != n:
        raise ShapeError(
            f"step dims x={x.shape} h={h.shape} c={c.shape} do not match M={params.input_dim}, N={n}"
        )
    a = x @ params.Wx.T + h @ params.Wh.T + params.b
    if scene is not None:
        if params.Ws is None:
            raise ConfigError("scene injection requested but parameters have no scene projection")
        a = a + scene @ params.Ws.T
    sg = sigmoid(a[:, :3 * n])
    i, f, o = sg[:, :n], sg[:, n:2 * n], sg[:, 2 * n:]
    g = np.tanh(a[:, 3 * n:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, scene, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, params: LSTMParams, grads: LSTMParams):
    """Backward of one step; parameter gradients accumulate into ``grads``.

    ``dc`` is the gradient flowing into ``c_new`` from later steps (may be
    None). Returns ``(dx, dh_prev, dc_prev, dscene)``.
    """
    x, h, c, scene, i, f, o, g, tc = cache
    do = dh * tc
    dcn = dh * o * (1 - tc * tc)
    if dc is not None:
        dcn = dcn + dc
    da = np.concatenate(
        [
            dcn * g * i * (1 - i),
            dcn * c * f * (1 - f),
            do * o * (1 - o),
            dcn * i * (1 - g * g),
        ],
        axis=1,
    )
    grads.Wx += da.T @ x
    grads.Wh += da.T @ h
    grads.b += da.sum(axis=0)
    dscene = None
    if scene is not None:
        grads.Ws += da.T @ scene
        dscene = da @ params.Ws
    return da @ params.Wx, da @ params.Wh, dcn * f, dscene


def lstm_step(x, prev: LSTMState, params: LSTMParams) -> LSTMState:
    """``(h_t, c_t) = LSTM(x_t, h_{t-1}, c_{t-1})`` for a single vector or a batch."""
    single = np.ndim(x) == 1
    xb, hb, cb = (np.atleast_2d(v) for v in (x, prev.h, prev.c))
    h, c, _ = lstm_step_forward(xb, hb, cb, params)
    return LSTMState(h[0], c[0]) if single else LSTMState(h, c)


def clstm_first_step(x, scene, params: LSTMParams) -> LSTMState:
    """First scan step from a zero state with the scene projection added to every gate."""
    if params.Ws is None:
        raise ConfigError("clstm_first_step needs parameters with a scene projection")
    single = np.ndim(x) == 1
    xb, sb = np.atleast_2d(x), np.atleast_2d(scene)
    zero = np.zeros((xb.shape[0], params.hidden), dtype=xb.dtype)
    h, c, _ = lstm_step_forward(xb, zero, zero, params, scene=sb)
    return LSTMState(h[0], c[0]) if single else LSTMState(h, c)
