"""Finite-difference checks of every hand-written backward pass.

Each check builds a small random problem at float64, reduces the layer
output to a scalar with a fixed random projection, and compares the analytic
gradients against central differences on a random subset of entries.
"""
from __future__ import annotations

import numpy as np

from . import encoders as E
from . import layers as L
from . import model as net
from .lstm import init_lstm_params, lstm_step_backward, lstm_step_forward
from .numerics import finite_diff_gradient, gradient_rel_error
from .spatial_context import dsclstm_stack_backward, dsclstm_stack_forward, init_dsclstm_params

TOLERANCE = 1e-4


def _compare(loss, analytic: dict, inputs: dict, rng, probes: int) -> float:
    """Worst relative error over ``probes`` random entries of every input."""
    worst = 0.0
    for name, x in inputs.items():
        idx = rng.choice(x.size, size=min(probes, x.size), replace=False)
        num = finite_diff_gradient(lambda _: loss(), x, indices=idx)
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        worst = max(worst, gradient_rel_error(a, num.reshape(-1)[idx]))
    return worst


def _projected(fn, rng, like):
    """``fn`` reduced to a scalar by a fixed random projection of its output."""
    proj = rng.normal(size=like.shape)
    return (lambda: float(np.sum(fn() * proj))), proj


def check_numerics(rng, probes=8) -> float:
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    loss, r = _projected(lambda: np.tanh(a @ b) + 1 / (1 + np.exp(-(a @ b))), rng, a @ b)
    z = a @ b
    s = 1 / (1 + np.exp(-z))
    dz = r * (1 - np.tanh(z) ** 2 + s * (1 - s))
    return _compare(loss, {"a": dz @ b.T, "b": a.T @ dz}, {"a": a, "b": b}, rng, probes)


def check_layers(rng, probes=8) -> float:
    worst = 0.0
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.3
    bias = rng.normal(size=4)
    for stride, dilation, act in ((1, 1, "none"), (2, 1, "relu"), (1, 2, "relu")):
        out, cache = L.conv2d_forward(x, w, bias, stride, dilation, act)
        loss, r = _projected(lambda: L.conv2d_forward(x, w, bias, stride, dilation, act)[0], rng, out)
        dx, dw, db = L.conv2d_backward(r, cache)
        worst = max(worst, _compare(loss, {"x": dx, "w": dw, "b": db},
                                    {"x": x, "w": w, "b": bias}, rng, probes))

    out, cache = L.maxpool_forward(x, 2, 2)
    loss, r = _projected(lambda: L.maxpool_forward(x, 2, 2)[0], rng, out)
    worst = max(worst, _compare(loss, {"x": L.maxpool_backward(r, cache)}, {"x": x}, rng, probes))

    scale = np.array([3.0])
    out, cache = L.l2norm_scale_forward(x, scale[0])
    loss, r = _projected(lambda: L.l2norm_scale_forward(x, scale[0])[0], rng, out)
    dx, ds = L.l2norm_scale_backward(r, cache)
    worst = max(worst, _compare(loss, {"x": dx, "s": np.array([ds])}, {"x": x, "s": scale}, rng, probes))

    m = rng.normal(size=(2, 4, 5))
    out, cache = L.softmax_map_forward(m)
    loss, r = _projected(lambda: L.softmax_map_forward(m)[0], rng, out)
    worst = max(worst, _compare(loss, {"m": L.softmax_map_backward(r, cache)}, {"m": m}, rng, probes))

    out = L.upsample_forward(m, 4)
    loss, r = _projected(lambda: L.upsample_forward(m, 4), rng, out)
    worst = max(worst, _compare(loss, {"m": L.upsample_backward(r, 4)}, {"m": m}, rng, probes))
    return worst


def check_lstm(rng, probes=8) -> float:
    p = init_lstm_params(rng, 5, 4, scene_dim=3)
    x, h, c, s = (rng.normal(size=(2, d)) for d in (5, 4, 4, 3))
    arrays = dict(x=x, h=h, c=c, s=s, Wx=p.Wx, Wh=p.Wh, b=p.b, Ws=p.Ws)

    def fwd():
        hn, cn, _ = lstm_step_forward(x, h, c, p, s)
        return np.concatenate([hn, cn], axis=1)

    loss, r = _projected(fwd, rng, fwd())
    _, _, cache = lstm_step_forward(x, h, c, p, s)
    g = p.zeros_like()
    dx, dh, dc, ds = lstm_step_backward(r[:, :4], r[:, 4:], cache, p, g)
    analytic = dict(x=dx, h=dh, c=dc, s=ds, Wx=g.Wx, Wh=g.Wh, b=g.b, Ws=g.Ws)
    return _compare(loss, analytic, arrays, rng, probes)


def check_spatial_context(rng, probes=6) -> float:
    params = init_dsclstm_params(rng, 3, 4, depth=2, scene_dim=5)
    x = rng.normal(size=(2, 3, 4, 3))
    scene = rng.normal(size=(2, 5))
    worst = 0.0
    for every in (False, True):
        params.scene_every_step = every
        out, cache = dsclstm_stack_forward(x, params, scene)
        loss, r = _projected(lambda: dsclstm_stack_forward(x, params, scene)[0], rng, out)
        g = params.zeros_like()
        dx, ds = dsclstm_stack_backward(r, cache, params, g)
        analytic, inputs = {"x": dx, "scene": ds}, {"x": x, "scene": scene}
        for k, (lyr, glyr) in enumerate(zip(params.layers, g.layers)):
            for part in ("horizontal", "vertical"):
                for key, arr in getattr(lyr, part).arrays().items():
                    name = f"{k}.{part}.{key}"
                    inputs[name] = arr
                    analytic[name] = getattr(getattr(glyr, part), key)
        worst = max(worst, _compare(loss, analytic, inputs, rng, probes))
    return worst


def check_encoders(rng, probes=4) -> float:
    worst = 0.0
    images = rng.uniform(size=(2, 32, 32, 3))
    for cfg in (E.toy_encoder_config(width=8, l2_scale=5.0),
                E.toy_multilayer_config(output_channels=8, tap_channels=4)):
        p = E.init_encoder_params(cfg, 3)
        out, cache = E.encoder_forward(p, cfg, images)
        loss, r = _projected(lambda: E.encoder_forward(p, cfg, images)[0], rng, out)
        worst = max(worst, _compare(loss, E.encoder_backward(r, cache, cfg), p, rng, probes))
    scfg = E.SceneEncoderConfig(input_size=(16, 16), fc_dim=6)
    sp = E.init_scene_params(scfg, 3)
    simg = rng.uniform(size=(2, 16, 16, 3))
    out, cache = E.scene_forward(sp, scfg, simg)
    loss, r = _projected(lambda: E.scene_forward(sp, scfg, simg)[0], rng, out)
    worst = max(worst, _compare(loss, E.scene_backward(r, cache, sp, scfg), sp, rng, probes))
    return worst


def check_training(rng, probes=3) -> float:
    """End to end: encoder, scene, two SLSTM layers, head and the -NSS loss."""
    from .synthetic import generate_dataset
    from .training import nss_loss_batch, prepare

    cfg = net.toy_model_config(hidden=8)
    p = net.init_params(cfg, int(rng.integers(1 << 30)))
    batch = prepare(generate_dataset(2, int(rng.integers(1 << 30))), cfg)

    def loss():
        maps, _ = net.forward(p, cfg, batch.images, batch.scene_images)
        return nss_loss_batch(maps, batch.masks)[0]

    maps, cache = net.forward(p, cfg, batch.images, batch.scene_images)
    _, dmaps = nss_loss_batch(maps, batch.masks)
    return _compare(loss, net.backward(dmaps, cache, p, cfg), p, rng, probes)


CHECKS = {
    "numerics": check_numerics,
    "layers": check_layers,
    "lstm": check_lstm,
    "spatial_context": check_spatial_context,
    "encoders": check_encoders,
    "training": check_training,
}


def run(modules=None, seed=0) -> dict:
    """Worst relative error per module name."""
    names = list(CHECKS) if not modules else list(modules)
    unknown = [m for m in names if m not in CHECKS]
    if unknown:
        raise KeyError(f"no gradient check for {unknown}; choose from {sorted(CHECKS)}")
    return {m: CHECKS[m](np.random.default_rng([seed, k])) for k, m in enumerate(names)}
