import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsclrcn.errors import ConfigError, ShapeError
from dsclrcn.gradcheck import check_lstm
from dsclrcn.lstm import (
    LSTMParams,
    LSTMState,
    clstm_first_step,
    init_lstm_params,
    lstm_step,
    lstm_step_backward,
    lstm_step_forward,
)
from dsclrcn.numerics import finite_diff_gradient, gradient_rel_error


def zero_params(m, n, s=None):
    return LSTMParams(np.zeros((4 * n, m)), np.zeros((4 * n, n)), np.zeros(4 * n),
                      None if s is None else np.zeros((4 * n, s)))


def reference_step(x, h, c, p, scene=None):
    """Gate-by-gate evaluation through the per-gate views."""
    sig = lambda v: 1 / (1 + np.exp(-v))
    extra = {g: 0 if scene is None else getattr(p, f"W_s{g}") @ scene for g in "ifoc"}
    i = sig(p.W_xi @ x + p.W_hi @ h + p.b_i + extra["i"])
    f = sig(p.W_xf @ x + p.W_hf @ h + p.b_f + extra["f"])
    o = sig(p.W_xo @ x + p.W_ho @ h + p.b_o + extra["o"])
    g = np.tanh(p.W_xc @ x + p.W_hc @ h + p.b_c + extra["c"])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_zero_weights_example():
    c0 = np.array([0.3, -1.2, 2.0])
    st_ = lstm_step(np.array([5.0, -1.0]), LSTMState(np.zeros(3), c0), zero_params(2, 3))
    np.testing.assert_allclose(st_.c, 0.5 * c0, rtol=1e-15)
    np.testing.assert_allclose(st_.h, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)


def test_forget_bias_example():
    p = zero_params(2, 3)
    p.b[3:6] = 1.0
    k = np.array([1.0, -2.0, 0.5])
    out = lstm_step(np.zeros(2), LSTMState(np.zeros(3), k), p)
    np.testing.assert_allclose(out.c, 0.7310585786300049 * k, rtol=1e-14)


def test_init_forget_bias_and_range():
    p = init_lstm_params(np.random.default_rng(0), 5, 4, scene_dim=3)
    np.testing.assert_array_equal(p.b_f, 1.0)
    assert np.all(p.b_i == 0) and np.all(p.b_o == 0) and np.all(p.b_c == 0)
    assert np.abs(p.Wx).max() <= 1 / np.sqrt(5)
    assert np.abs(p.Wh).max() <= 1 / np.sqrt(4)
    assert p.Ws.shape == (16, 3) and p.W_si.shape == (4, 3)


def test_step_matches_gatewise_reference():
    rng = np.random.default_rng(1)
    p = init_lstm_params(rng, 3, 4, scene_dim=2)
    p.b[:] = rng.normal(size=16)
    x, h, c, s = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4), rng.normal(size=2)
    h1, c1, _ = lstm_step_forward(x[None], h[None], c[None], p, s[None])
    rh, rc = reference_step(x, h, c, p, s)
    np.testing.assert_allclose(h1[0], rh, atol=1e-14)
    np.testing.assert_allclose(c1[0], rc, atol=1e-14)


def test_dim_mismatch():
    p = init_lstm_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ShapeError):
        lstm_step(np.zeros(2), LSTMState.zeros(4), p)
    with pytest.raises(ShapeError):
        LSTMParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))


def test_clstm_degenerate_injection_is_bit_exact():
    rng = np.random.default_rng(2)
    p = init_lstm_params(rng, 3, 4, scene_dim=5)
    x = rng.normal(size=3)
    plain = lstm_step(x, LSTMState.zeros(4), p)
    zero_scene = clstm_first_step(x, np.zeros(5), p)
    assert np.array_equal(zero_scene.h, plain.h) and np.array_equal(zero_scene.c, plain.c)
    p.Ws[:] = 0
    zero_w = clstm_first_step(x, rng.normal(size=5), p)
    assert np.array_equal(zero_w.h, plain.h) and np.array_equal(zero_w.c, plain.c)


def test_clstm_preactivation_offset_exact():
    rng = np.random.default_rng(3)
    p = init_lstm_params(rng, 3, 4, scene_dim=5)
    x, s = rng.normal(size=3), rng.normal(size=5)
    out = clstm_first_step(x, s, p)
    rh, rc = reference_step(x, np.zeros(4), np.zeros(4), p, s)
    np.testing.assert_allclose(out.h, rh, atol=1e-14)
    np.testing.assert_allclose(out.c, rc, atol=1e-14)


def test_clstm_needs_scene_projection():
    p = init_lstm_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ConfigError):
        clstm_first_step(np.zeros(3), np.zeros(2), p)


def test_zero_output_gradients_give_zero():
    rng = np.random.default_rng(4)
    p = init_lstm_params(rng, 3, 4, scene_dim=2)
    _, _, cache = lstm_step_forward(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)),
                                    rng.normal(size=(2, 4)), p, rng.normal(size=(2, 2)))
    g = p.zeros_like()
    outs = lstm_step_backward(np.zeros((2, 4)), np.zeros((2, 4)), cache, p, g)
    for arr in list(outs) + list(g.arrays().values()):
        assert not np.any(arr)


def test_single_step_gradients():
    assert check_lstm(np.random.default_rng(5), probes=40) < 1e-4


def test_five_step_chain_gradient():
    rng = np.random.default_rng(6)
    p = init_lstm_params(rng, 3, 4)
    xs = rng.normal(size=(5, 1, 3))
    w = rng.normal(size=4)

    def run():
        h = c = np.zeros((1, 4))
        caches = []
        for x in xs:
            h, c, cache = lstm_step_forward(x, h, c, p)
            caches.append(cache)
        return h, caches

    h, caches = run()
    g = p.zeros_like()
    dh, dc = w[None].copy(), None
    dxs = []
    for cache in reversed(caches):
        dx, dh, dc, _ = lstm_step_backward(dh, dc, cache, p, g)
        dxs.append(dx)
    loss = lambda: float(run()[0][0] @ w)
    for name in ("Wx", "Wh", "b"):
        num = finite_diff_gradient(lambda _: loss(), getattr(p, name))
        assert gradient_rel_error(getattr(g, name), num) < 1e-4
    num = finite_diff_gradient(lambda _: loss(), xs)
    assert gradient_rel_error(np.stack(dxs[::-1]), num) < 1e-4


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_state_bounds(seed):
    rng = np.random.default_rng(seed)
    p = init_lstm_params(rng, 3, 5)
    p.Wx *= 5
    state = LSTMState(np.zeros(5), rng.normal(size=5) * 3)
    for _ in range(10):
        new = lstm_step(rng.normal(size=3) * 4, state, p)
        assert np.all(np.abs(new.h) < 1)
        assert np.all(np.abs(new.c) <= np.abs(state.c) + 1)
        state = new


def test_memory_persistence():
    p = zero_params(2, 3)
    p.b[0:3] = -20  # input gate shut
    p.b[3:6] = 20  # forget gate open
    c0 = np.array([0.7, -0.2, 1.5])
    state = LSTMState(np.zeros(3), c0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = lstm_step(rng.normal(size=2), state, p)
    np.testing.assert_allclose(state.c, c0, atol=1e-6)
