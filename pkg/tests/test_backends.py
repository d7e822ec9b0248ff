import numpy as np
import pytest

from dsclrcn import _kernels
from dsclrcn import layers as L
from dsclrcn import model as net

pytestmark = pytest.mark.skipif("numba" not in _kernels.BACKENDS, reason="numba not installed")


@pytest.fixture
def both():
    """Run a callable under each backend and restore the active one."""
    saved = _kernels.active().name

    def run(fn):
        outs = []
        for name in ("numpy", "numba"):
            _kernels.set_backend(name)
            outs.append(fn())
        _kernels.set_backend(saved)
        return outs

    yield run
    _kernels.set_backend(saved)


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 3)])
def test_conv_backends_agree(both, stride, dilation):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.normal(size=(2, 11, 9, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)

    def fn():
        out, cache = L.conv2d_forward(x, w, b, stride, dilation, "relu")
        return (out,) + L.conv2d_backward(np.ones_like(out), cache)

    a, c = both(fn)
    for u, v in zip(a, c):
        np.testing.assert_allclose(u, v, atol=1e-12)


@pytest.mark.parametrize("factor", [2, 3, 8])
def test_upsample_and_blur_backends_agree(both, factor):
    rng = np.random.default_rng(factor)
    x = rng.normal(size=(2, 5, 7))
    d = rng.normal(size=(2, 5 * factor, 7 * factor))
    m = rng.uniform(size=(23, 31))
    a, c = both(lambda: (L.upsample_forward(x, factor), L.upsample_backward(d, factor),
                         L.gaussian_blur(m, 2.5)))
    for u, v in zip(a, c):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_full_model_backends_agree(both):
    cfg = net.toy_model_config(hidden=4)
    p = net.init_params(cfg, 0)
    x = np.random.default_rng(1).uniform(size=(2, 64, 64, 3))
    a, c = both(lambda: net.forward(p, cfg, x)[0])
    np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-14)


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")
