import numpy as np
import pytest

from dsclrcn import encoders as E
from dsclrcn.errors import ConfigError, DegenerateInputError, FormatError
from dsclrcn.gradcheck import check_encoders
from dsclrcn.numerics import save_tensor, tensor_to_bytes


@pytest.fixture
def img():
    return np.random.default_rng(0).uniform(size=(64, 64, 3))


def test_toy_encode_shape_and_norm(img):
    cfg = E.toy_encoder_config()
    p = E.init_encoder_params(cfg, 0)
    out = E.toy_local_encode(img, cfg, p)
    assert out.shape == (8, 8, 32)
    assert abs(np.linalg.norm(out) - 400) < 1e-3


def test_toy_encode_degenerate_and_deterministic(img):
    cfg = E.toy_encoder_config()
    p = E.init_encoder_params(cfg, 0)
    with pytest.raises(DegenerateInputError):
        E.toy_local_encode(np.zeros((64, 64, 3)), cfg, p)
    a = E.toy_local_encode(img, cfg, E.init_encoder_params(cfg, 7))
    b = E.toy_local_encode(img, cfg, E.init_encoder_params(cfg, 7))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("size", [(8, 8), (16, 40), (48, 24), (480, 640)])
def test_output_dims(size):
    cfg = E.toy_encoder_config(width=8)
    p = E.init_encoder_params(cfg, 0)
    x = np.random.default_rng(1).uniform(size=(1,) + size + (3,))
    out, _ = E.encoder_forward(p, cfg, x)
    assert out.shape == (1, -(-size[0] // 8), -(-size[1] // 8), 8)


def test_stride_product_enforced():
    with pytest.raises(ConfigError):
        E.EncoderConfig((E.Block(8, pool=(2, 2)), E.Block(8, pool=(2, 2))))


def test_block_string_roundtrip():
    for b in E.vgg16_dilated_config().blocks + E.toy_encoder_config().blocks:
        assert E.Block.parse(b.to_string()) == b
    with pytest.raises(ConfigError):
        E.Block.parse("8,3,1")


def window(cfg, y):
    """Input rows that can influence output row ``y`` before normalisation."""
    off, jump = 0, 1
    for k, s, d in cfg.layer_settings():
        if s == 1 or k % 2:
            off += d * (k // 2) * jump
        jump *= s
    lo = y * jump - off
    return lo, lo + cfg.receptive_field() - 1


@pytest.mark.parametrize("dilation,rf", [(1, 38), (2, 54)])
def test_receptive_field_by_perturbation(dilation, rf):
    cfg = E.toy_encoder_config(dilation=dilation, width=8)
    assert cfg.receptive_field() == rf
    p = E.init_encoder_params(cfg, 2)
    for k in p:
        if k.endswith(".b"):
            p[k][:] = 0.05
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(1, 96, 96, 3))
    y = 6
    lo, hi = window(cfg, y)
    feats = lambda im: E._blocks_forward(p, cfg.blocks, 3, im, "enc")[0][0, y, y]
    base = feats(x)
    outside = x.copy()
    mask = np.ones((96, 96), bool)
    mask[max(lo, 0):hi + 1, max(lo, 0):hi + 1] = False
    outside[0][mask] = rng.uniform(size=(mask.sum(), 3))
    assert np.array_equal(feats(outside), base)
    for r, c in [(lo, lo), (hi, hi), (lo, hi)]:
        near = x.copy()
        near[0, max(r - 2, lo):min(r + 3, hi + 1), max(c - 2, lo):min(c + 3, hi + 1)] += 5
        assert not np.array_equal(feats(near), base)


def test_vgg_schema_receptive_fields():
    cfg = E.vgg16_dilated_config()
    assert cfg.stride_product() == 8
    assert cfg.channels == 512
    ends = E._block_end_index(cfg.blocks)
    rfs = [cfg.receptive_field(upto=b) for b in (4, 5, 6)]
    assert rfs == [188, 316, 444]
    assert len(ends) == len(cfg.blocks)


def test_resnet_schema_stride():
    cfg = E.resnet50_dilated_schema()
    assert cfg.stride_product() == 8 and cfg.channels == 512


def test_multilayer_shared_scale_and_shape(img):
    cfg = E.toy_multilayer_config(output_channels=12, tap_channels=16)
    p = E.init_encoder_params(cfg, 0)
    out, cache = E.encoder_forward(p, cfg, img[None])
    assert out.shape == (1, 8, 8, 12)
    _, _, (rc, nc, fc) = cache
    norms = []
    for unit, _, scale, shape in nc:
        norms.append(np.linalg.norm(scale * unit))
    assert abs(norms[0] - norms[1]) < 1e-6
    assert abs(norms[0] - 400) < 1e-6
    assert sum(k.endswith("scale") for k in p) == 1
    with pytest.raises(ConfigError):
        E.toy_local_encode_multilayer(img, E.toy_encoder_config(), E.init_encoder_params(E.toy_encoder_config(), 0))


def test_multilayer_identical_taps_give_identical_halves(img):
    base = E.toy_encoder_config(width=16)
    cfg = E.EncoderConfig(base.blocks, 50.0, taps=(3, 3), tap_channels=4, output_channels=4)
    p = E.init_encoder_params(cfg, 0)
    p["enc.tap1.w"][:] = p["enc.tap0.w"]
    p["enc.fuse.w"][:] = 0
    p["enc.fuse.w"][:, :4, 0, 0] = np.eye(4)
    p["enc.fuse.w"][:, 4:, 0, 0] = np.eye(4)
    _, cache = E.encoder_forward(p, cfg, img[None])
    _, _, (rc, nc, fc) = cache
    cat = fc[0][0]
    np.testing.assert_array_equal(cat[..., :4], cat[..., 4:])


def test_multilayer_tap_mismatch():
    blocks = E.toy_encoder_config().blocks
    cfg = E.EncoderConfig(blocks, taps=(1, 3), output_channels=8)
    p = E.init_encoder_params(cfg, 0)
    with pytest.raises(Exception, match="tap spatial dims"):
        E.encoder_forward(p, cfg, np.ones((1, 64, 64, 3)))


def test_scene_vector(img):
    cfg = E.SceneEncoderConfig()
    p = E.init_scene_params(cfg, 0)
    s = E.toy_scene_encode(img, cfg, p)
    assert s.shape == (128,)
    assert abs(np.linalg.norm(s) - 9) < 1e-6
    _, cache = E.scene_forward(p, cfg, np.stack([img[:32, :32]]))
    assert np.all(cache[3] >= 0)


def test_encoder_gradients():
    assert check_encoders(np.random.default_rng(4)) < 1e-4


def test_feature_loaders(tmp_path):
    fm = np.random.default_rng(5).normal(size=(4, 5, 6)).astype(np.float32)
    save_tensor(tmp_path / "f.dsct", fm)
    assert np.array_equal(E.load_feature_map(tmp_path / "f.dsct"), fm)
    renorm = E.load_feature_map(tmp_path / "f.dsct", renormalize=400.0)
    assert abs(np.linalg.norm(renorm.astype(np.float64)) - 400) < 1e-2
    save_tensor(tmp_path / "v.dsct", fm[0, 0])
    assert E.load_scene_vector(tmp_path / "v.dsct").shape == (6,)
    save_tensor(tmp_path / "m.dsct", fm[0])
    with pytest.raises(FormatError):
        E.load_feature_map(tmp_path / "m.dsct")
    (tmp_path / "t.dsct").write_bytes(tensor_to_bytes(fm)[:-3])
    with pytest.raises(FormatError):
        E.load_feature_map(tmp_path / "t.dsct")
    bad = fm.copy()
    bad[0, 0, 0] = np.nan
    save_tensor(tmp_path / "n.dsct", bad)
    with pytest.raises(FormatError):
        E.load_feature_map(tmp_path / "n.dsct")
