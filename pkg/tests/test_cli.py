import json

import numpy as np
import pytest

from dsclrcn import io as dio
from dsclrcn import layers as L
from dsclrcn import metrics as M
from dsclrcn.cli import main

TINY = """\
# a few steps on a handful of synthetic samples
n_train=8
n_val=4
hidden=4
batch_size=4
total_steps=4
validate_every=2
lr_decay_every=2
"""


def test_train_without_config_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "warmup=10\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_salicon_preset_resolution(tmp_path, capsys, monkeypatch):
    from dsclrcn import training as T

    def stop(*a, **k):
        raise T.ConfigError("stopped before training")

    monkeypatch.setattr(T, "train", stop)
    main(["train", "--preset", "salicon", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    for line in ("batch_size=20", "base_lr_pretrained=0.001", "base_lr_new=0.01",
                 "lr_decay_factor=2.5", "lr_decay_every=500", "total_steps=5000", "seed=0"):
        assert line in out.splitlines()


def test_train_is_reproducible_and_predict_works(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run), "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "seed=3" in out and "hidden=4" in out
    a = (tmp_path / "a" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "history.csv").read_bytes()
    assert a.splitlines()[0] == b"step,lr,train_loss,val_nss,val_cc,val_auc"
    img = np.random.default_rng(0).uniform(size=(30, 45, 3))
    dio.write_pnm(tmp_path / "img.ppm", img)
    assert main(["predict", "--ckpt", str(tmp_path / "a" / "checkpoint"),
                 "--image", str(tmp_path / "img.ppm"), "--out", str(tmp_path / "s.pgm")]) == 0
    s = dio.read_pnm(tmp_path / "s.pgm")
    assert s.shape == (30, 45) and s.max() == 1.0


def test_predict_on_broken_checkpoint(tmp_path):
    (tmp_path / "ck").mkdir()
    dio.write_pnm(tmp_path / "i.ppm", np.zeros((8, 8, 3)))
    assert main(["predict", "--ckpt", str(tmp_path / "ck"), "--image", str(tmp_path / "i.ppm"),
                 "--out", str(tmp_path / "o.pgm")]) == 3


def make_eval_dirs(tmp_path, n=3, masks=False):
    pred, fix = tmp_path / "pred", tmp_path / "fix"
    pred.mkdir()
    fix.mkdir()
    rng = np.random.default_rng(1)
    for k in range(n):
        pts = np.unique(rng.integers(0, 40, size=(6, 2)), axis=0)
        mask = M.fixation_mask(pts, (40, 48))
        dio.write_saliency_pgm(pred / f"im{k}.pgm", M.fixation_density(mask))
        if masks:
            dio.write_pnm(fix / f"im{k}.pgm", mask.astype(float))
        else:
            dio.write_fixations(fix / f"im{k}.csv", pts)
    return pred, fix


@pytest.mark.parametrize("masks", [False, True])
def test_eval_on_blurred_ground_truth(tmp_path, capsys, masks):
    pred, fix = make_eval_dirs(tmp_path, masks=masks)
    out = tmp_path / "m.jsonl"
    assert main(["eval", "--pred", str(pred), "--fix", str(fix), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["stem"] for r in rows] == ["im0", "im1", "im2", "__mean__"]
    for r in rows[:-1]:
        assert r["cc"] > 0.9999
        assert r["auc"] > 0.99
    for key in ("nss", "cc", "auc", "sauc"):
        assert abs(rows[-1][key] - np.mean([r[key] for r in rows[:-1]])) < 1e-12


def test_eval_unpaired_and_bad_metric(tmp_path):
    pred, fix = make_eval_dirs(tmp_path)
    (fix / "im1.csv").unlink()
    assert main(["eval", "--pred", str(pred), "--fix", str(fix)]) == 3
    assert main(["eval", "--pred", str(pred), "--fix", str(fix), "--metrics", "kl"]) == 2


def test_gradcheck_all_modules(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 6 and "FAIL" not in out


def test_synth_writes_pairs(tmp_path, capsys):
    assert main(["synth", "--n", "3", "--out", str(tmp_path / "d"), "--seed", "4"]) == 0
    names = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert names == ["0000.csv", "0000.ppm", "0001.csv", "0001.ppm", "0002.csv", "0002.ppm"]
    assert dio.read_pnm(tmp_path / "d" / "0000.ppm").shape == (64, 64, 3)
    assert "seed=4" in capsys.readouterr().out
    first = (tmp_path / "d" / "0001.ppm").read_bytes()
    main(["synth", "--n", "3", "--out", str(tmp_path / "e"), "--seed", "4"])
    assert (tmp_path / "e" / "0001.ppm").read_bytes() == first


def test_train_from_directory(tmp_path, capsys):
    main(["synth", "--n", "6", "--out", str(tmp_path / "d")])
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"train_dir={tmp_path / 'd'}\nhidden=4\nbatch_size=3\ntotal_steps=2\n"
                   "validate_every=1\nlr_decay_every=1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "history.csv").read_text().splitlines()) == 3


def test_ablate_tiny(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["ablate", "--axis", "depth", "--seeds", "0", "--steps", "2", "--n-train", "4",
                 "--n-val", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("axis,setting,receptive_field,depth,scene,sauc,auc,nss,cc")
    assert len(lines) == 3
