"""Command line entry point: ``dsclrcn <verb> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import _kernels
from . import ablation as A
from . import gradcheck as G
from . import io as dio
from . import metrics as M
from . import training as T
from .errors import ConfigError, DSCLError, FormatError, NumericalError, ShapeError
from .synthetic import GenConfig, Sample, generate_dataset

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("dsclrcn")


class UsageError(Exception):
    pass


def _print_resolved(title: str, values: dict) -> None:
    print(f"# {title}")
    for k, v in values.items():
        print(f"{k}={v}")
    sys.stdout.flush()


# --- data -----------------------------------------------------------------------------

def load_samples(directory) -> list[Sample]:
    """PPM/PGM images paired with same-stem fixation CSVs."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    images = {p.stem: p for p in d.iterdir() if p.suffix in (".ppm", ".pgm")}
    fixes = {p.stem: p for p in d.iterdir() if p.suffix == ".csv"}
    _check_pairs(images, fixes)
    out = []
    for stem in sorted(images):
        img = dio.read_pnm(images[stem])
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        out.append(Sample(img, dio.read_fixations(fixes[stem]), None, None))
    return out


def _check_pairs(a: dict, b: dict) -> None:
    lonely = sorted(set(a) ^ set(b))
    if lonely:
        raise FormatError(f"unpaired files: {', '.join(lonely)}")
    if not a:
        raise FormatError("no files found")


# --- verbs ------------------------------------------------------------------------------

DATA_KEYS = {"train_dir": "", "val_dir": "", "n_train": 500, "n_val": 100, "data_seed": 1,
             "mode": "color"}


MODEL_KEYS = {"input_size", "hidden", "depth", "inject_scene", "scene_every_step", "encoder",
              "encoder_blocks", "l2_scale", "taps", "tap_channels", "output_channels", "scene",
              "scene_blocks", "scene_size", "scene_scale"}


def cmd_train(args) -> int:
    if args.config is None and args.preset is None:
        raise UsageError("train needs --config PATH or --preset NAME")
    values = {}
    if args.config is not None:
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} not found")
        values = T.read_kv(args.config)
    base = T.PRESETS[args.preset] if args.preset else T.PRESETS["toy"]
    tc = T.train_config_from(values, base)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    model_cfg = T.model_config_from(values)
    data = {k: T.parse_value(str(values[k]), v) if k in values else v for k, v in DATA_KEYS.items()}
    unknown = set(values) - set(asdict(tc)) - set(data) - MODEL_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    _print_resolved("train config", {**T.train_config_to_kv(tc), **data})
    _print_resolved("model config", T.model_config_to_kv(model_cfg))
    print(f"seed={tc.seed}", flush=True)

    if data["train_dir"]:
        train_s = load_samples(data["train_dir"])
        val_s = load_samples(data["val_dir"]) if data["val_dir"] else train_s
    else:
        gen = GenConfig(size=model_cfg.input_size, mode=data["mode"])
        train_s = generate_dataset(data["n_train"], data["data_seed"], gen)
        val_s = generate_dataset(data["n_val"], data["data_seed"] + 1, gen)
    res = T.train(model_cfg, train_s, val_s, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(out / "checkpoint", res.params, model_cfg)
    (out / "history.csv").write_text(T.history_csv(res.history))
    T.write_kv(out / "train.cfg", {**T.train_config_to_kv(tc), **data})
    print(f"best_step={res.best_step} best_val_nss={res.best_val_nss:.6f}")
    return 0


def cmd_predict(args) -> int:
    params, cfg = T.load_checkpoint(args.ckpt)
    _print_resolved("model config", T.model_config_to_kv(cfg))
    img = dio.read_pnm(args.image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    s = T.predict(params, cfg, img)
    dio.write_saliency_pgm(args.out, s)
    print(f"wrote {args.out} ({s.shape[0]}x{s.shape[1]})")
    return 0


def _read_fixation_file(path):
    if path.suffix == ".pgm":
        mask = dio.read_pnm(path)
        if mask.ndim != 2:
            raise FormatError(f"{path}: fixation mask must be single channel")
        return mask > 0
    return dio.read_fixations(path)


def evaluate_dirs(pred_dir, fix_dir, metrics, seed=0) -> list[dict]:
    """Fixations are ``row,col`` CSVs or binary PGM masks (nonzero = fixated)."""
    preds = {p.stem: p for p in Path(pred_dir).glob("*.pgm")}
    fixes = {p.stem: p for p in sorted(Path(fix_dir).glob("*.pgm")) + sorted(Path(fix_dir).glob("*.csv"))}
    _check_pairs(preds, fixes)
    stems = sorted(preds)
    maps = {k: dio.read_pnm(preds[k]) for k in stems}
    points = {k: _read_fixation_file(fixes[k]) for k in stems}
    rows = []
    for n, k in enumerate(stems):
        s = maps[k]
        mask = M.fixation_mask(points[k], s.shape)
        row = {"stem": k}
        if "nss" in metrics:
            row["nss"] = M.nss(s, mask)
        if "cc" in metrics:
            row["cc"] = M.cc(s, M.fixation_density(mask))
        if "auc" in metrics:
            row["auc"] = M.auc_judd(s, mask)
        if "sauc" in metrics:
            others = [M.fixation_mask(points[j], maps[j].shape) for j in stems if j != k]
            row["sauc"] = M.sauc(s, mask, others, seed=[seed, n])
        rows.append(row)
    return rows


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"nss", "cc", "auc", "sauc"}
    if bad:
        raise UsageError(f"unknown metrics: {', '.join(sorted(bad))}")
    _print_resolved("eval", {"pred": args.pred, "fix": args.fix, "metrics": ",".join(metrics)})
    print(f"seed={args.seed}", flush=True)
    rows = evaluate_dirs(args.pred, args.fix, metrics, args.seed)
    agg = {"stem": "__mean__", **{m: float(np.mean([r[m] for r in rows])) for m in metrics}}
    text = "".join(json.dumps(r) + "\n" for r in rows + [agg])
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    modules = [args.module] if args.module else None
    try:
        errs = G.run(modules, args.seed)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    print(f"seed={args.seed}")
    failed = False
    for name, err in errs.items():
        ok = err < G.TOLERANCE
        failed |= not ok
        print(f"{name:16s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else 0


def cmd_synth(args) -> int:
    gen = GenConfig(size=(args.size, args.size), mode=args.mode)
    _print_resolved("synth", {**asdict(gen), "n": args.n})
    print(f"seed={args.seed}", flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(args.n - 1)))
    for k, s in enumerate(generate_dataset(args.n, args.seed, gen)):
        stem = f"{k:0{width}d}"
        dio.write_pnm(out / f"{stem}.ppm", s.image)
        dio.write_fixations(out / f"{stem}.csv", s.fixations)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_ablate(args) -> int:
    seeds = tuple(int(v) for v in args.seeds.split(","))
    tc = T.PRESETS["toy"]
    if args.steps is not None:
        tc = replace(tc, total_steps=args.steps, lr_decay_every=max(1, args.steps // 10),
                     validate_every=max(1, args.steps // 10))
    _print_resolved("ablate", {"axis": args.axis, "seeds": args.seeds, "n_train": args.n_train,
                               **T.train_config_to_kv(tc)})
    print(f"seed={args.seeds}", flush=True)
    data = A.make_data(n_train=args.n_train, n_val=args.n_val, n_test=args.n_val,
                       data_seed=args.data_seed)
    text = A.rows_to_csv(A.ablate(args.axis, seeds, data, tc))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsclrcn", description="Saliency model toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(T.PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="saliency map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score prediction maps against fixations")
    p.add_argument("--pred", required=True)
    p.add_argument("--fix", required=True)
    p.add_argument("--metrics", default="nss,cc,auc,sauc")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=sorted(G.CHECKS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write synthetic pop-out samples")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="color", choices=("color", "orientation", "lone", "none"))
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="toy ablation along one axis")
    p.add_argument("--axis", required=True, choices=("rf", "depth", "scene"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = _kernels.apply_thread_limit()
    if threads:
        log.info("worker threads capped at %d", threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, FileNotFoundError, ValueError, DSCLError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
