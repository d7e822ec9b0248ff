"""Toy ablation sweeps along the receptive-field, depth and scene axes.

Every setting is trained with the same data and the toy schedule for each
seed, then scored on a held-out pop-out set. Results come out as one row per
setting with the seed-mean of sAUC, AUC, NSS and CC.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import model as net
from .synthetic import GenConfig, generate_dataset
from .training import PRESETS, TrainConfig, evaluate, prepare, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("sauc", "auc", "nss", "cc")
COLUMNS = ("axis", "setting", "receptive_field", "depth", "scene") + METRIC_COLUMNS + ("seeds",)


@dataclass(frozen=True)
class Setting:
    name: str
    config: net.ModelConfig


def axis_settings(axis: str) -> list[Setting]:
    """The two compared settings of an axis, weaker variant first."""
    if axis == "rf":
        # plain FCN so that only the encoder's reach differs
        return [Setting("rf-small", net.toy_model_config(depth=0, scene=False, dilation=1)),
                Setting("rf-large", net.toy_model_config(depth=0, scene=False, dilation=2))]
    if axis == "depth":
        return [Setting("depth-1", net.toy_model_config(depth=1)),
                Setting("depth-2", net.toy_model_config(depth=2))]
    if axis == "scene":
        return [Setting("no-scene", net.toy_model_config(scene=False)),
                Setting("scene", net.toy_model_config())]
    raise ValueError(f"unknown ablation axis {axis!r}; use rf, depth or scene")


@dataclass(frozen=True)
class AblationData:
    train: list
    val: list
    test: list


def make_data(n_train=500, n_val=100, n_test=100, data_seed=0, gen=GenConfig()) -> AblationData:
    seeds = np.random.SeedSequence(data_seed).generate_state(3)
    return AblationData(generate_dataset(n_train, int(seeds[0]), gen),
                        generate_dataset(n_val, int(seeds[1]), gen),
                        generate_dataset(n_test, int(seeds[2]), gen))


def run_setting(setting: Setting, data: AblationData, seeds, tc: TrainConfig) -> dict:
    scores = []
    test = prepare(data.test, setting.config)
    for seed in seeds:
        res = train(setting.config, data.train, data.val, replace(tc, seed=seed))
        s = evaluate(res.params, setting.config, test, with_sauc=True)
        log.info("%s seed %d: %s", setting.name, seed, s)
        scores.append(s)
    c = setting.config
    row = {"setting": setting.name, "receptive_field": c.encoder.receptive_field(),
           "depth": c.depth, "scene": int(c.uses_scene), "seeds": len(scores)}
    for key in METRIC_COLUMNS:
        row[key] = float(np.mean([s[key] for s in scores]))
    row["per_seed_nss"] = [s["nss"] for s in scores]
    return row


def ablate(axis: str, seeds=(0, 1, 2), data: AblationData | None = None,
           tc: TrainConfig = PRESETS["toy"], memo: dict | None = None) -> list[dict]:
    """Rows for both settings of ``axis``.

    ``memo`` maps model configs to finished rows so that sweeps over several
    axes train a shared setting (depth-2 with scene) only once.
    """
    data = data if data is not None else make_data()
    memo = {} if memo is None else memo
    rows = []
    for setting in axis_settings(axis):
        if setting.config not in memo:
            memo[setting.config] = run_setting(setting, data, seeds, tc)
        rows.append(dict(memo[setting.config], axis=axis, setting=setting.name))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
