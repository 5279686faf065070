"""Experiment configuration: a single JSON document with dotted-key
overrides, plus builders for the typed sub-configs."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .kinetics import DEFAULT_DECAY_TAU, ScanSchedule
from .phantom import FengParams
from .projector import ProjectorConfig
from .train import ModelSpec, TrainConfig

__all__ = [
    "default_config",
    "load_config",
    "apply_override",
    "schedule_from",
    "feng_from",
    "projector_from",
    "model_spec_from",
    "train_config_from",
]


def default_config() -> dict:
    """Desk-scale defaults; the full-scale protocol (128x128 images,
    160x128 sinograms, 320/40/40 split, 1.8e7 counts) is reachable by
    overriding phantom/projector/dataset keys."""
    return {
        "phantom": {"width": 32, "height": 32},
        "schedule": None,            # null = 18 frames over 60 min
        "feng": {},                  # FengParams field overrides
        "tau": DEFAULT_DECAY_TAU,
        "gen_dt": 0.05,
        "projector": {
            "num_angles": 64,
            "num_bins": 48,
            "randoms_fraction": 0.2,
            "target_total_counts": 1.1e6,
        },
        "dataset": {"num_train": 40, "num_val": 5, "num_test": 5, "seed": 1234},
        "model": {
            "prior": "one_tissue",
            "d_n": 4,
            "hidden": [16, 16],
            "encoder_hidden": 32,
            "solver_dt": [[3.0, 0.5], [30.0, 3.0], [60.0, 5.0]],
            "include_input_in_nn": False,
        },
        "train": {
            "mode": "unsupervised",
            "lambda": 0.1,
            "lr": 2e-3,
            "epochs": 150,
            "batch_size": 10,
            "seed": 0,
            "eval_every": 5,
        },
        "variant": "hyke",
        "seeds": [0, 1, 2],
        "ablate_modes": ["unsupervised"],
        "out_dir": "runs/exp",
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_override(cfg: dict, assignment: str):
    """Apply one 'dotted.key=json-value' override in place."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def load_config(path: str | None = None, overrides: list[str] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        user = json.loads(Path(path).read_text())
        if not isinstance(user, dict):
            raise ValueError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    return cfg


def schedule_from(cfg: dict) -> ScanSchedule:
    if cfg.get("schedule"):
        return ScanSchedule(np.asarray(cfg["schedule"], dtype=np.float64))
    return ScanSchedule.default()


def feng_from(cfg: dict) -> FengParams:
    return FengParams(**cfg.get("feng", {}))


def projector_from(cfg: dict) -> ProjectorConfig:
    p = cfg["projector"]
    return ProjectorConfig(image_height=cfg["phantom"]["height"],
                           image_width=cfg["phantom"]["width"],
                           num_angles=p["num_angles"], num_bins=p["num_bins"],
                           randoms_fraction=p["randoms_fraction"],
                           target_total_counts=p["target_total_counts"])


def model_spec_from(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(prior=m["prior"], d_n=m["d_n"], hidden=tuple(m["hidden"]),
                     encoder_hidden=m["encoder_hidden"],
                     solver_dt=m["solver_dt"],
                     include_input_in_nn=m["include_input_in_nn"])


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(mode=t["mode"], lam=t["lambda"], lr=t["lr"],
                       epochs=t["epochs"], batch_size=t["batch_size"],
                       seed=t["seed"], eval_every=t["eval_every"])
