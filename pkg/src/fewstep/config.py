"""JSON experiment configs.

Section names and keys mirror the dataclass field names in snake_case; the
path-regularization weight is spelled "lambda" in JSON and lambda_ in
Python. Any key can be overridden from the command line with
--set dotted.path=value (values parse as JSON, falling back to strings).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from .decoder import DecodeConfig
from .denoiser import ModelConfig
from .errors import ConfigError
from .objectives import LossConfig
from .tasks import TaskSpec
from .trainer import TrainConfig

STAGES = ("train-teacher", "rollout", "distill", "eval", "analyze")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "stages": ["train-teacher", "rollout", "distill", "eval"],
    "task": {
        "kind": "copy",
        "vocab_size": 32,
        "prompt_len": 16,
        "answer_len": 16,
        "modulus": None,
        "train_seed": 1,
        "heldout_seed": 2,
    },
    "model": {
        "vocab_size": 32,
        "mask_id": 0,
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 4,
        "d_ff": 256,
        "max_len": 32,
        "block_size": 4,
    },
    "teacher_train": {
        "learning_rate": 1e-3,
        "total_steps": 4000,
        "batch_size": 64,
        "loss": "mdm",
        "p_rand": 0.0,
        "seed": 0,
    },
    "teacher_stop_accuracy": 0.97,
    "teacher_eval_every": 250,
    "rollout": {
        "n_prompts": 512,
        "decode": {
            "block_size": 4,
            "mode": "full",
            "temperature": 0.0,
            "max_new_tokens": 16,
        },
    },
    "distill_train": {
        "learning_rate": 3e-4,
        "total_steps": 300,
        "batch_size": 16,
        "ref_update_interval": 10,
        "p_rand": 0.1,
        "loss": "t3d",
        "loss_config": {"lambda": 0.2, "beta": 1.0, "delta_clamp": 20.0, "block_size": 4},
        "seed": 0,
    },
    "student_decode": {
        "block_size": 4,
        "mode": "static",
        "steps_per_block": 1,
        "temperature": 0.0,
        "max_new_tokens": 16,
    },
    "eval": {
        "n_prompts": 200,
        "block_sizes": [4, 8],
        "tokps": [1, 2, 4],
        "temperature": 0.0,
    },
    "analyze": {
        "n_prompts": 4,
        "teacher_temperature": 1.0,
        "max_leaves": 1000000,
        "n_rollouts": 10000,
    },
}


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        user = json.load(f)
    return merge_config(user)


def merge_config(user: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst: dict, src: dict):
        for key, val in src.items():
            if isinstance(val, dict) and isinstance(dst.get(key), dict):
                merge(dst[key], val)
            else:
                dst[key] = val

    merge(cfg, user)
    return cfg


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for entry in sets:
        if "=" not in entry:
            raise ConfigError(f"--set expects key=value, got {entry!r}")
        key, raw = entry.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


# --- typed views -----------------------------------------------------------


def task_spec(cfg: dict) -> TaskSpec:
    return TaskSpec(**cfg["task"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _loss_config(d: dict) -> LossConfig:
    d = dict(d)
    if "lambda" in d:
        d["lambda_"] = d.pop("lambda")
    return LossConfig(**d)


def train_config(section: dict) -> TrainConfig:
    d = dict(section)
    if "loss_config" in d:
        d["loss_config"] = _loss_config(d["loss_config"])
    return TrainConfig(**d)


def decode_config(section: dict) -> DecodeConfig:
    return DecodeConfig(**section)


def dump_decode(cfg: DecodeConfig) -> dict:
    return cfg.to_json_dict()


def dump_train(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    lc = d.pop("loss_config")
    lc["lambda"] = lc.pop("lambda_")
    d["loss_config"] = lc
    return d


def save_config(path, cfg: dict) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8")
