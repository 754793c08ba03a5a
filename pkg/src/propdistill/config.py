"""Run configuration: YAML file + environment + CLI overrides, schema-checked.

Unknown keys are rejected. Environment variables override file values with the
prefix `PROPDISTILL__`, path segments separated by double underscores
(PROPDISTILL__TRAIN__EPOCHS=10); values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import hashlib
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .distill import LossWeights
from .encoder import EncoderConfig
from .errors import ConfigError
from .student import TrainConfig
from .teachers import TeacherTrainConfig

ENV_PREFIX = "PROPDISTILL__"

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "paths": {
        "articles_dir": None,
        "spans_file": None,
        "sentence_labels_file": None,
        "split_manifest": None,
        "relation_corpus": None,
        "relation_dev_corpus": None,
        "role_corpus": None,
        "role_dev_corpus": None,
        "teacher_dir": "teachers",
        "cache_dir": "teacher_cache",
        "output_dir": "runs",
    },
    "encoder": {
        "backbone": "toy_random",
        "hidden_dim": 16,
        "max_input_length": 4096,
        "sentence_marker": "<s>",
        "num_layers": 2,
        "num_heads": 2,
        "vocab_buckets": 2048,
        "subword_max_chars": 4,
        "pretrained_name": "allenai/longformer-base-4096",
        "seed": 0,
    },
    "teacher_train": {
        "epochs": 20,
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "dev_fraction": 0.2,
        "head_hidden": None,
        "early_stop_dev_f1": None,
    },
    "train": {
        "level": "sentence",
        "mode": "distill",
        "epochs": 6,
        "learning_rate": None,
        "weight_decay": 1e-2,
        "batch_size": 1,
        "head_hidden": None,
        "decision_threshold": 0.5,
        "ablate_relations": [],
        "shuffle": True,
        "early_stop_train_f1": None,
        "track_train_f1": False,
    },
    "loss": {
        "epsilon": 1e-12,
        "relation_loss_reduction": "mean",
        "weights": {
            "propaganda": 1.0,
            "response_local": 1.0,
            "response_global": 1.0,
            "relation_local": 1.0,
            "relation_global": 1.0,
        },
    },
}


def _check_keys(user: Mapping, schema: Mapping, prefix: str = "") -> None:
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(schema[key], Mapping):
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _check_keys(value, schema[key], prefix=f"{path}.")


def _deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _env_overrides(environ: Mapping[str, str]) -> list[tuple[str, Any]]:
    overrides = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        overrides.append((dotted, yaml.safe_load(raw)))
    return overrides


def load_run_config(
    config_path: str | Path | None,
    set_overrides: list[str] | None = None,
    environ: Mapping[str, str] | None = None,
) -> dict:
    """Resolve defaults <- file <- environment <- --set overrides."""
    user: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        user = loaded
    _check_keys(user, DEFAULT_CONFIG)
    cfg = _deep_merge(DEFAULT_CONFIG, user)

    environ = os.environ if environ is None else environ
    for dotted, value in _env_overrides(environ):
        _set_dotted(cfg, dotted, value)

    for item in set_overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _set_dotted(cfg, dotted.strip(), yaml.safe_load(raw))
    return cfg


def config_snapshot(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True, default_flow_style=False)


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(config_snapshot(cfg).encode()).hexdigest()[:8]


def encoder_config_from(cfg: Mapping) -> EncoderConfig:
    return EncoderConfig(**cfg["encoder"])


def loss_weights_from(cfg: Mapping) -> LossWeights:
    try:
        return LossWeights(**cfg["loss"]["weights"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid loss weights: {exc}") from exc


def train_config_from(cfg: Mapping) -> TrainConfig:
    train = cfg["train"]
    return TrainConfig(
        level=train["level"],
        mode=train["mode"],
        epochs=train["epochs"],
        learning_rate=train["learning_rate"],
        weight_decay=train["weight_decay"],
        batch_size=train["batch_size"],
        seed=cfg["seed"],
        head_hidden=train["head_hidden"],
        decision_threshold=train["decision_threshold"],
        loss_weights=loss_weights_from(cfg),
        relation_loss_reduction=cfg["loss"]["relation_loss_reduction"],
        epsilon=cfg["loss"]["epsilon"],
        ablate_relations=tuple(train["ablate_relations"]),
        shuffle=train["shuffle"],
        early_stop_train_f1=train["early_stop_train_f1"],
        track_train_f1=train["track_train_f1"],
    )


def teacher_train_config_from(cfg: Mapping) -> TeacherTrainConfig:
    teacher = cfg["teacher_train"]
    return TeacherTrainConfig(
        encoder=encoder_config_from(cfg),
        epochs=teacher["epochs"],
        learning_rate=teacher["learning_rate"],
        weight_decay=teacher["weight_decay"],
        seed=cfg["seed"],
        dev_fraction=teacher["dev_fraction"],
        head_hidden=teacher["head_hidden"],
        early_stop_dev_f1=teacher["early_stop_dev_f1"],
    )


def require_path(cfg: Mapping, key: str) -> Path:
    value = cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"config paths.{key} is required for this command")
    return Path(value)


def optional_path(cfg: Mapping, key: str) -> Path | None:
    value = cfg["paths"].get(key)
    return Path(value) if value else None
