"""Versioned JSON run configuration."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .distillation import TrainingConfig
from .errors import ConfigError
from .model import ModelConfig, parse_config_name

SCHEMA_VERSION = 1
OUT_ENV = "ECHODFKD_OUT"

DEFAULT_EVALUATION = {"policy": "FULL", "scorer": "mock", "dilation_px": 5, "prepad_frames": 8}


@dataclass
class RunConfig:
    data_dir: str | None = None
    cache_dir: str | None = None
    out_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: dict = field(default_factory=lambda: dict(DEFAULT_EVALUATION))

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "paths": {"data_dir": self.data_dir, "cache_dir": self.cache_dir, "out_dir": self.out_dir},
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "evaluation": dict(self.evaluation),
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}; expected {SCHEMA_VERSION}")
        paths = d.get("paths", {})
        try:
            model_d = dict(d.get("model", {}))
            name = model_d.pop("name", None)
            model = parse_config_name(name, **model_d) if name else ModelConfig(**model_d)
            training = TrainingConfig(**d.get("training", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        evaluation = {**DEFAULT_EVALUATION, **d.get("evaluation", {})}
        unknown = set(evaluation) - set(DEFAULT_EVALUATION)
        if unknown:
            raise ConfigError(f"unknown evaluation keys {sorted(unknown)}")
        return cls(paths.get("data_dir"), paths.get("cache_dir"), paths.get("out_dir"), model, training, evaluation)

    def resolved_out_dir(self, override=None):
        return Path(override or os.environ.get(OUT_ENV) or self.out_dir or "out")


def load_run_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(d)


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
