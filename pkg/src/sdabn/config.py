"""Experiment configuration: YAML file, strict JSON-schema validation, defaults.

Unknown keys anywhere are errors. Omitted keys take the values in
``DEFAULTS``. A config is fully described by :meth:`ExperimentConfig.to_dict`,
which is what gets snapshotted next to run outputs.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigurationError
from .noise import NoiseSpec
from .training import StageSchedule

OUTPUT_ROOT_ENV = "SDABN_OUTPUT_ROOT"
EXPERIMENT_VARIANTS = ("conditioned", "plain", "img-condition", "gt-condition", "joint")

_SEG_STAGE = {"epochs": 40, "batch_size": 8, "lr": 0.05, "momentum": 0.9, "patience": 8, "min_delta": 1e-4,
              "patch_size": None, "lr_decay_every": 0, "lr_decay_factor": 0.5}
_DEN_STAGE = dict(_SEG_STAGE, epochs=60, lr=1e-3)

DEFAULTS = {
    "name": "sdabn",
    "seed": 0,
    "precision": "float64",
    "output_dir": "runs/sdabn",
    "dataset": {"root": "data/synthetic", "size": 64, "count": 320, "classes": 4, "seed": 0,
                "train_fraction": 0.8, "validation_fraction": 0.125},
    "noise": {"kind": "gaussian", "sigma": 50, "seed": 1234},
    "model": {"blocks": 3, "variant": "conditioned", "tail_segmentation": False, "seg_widths": [16, 32, 64],
              "den_width": 32, "sft_width": 32, "dilations": [1, 2, 4, 4, 2, 1], "residual": True},
    "training": {"bootstrap": dict(_SEG_STAGE), "segmentation": dict(_SEG_STAGE), "denoising": dict(_DEN_STAGE),
                 "joint": dict(_DEN_STAGE)},
    "eval": {"batch_size": 8},
}

_pos_int = {"type": "integer", "minimum": 1}
_stage_schema = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": _pos_int,
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "patience": _pos_int,
        "min_delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "patch_size": {"type": ["integer", "null"], "minimum": 4, "multipleOf": 4},
        "lr_decay_every": {"type": "integer", "minimum": 0},
        "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9._-]+$"},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["float32", "float64"]},
        "output_dir": {"type": "string", "minLength": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string", "minLength": 1},
                "size": {"type": "integer", "minimum": 12, "multipleOf": 4},
                "count": {"type": "integer", "minimum": 2},
                "classes": {"type": "integer", "minimum": 2, "maximum": 6},
                "seed": {"type": "integer", "minimum": 0},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gaussian", "poisson"]},
                "sigma": {"type": "number", "exclusiveMinimum": 0, "maximum": 255},
                "peak": {"type": "number", "exclusiveMinimum": 0, "maximum": 255},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "blocks": _pos_int,
                "variant": {"enum": list(EXPERIMENT_VARIANTS)},
                "tail_segmentation": {"type": "boolean"},
                "seg_widths": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "den_width": _pos_int,
                "sft_width": _pos_int,
                "dilations": {"type": "array", "items": _pos_int, "minItems": 1},
                "residual": {"type": "boolean"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _stage_schema for k in ("bootstrap", "segmentation", "denoising", "joint")},
        },
        "eval": {"type": "object", "additionalProperties": False, "properties": {"batch_size": _pos_int}},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            # noise sections replace wholesale so sigma/peak never mix
            out[k] = dict(v) if k == "noise" else _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"config field {where}: {e.message}")


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "ExperimentConfig":
        overrides = overrides or {}
        validate(overrides)
        merged = _merge(DEFAULTS, overrides)
        validate(merged)
        cfg = cls(merged)
        cfg.noise  # validates sigma/peak pairing
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.raw, sort_keys=True), encoding="utf-8")
        return path

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.raw, overrides))

    # ---- accessors

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def dtype(self):
        return np.float32 if self.raw["precision"] == "float32" else np.float64

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec.from_dict(self.raw["noise"])

    @property
    def variant(self) -> str:
        return self.raw["model"]["variant"]

    @property
    def blocks(self) -> int:
        return int(self.raw["model"]["blocks"])

    def schedule(self, kind: str) -> StageSchedule:
        return StageSchedule(**self.raw["training"][kind])

    @property
    def eval_batch_size(self) -> int:
        return int(self.raw["eval"]["batch_size"])

    @property
    def output_dir(self) -> Path:
        return resolve_output(self.raw["output_dir"])

    @property
    def dataset_root(self) -> Path:
        return resolve_output(self.raw["dataset"]["root"])


def resolve_output(path: str | Path) -> Path:
    """Relative paths land under ``$SDABN_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p
