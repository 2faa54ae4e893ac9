"""Experiment configuration: a single strict JSON document.

Unknown keys are rejected, defaults are materialized into the resolved
config, and every stage persists the resolved document beside its outputs so
runs are reproducible from the artifact alone.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigValidationError

DEFAULTS = {
    "paths": {
        "raster": None,
        "ground_truth": None,
        "vectors": {"buildings": None, "roads": None, "water": None},
        "output_dir": None,
    },
    "maskgen": {
        "buffer_px": 3,
        "ndvi_threshold": -0.1,
        "class_priority": ["Buildings", "Water", "Roads", "Trees"],
    },
    "chipper": {"chip_size": 256, "stride": 256, "min_class_density": 0.05},
    "train": {
        "regime": "cps",
        "epochs": 50,
        "rampup_length": 10,
        "lambda_max": 0.1,
        "batch_size": 4,
        "learning_rate": 0.01,
        "optimizer": "sgd_momentum",
        "momentum": 0.9,
        "width_multiplier": 1.0,
        "seed_pair": [1, 2],
        "data_seed": 0,
        "class_weight_cap": 50.0,
        "tversky_a": 0.3,
        "tversky_b": 0.7,
        "ramp_over_total": False,
        "hausdorff": {"erosions": 10, "exponent": 2.0},
    },
    "eval": {"thresholds": [0.4, 0.5]},
    "synth": {
        "seed": 0,
        "size": [512, 512],
        "n_buildings": 12,
        "n_roads": 4,
        "n_water": 2,
        "sparsity": 0.0,
        "noise_sigma": 0.0,
    },
}

_PRIORITY_NAMES = ["Buildings", "Roads", "Trees", "Water"]

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["paths"],
    "properties": {
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "required": ["output_dir"],
            "properties": {
                "raster": {"type": ["string", "null"]},
                "ground_truth": {"type": ["string", "null"]},
                "output_dir": {"type": "string"},
                "vectors": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "buildings": {"type": ["string", "null"]},
                        "roads": {"type": ["string", "null"]},
                        "water": {"type": ["string", "null"]},
                    },
                },
            },
        },
        "maskgen": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "buffer_px": {"type": "integer", "minimum": 0},
                "ndvi_threshold": {"type": "number", "minimum": -1, "maximum": 1},
                "class_priority": {
                    "type": "array",
                    "items": {"enum": _PRIORITY_NAMES},
                    "minItems": 4,
                    "maxItems": 4,
                    "uniqueItems": True,
                },
            },
        },
        "chipper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "chip_size": {"type": "integer", "minimum": 16},
                "stride": {"type": "integer", "minimum": 1},
                "min_class_density": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "regime": {"enum": ["cps", "unet_wce", "deeplab_tversky"]},
                "epochs": {"type": "integer", "minimum": 1},
                "rampup_length": {"type": "integer", "minimum": 0},
                "lambda_max": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "optimizer": {"enum": ["sgd_momentum", "adam"]},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "width_multiplier": {"type": "number", "exclusiveMinimum": 0},
                "seed_pair": {
                    "type": "array",
                    "items": {"type": "integer"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "data_seed": {"type": "integer", "minimum": 0},
                "class_weight_cap": {"type": "number", "exclusiveMinimum": 1},
                "tversky_a": {"type": "number", "exclusiveMinimum": 0},
                "tversky_b": {"type": "number", "exclusiveMinimum": 0},
                "ramp_over_total": {"type": "boolean"},
                "hausdorff": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "erosions": {"type": "integer", "minimum": 1},
                        "exponent": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "thresholds": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "minItems": 1,
                },
            },
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "size": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 256},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "n_buildings": {"type": "integer", "minimum": 0},
                "n_roads": {"type": "integer", "minimum": 0},
                "n_water": {"type": "integer", "minimum": 0},
                "sparsity": {"type": "number", "minimum": 0, "maximum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
            },
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(config: dict) -> None:
    try:
        jsonschema.validate(config, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigValidationError(f"{where}: {exc.message}") from None
    if config["train"]["rampup_length"] > config["train"]["epochs"]:
        raise ConfigValidationError("train/rampup_length must not exceed train/epochs")
    if config["chipper"]["stride"] > config["chipper"]["chip_size"]:
        raise ConfigValidationError("chipper/stride must not exceed chipper/chip_size")


def apply_override(config: dict, dotted: str, raw_value: str) -> None:
    """Set a dotted config path (e.g. train.epochs=3); values parse as JSON
    with a fallback to plain strings."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigValidationError(f"unknown config section {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigValidationError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(user_config: dict, overrides: list[str] = ()) -> dict:
    """Merge defaults, apply dotted overrides, fill derived paths, validate."""
    if not isinstance(user_config, dict):
        raise ConfigValidationError("config document must be a JSON object")
    config = _deep_merge(DEFAULTS, user_config)
    for item in overrides:
        if "=" not in item:
            raise ConfigValidationError(f"override {item!r} must look like key.path=value")
        dotted, _, raw = item.partition("=")
        apply_override(config, dotted, raw)
    validate_config(config)

    out_dir = config["paths"]["output_dir"]
    scene = str(Path(out_dir) / "scene")
    paths = config["paths"]
    if paths["raster"] is None:
        paths["raster"] = f"{scene}/raster.tif"
    if paths["ground_truth"] is None:
        paths["ground_truth"] = f"{scene}/dense_mask.tif"
    for tag in ("buildings", "roads", "water"):
        if paths["vectors"][tag] is None:
            paths["vectors"][tag] = f"{scene}/{tag}.geojson"
    return config


def load_config(path, overrides: list[str] = ()) -> dict:
    try:
        with open(path) as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"config is not valid JSON: {exc}") from None
    return resolve_config(document, overrides)
