"""CLI configuration documents: published schemas and validation.

A run configuration is a single JSON object (the same object syntax as the
dataset records). Each subcommand validates against its schema below;
violations raise SchemaError naming the offending field. The resolved
configuration, after seed overrides and defaults, is written next to every
run's outputs as `config.resolved.json`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError, ParseError, SchemaError


@dataclass
class Field:
    types: tuple
    required: bool = False
    default: Any = None


def _f(types, required=False, default=None) -> Field:
    return Field(types if isinstance(types, tuple) else (types,), required, default)


_NUM = (int, float)

_JOINT_MAP_SCHEMA = {
    "right_shoulder": _f(int, required=True),
    "left_shoulder": _f(int, required=True),
    "spine_base": _f(int, required=True),
    "spine": _f(int, required=True),
}

SCHEMAS: dict[str, dict[str, Field]] = {
    "synth": {
        "classes": _f(int, required=True),
        "samples_per_class": _f(int, required=True),
        "T": _f(int, required=True),
        "J": _f(int, required=True),
        "noise_sigma": _f(_NUM, default=0.02),
        "include_reversal_pair": _f(bool, default=True),
        "seed": _f(int, default=0),
        "test_samples_per_class": _f(int),
    },
    "preprocess": {
        "input": _f(str, required=True),
        "max_frames": _f(int, required=True),
        "joint_map": _f(dict),
        "per_frame": _f(bool, default=False),
        "output_name": _f(str, default="processed.jsonl"),
        "seed": _f(int, default=0),
    },
    "train": {
        "mode": _f(str, required=True),
        "train_data": _f(str, required=True),
        "epochs": _f(int, default=10),
        "lr": _f(_NUM, default=0.05),
        "lr_milestones": _f(list),
        "batch_size": _f(int, default=16),
        "seed": _f(int, default=0),
        "momentum": _f(_NUM, default=0.9),
        "weight_decay": _f(_NUM, default=1e-4),
        "hidden_size": _f(int, default=64),
        "embed_dim": _f(int, default=64),
        "mlp_hidden": _f(int),
        "depth": _f(int, default=2),
        "dropout": _f(_NUM, default=0.2),
        "tau": _f(_NUM, default=0.1),
        "m_enc": _f(_NUM, default=0.999),
        "m_mlp": _f(_NUM, default=1.0),
        "K": _f(int, default=64),
        "normalize_embeddings": _f(bool, default=True),
        "lambda_d": _f(_NUM, default=1.0),
        "recon_direction": _f(str, default="both"),
        "teacher_checkpoint": _f(str),
        "resume": _f(str),
        "log_walltime": _f(bool, default=False),
    },
    "eval-linear": {
        "checkpoint": _f(str, required=True),
        "train_data": _f(str, required=True),
        "test_data": _f(str, required=True),
        "lr": _f(_NUM, default=0.1),
        "epochs": _f(int, default=100),
        "momentum": _f(_NUM, default=0.9),
        "weight_decay": _f(_NUM, default=0.0),
        "batch_size": _f(int, default=64),
        "seed": _f(int, default=0),
    },
    "eval-knn": {
        "checkpoint": _f(str, required=True),
        "train_data": _f(str, required=True),
        "test_data": _f(str, required=True),
        "k": _f(int, default=1),
        "seed": _f(int, default=0),
    },
    "report": {
        "inputs": _f(list, required=True),
        "seed": _f(int, default=0),
    },
}


def _validate(obj: dict, schema: dict[str, Field], context: str) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{context}: configuration must be a JSON object")
    out = {}
    for key, value in obj.items():
        if key not in schema:
            raise SchemaError(f"{context}: unknown field {key!r}")
        spec = schema[key]
        if value is None and not spec.required:
            continue
        if bool in spec.types and isinstance(value, bool):
            pass
        elif isinstance(value, bool) and bool not in spec.types:
            raise SchemaError(f"{context}: field {key!r} must be {spec.types}, got a boolean")
        elif not isinstance(value, spec.types):
            names = "/".join(t.__name__ for t in spec.types)
            raise SchemaError(f"{context}: field {key!r} must be {names}")
        out[key] = value
    for key, spec in schema.items():
        if spec.required and key not in out:
            raise SchemaError(f"{context}: missing required field {key!r}")
        if key not in out and spec.default is not None:
            out[key] = spec.default
    return out


def load_config(path: str | Path, command: str, seed_override: int | None = None) -> dict:
    """Read, validate and resolve a run configuration document."""
    if command not in SCHEMAS:
        raise ConfigError(f"no schema for command {command!r}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    cfg = _validate(obj, SCHEMAS[command], command)
    if "joint_map" in cfg and cfg["joint_map"] is not None:
        cfg["joint_map"] = _validate(cfg["joint_map"], _JOINT_MAP_SCHEMA, "joint_map")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def write_resolved(cfg: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")
