"""Flat ``key = value`` run configuration files.

Keys mirror `RunConfig` and `ModelConfig` field names; ``#`` starts a comment.
Example::

    epochs = 100
    batch_size = 16
    lr0 = 1e-3
    variant = full
    num_classes = 7
    input_size = 256
    width_multiplier = 1.0
    data_root = data/s2ds
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .losses import LossWeights
from .network import ModelConfig
from .train import RunConfig

_SECTION = "run"
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"model", "loss"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_LOSS_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_ALIASES = {"lr": "lr0", "classes": "num_classes", "width_mult": "width_multiplier", "data": "data_root", "out": "out_dir"}


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    if key == "input_size":
        parts = [int(p) for p in raw.replace("x", ",").split(",") if p.strip()]
        return (parts[0], parts[0]) if len(parts) == 1 else tuple(parts)
    if key == "class_weights":
        return raw if raw == "auto" else [float(v) for v in raw.split(",")]
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.split(","))
    if default is None and raw.lower() in ("", "none"):
        return None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string(f"[{_SECTION}]\n{text}")
    return dict(parser[_SECTION])


def build_run_config(values: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply string or typed overrides onto ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    run = {f: getattr(base, f) for f in _RUN_KEYS}
    model = dataclasses.asdict(base.model)
    loss = dataclasses.asdict(base.loss)
    for key, value in values.items():
        key = _ALIASES.get(key, key)
        if key in _RUN_KEYS:
            target = run
        elif key in _MODEL_KEYS:
            target = model
        elif key in _LOSS_KEYS:
            target = loss
        else:
            raise KeyError(f"unknown config key {key!r}")
        target[key] = _coerce(key, value, target[key]) if isinstance(value, str) else value
    return RunConfig(**run, model=ModelConfig(**model), loss=LossWeights(**loss))


def load_run_config(path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text())
    cfg = build_run_config(values)
    return build_run_config(overrides or {}, cfg)
