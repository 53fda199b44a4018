"""Single-file checkpoints: named arrays plus a JSON header (npz container)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .network import DeltaSeg, ModelConfig, build_model

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: DeltaSeg, meta: Optional[dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(), "meta": meta or {}}
    arrays = {name: np.asarray(arr) for name, arr in model.state_dict().items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with np.load(path, allow_pickle=False) as npz:
        if HEADER_KEY not in npz.files:
            raise CheckpointError(f"{path}: missing header entry")
        return json.loads(npz[HEADER_KEY].tobytes().decode("utf-8"))


def load_checkpoint(path) -> tuple[DeltaSeg, dict]:
    """Rebuild the model from the header config and load every named array.

    Missing or unexpected entries, or shape mismatches, raise `CheckpointError`
    listing the offending names.
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as npz:
        if HEADER_KEY not in npz.files:
            raise CheckpointError(f"{path}: missing header entry")
        header = json.loads(npz[HEADER_KEY].tobytes().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        model = build_model(ModelConfig.from_dict(header["config"]))
        expected = {name: np.shape(arr) for name, arr in model.state_dict().items()}
        stored = {name: npz[name] for name in npz.files if name != HEADER_KEY}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    problems = []
    if missing:
        problems.append("missing: " + ", ".join(missing))
    if extra:
        problems.append("unexpected: " + ", ".join(extra))
    bad_shape = [f"{n} {stored[n].shape} != {expected[n]}" for n in expected if n in stored and stored[n].shape != expected[n]]
    if bad_shape:
        problems.append("shape mismatch: " + ", ".join(bad_shape))
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    model.load_state_dict(stored)
    model.eval()
    return model, header
