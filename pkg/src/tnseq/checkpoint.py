"""Versioned JSON checkpoints.

Parameters are stored as decimal lists in ``model_keys`` order; Python's
float repr round-trips exactly, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .errors import ArgumentError, CheckpointError
from .evaluator import Model, ModelConfig, model_keys

FORMAT_VERSION = 1


def checkpoint_dict(model: Model, provenance: dict | None = None) -> dict:
    keys = model_keys(model.config, model.vocab)
    missing = set(keys) ^ set(model.params)
    if missing:
        raise ArgumentError(f"parameter store does not match the model keys: {sorted(missing)}")
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "params": {k: [float(x) for x in model.params[k]] for k in keys},
        "provenance": provenance or {},
    }


def dumps(model: Model, provenance: dict | None = None) -> str:
    return json.dumps(checkpoint_dict(model, provenance), indent=1) + "\n"


def save_checkpoint(path: str | Path, model: Model, provenance: dict | None = None) -> None:
    Path(path).write_text(dumps(model, provenance), encoding="utf-8")


def loads(text: str) -> tuple[Model, dict]:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"not a format version {FORMAT_VERSION} checkpoint (invalid JSON: {e})") from None
    if not isinstance(d, dict) or "format_version" not in d:
        raise CheckpointError("checkpoint has no format_version field")
    if d["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {d['format_version']!r} "
                              f"(this build reads version {FORMAT_VERSION})")
    try:
        cfg = ModelConfig.from_dict(d["config"])
        vocab = Vocabulary.from_dict(d["vocab"])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        expected = model_keys(cfg, vocab)
        if list(params) != expected:
            raise CheckpointError("parameter keys are inconsistent with the stored config and vocabulary")
        model = Model(cfg, vocab, params)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    return model, d.get("provenance", {})


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    return loads(Path(path).read_text(encoding="utf-8"))
