"""Checkpoint directories: one tensor file per parameter plus a JSON manifest."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..autodiff.serialize import load_array, save_array
from ..errors import ParameterError
from .model import DenoiserModel, ModelConfig
from .schedule import NoiseSchedule, build_schedule
from .vocab import WORDS

MANIFEST = "manifest.json"


def save_checkpoint(path, model: DenoiserModel, sched: NoiseSchedule, training: dict | None = None,
                    seeds: dict | None = None, loss_curve=None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    for name, p in sorted(model.params.items()):
        save_array(path / "params" / name, p.data)
    if loss_curve is not None:
        save_array(path / "loss_curve", np.asarray(loss_curve, dtype=np.float64))
    manifest = {
        "architecture_hash": model.architecture_hash(),
        "model_config": asdict(model.config),
        "dtype": model.dtype.name,
        "vocab": list(WORDS),
        "schedule": sched.to_dict(),
        "training": training or {},
        "seeds": seeds or {},
        "params": sorted(model.params),
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    model = DenoiserModel(ModelConfig(**manifest["model_config"]), seed=0, dtype=manifest["dtype"])
    model.load_state_dict({name: load_array(path / "params" / name) for name in manifest["params"]})
    if model.architecture_hash() != manifest["architecture_hash"]:
        raise ParameterError(f"{path}: architecture hash mismatch")
    model.requires_grad_(False)
    s = manifest["schedule"]
    sched = build_schedule(s["T_train"], s["beta_start"], s["beta_end"])
    return model, sched, manifest


def load_loss_curve(path) -> np.ndarray:
    return load_array(Path(path) / "loss_curve")
