"""Run configuration: defaults, JSON files, command-line overrides and run manifests."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .diffusion.train import TrainConfig
from .errors import UsageError
from .guidance import GuidanceConfig

MANIFEST_NAME = "run_manifest.json"

DEFAULT_CONDITIONS = [
    {"name": "baseline", "guidance": None, "boxes": False},
    {"name": "semantic", "guidance": {}, "boxes": False},
    {"name": "layout", "guidance": {}, "boxes": True},
]

DEFAULTS = {
    "train": {
        "dataset": None,  # directory written by scenes.export_dataset
        "synthetic": None,  # or {"n": ..., "seed": ...} to generate in memory
        "model_seed": 0,
        "out": "runs/train",
        **{k: v for k, v in asdict(TrainConfig()).items() if k != "checkpoint_every"},
    },
    "sample": {
        "checkpoint": "checkpoints/toy",
        "prompt": "red circle and blue square",
        "subjects": None,  # default: every shape word
        "boxes": [],  # [[token, [x0, y0, x1, y1]], ...]
        "guidance": {},  # GuidanceConfig field overrides
        "no_guidance": False,
        "seed": 0,
        "eta": 0.0,
        "map_every": 5,
        "out": "runs/sample",
    },
    "eval": {
        "checkpoint": "checkpoints/toy",
        "conditions": DEFAULT_CONDITIONS,
        "seeds": 50,  # count (0..n-1) or explicit list
        "master_seed": 0,
        "n_perm": 10_000,
        "workers": None,
        "out": "runs/eval",
    },
}

GUIDANCE_FIELDS = set(asdict(GuidanceConfig()))


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where}.{k}; known: {', '.join(sorted(base))}")
        out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def seed_list(self) -> list[int]:
        seeds = self.values["seeds"]
        return list(range(int(seeds))) if isinstance(seeds, int) else [int(s) for s in seeds]

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.values}


def load_config(command: str, path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file <- overrides.

    The file may hold one section, a dict of sections keyed by command, or a
    run manifest written by an earlier run.
    """
    if command not in DEFAULTS:
        raise UsageError(f"unknown command {command!r}")
    values = copy.deepcopy(DEFAULTS[command])
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        if "command" in raw and "config" in raw:
            if raw["command"] != command:
                raise UsageError(f"manifest {path} is for {raw['command']!r}, not {command!r}")
            raw = raw["config"]
        elif command in raw and isinstance(raw[command], dict):
            raw = raw[command]
        values = _merge(values, raw, command)
    if overrides:
        values = _merge(values, {k: v for k, v in overrides.items() if v is not None}, command)
    if command == "sample":
        bad = set(values["guidance"] or {}) - GUIDANCE_FIELDS
        if bad:
            raise UsageError(f"unknown guidance fields {sorted(bad)}")
    return RunConfig(command, values)


def source_hash() -> str:
    """Digest of the package sources, recorded so manifests pin the exact code."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out_dir, cfg: RunConfig, seeds: dict, outputs: list[str]) -> Path:
    """Resolved config, code version, seeds and the list of files written."""
    manifest = cfg.to_dict() | {
        "code_version": __version__,
        "source_hash": source_hash(),
        "seeds": seeds,
        "outputs": sorted(outputs),
    }
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
