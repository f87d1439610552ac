"""Checkpoints: one torch parameter blob plus a JSON manifest per training run."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch

from . import nets


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def config_hash(cfg) -> str:
    d = asdict(cfg) if is_dataclass(cfg) else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(out_dir, models: dict, config=None, iteration=0, **extra):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({name: m.state_dict() for name, m in models.items()}, out / "weights.pt")
    manifest = {
        "architectures": {name: m.arch for name, m in models.items()},
        "architecture_hash": {name: nets.arch_hash(m) for name, m in models.items()},
        "iteration": int(iteration),
        "config": asdict(config) if is_dataclass(config) else config,
        "config_hash": config_hash(config) if config is not None else None,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return out


def load_checkpoint(path):
    """Rebuild every network in a checkpoint directory; returns (models, manifest)."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
    models = {}
    for name, arch in manifest["architectures"].items():
        m = nets.build(arch)
        m.load_state_dict(state[name])
        m.eval()
        models[name] = m
    return models, manifest
