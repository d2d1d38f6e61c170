"""Weight checkpoints: a torch state_dict blob plus a JSON sidecar.

The sidecar records arch, scale, config hash, training seed, epoch, the
metric snapshot and a digest of the weights.  Loading refuses a checkpoint
whose config hash differs from the expected model config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from ..nets.config import config_hash


class CheckpointMismatchError(ValueError):
    pass


def weights_digest(state_dict: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    weights: dict
    config_hash: str
    epoch: int
    metrics: dict = field(default_factory=dict)
    rng_digest: str = ""
    seed: int = 0
    arch: str = ""
    scale: str = ""
    config: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return weights_digest(self.weights)

    def sidecar(self) -> dict:
        return {
            "arch": self.arch,
            "scale": self.scale,
            "config_hash": self.config_hash,
            "config": self.config,
            "training_seed": self.seed,
            "epoch": self.epoch,
            "metrics": self.metrics,
            "rng_digest": self.rng_digest,
            "weights_digest": self.digest,
        }


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({k: v.detach().cpu().clone() for k, v in ckpt.weights.items()}, path)
    sidecar_path(path).write_text(json.dumps(ckpt.sidecar(), indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expected_config=None) -> Checkpoint:
    path = Path(path).with_suffix(".pt")
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    meta = json.loads(sidecar_path(path).read_text())
    if expected_config is not None:
        want = config_hash(expected_config)
        if meta["config_hash"] != want:
            raise CheckpointMismatchError(
                f"{path}: config hash {meta['config_hash'][:12]} != expected {want[:12]}"
            )
    weights = torch.load(path, map_location="cpu", weights_only=True)
    ckpt = Checkpoint(
        weights=weights,
        config_hash=meta["config_hash"],
        epoch=meta["epoch"],
        metrics=meta.get("metrics", {}),
        rng_digest=meta.get("rng_digest", ""),
        seed=meta.get("training_seed", 0),
        arch=meta.get("arch", ""),
        scale=meta.get("scale", ""),
        config=meta.get("config", {}),
    )
    if ckpt.digest != meta["weights_digest"]:
        raise CheckpointMismatchError(f"{path}: weights digest does not match sidecar")
    return ckpt
