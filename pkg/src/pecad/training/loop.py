"""Deterministic mini-batch training with best-validation checkpointing."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..dataset import SliceRecord
from ..nets.config import config_hash
from ..preprocess import augment_flip
from .checkpoint import Checkpoint
from .losses import bce, dice_loss, focal_bce, seg_loss
from .optim import Ranger

log = logging.getLogger(__name__)


class LossKind(str, Enum):
    FOCAL_BCE = "FOCAL_BCE"
    BCE_PLUS_DICE = "BCE_PLUS_DICE"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    max_epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    loss: LossKind = LossKind.FOCAL_BCE
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    early_stop_patience: int = 10
    cosine_decay: bool = True
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.max_epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1, early_stop_patience >= 1 required")
        if self.focal_gamma < 0 or not 0 < self.focal_alpha <= 1:
            raise ValueError("focal_gamma >= 0 and focal_alpha in (0, 1] required")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        return d


def stack_images(records: Sequence[SliceRecord], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([r.image for r in records])[:, None], dtype=dtype)


def stack_labels(records: Sequence[SliceRecord], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor([1.0 if r.is_pe else 0.0 for r in records], dtype=dtype)


def stack_masks(records: Sequence[SliceRecord], dtype=torch.float32) -> torch.Tensor:
    masks = []
    for r in records:
        if r.mask is None:
            raise ValueError(f"record {r.patient_id}:{r.slice_index} has no mask")
        masks.append(r.mask)
    return torch.as_tensor(np.stack(masks)[:, None], dtype=dtype)


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # BatchNorm cannot train on a single sample; fold a lone tail into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _rng_digest(rng: np.random.Generator) -> str:
    return hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True).encode()).hexdigest()


class _Task:
    """Tensors and loss for one of the two training tasks."""

    def __init__(self, records, segment: bool, dtype):
        self.records = list(records)
        self.segment = segment
        self.images = stack_images(self.records, dtype) if self.records else None
        if not self.records:
            self.targets = None
        elif segment:
            self.targets = stack_masks(self.records, dtype)
        else:
            self.targets = stack_labels(self.records, dtype)


def _loss(pred, target, cfg: TrainConfig):
    if cfg.loss is LossKind.FOCAL_BCE:
        return focal_bce(pred, target, cfg.focal_gamma, cfg.focal_alpha)
    return seg_loss(pred, target, cfg.dice_smooth)


@torch.no_grad()
def _evaluate(model, task: _Task, cfg: TrainConfig) -> dict:
    model.eval()
    pred = model(task.images)
    loss = float(_loss(pred, task.targets, cfg))
    out = {"loss": loss}
    if task.segment:
        from ..metrics import mean_iou

        hard = (pred >= 0.5).cpu().numpy().astype(bool)
        out["mean_iou"] = mean_iou(list(hard[:, 0]), list(task.targets.cpu().numpy()[:, 0].astype(bool)))
    else:
        out["accuracy"] = float(((pred >= 0.5).to(task.targets.dtype) == task.targets).float().mean())
    return out


def train_model(
    model: torch.nn.Module,
    train_records: Sequence[SliceRecord],
    val_records: Sequence[SliceRecord],
    config: TrainConfig,
    model_config=None,
    log_path=None,
    target_metric: Optional[tuple[str, float]] = None,
) -> Checkpoint:
    """Train ``model`` in place and return the best-validation checkpoint.

    The loop stops at ``max_epochs``, after ``early_stop_patience`` epochs
    without validation improvement, or (if ``target_metric`` = (name, value)
    is given) once the training-set metric reaches the value.  With no
    validation records, selection falls back to the training loss.
    """
    if not train_records:
        raise ValueError("empty training set")
    segment = config.loss is LossKind.BCE_PLUS_DICE
    dtype = next(model.parameters()).dtype
    train = _Task(train_records, segment, dtype)
    val = _Task(val_records, segment, dtype) if val_records else None

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Ranger(model.parameters(), lr=config.base_lr, lookahead_k=config.lookahead_k,
                 lookahead_alpha=config.lookahead_alpha)

    chash = config_hash(model_config) if model_config is not None else ""
    arch = getattr(getattr(model_config, "arch", None), "value", "SEGMENTER" if segment else "")
    scale = getattr(getattr(model_config, "scale", None), "value", "")
    cfg_dict = model_config.to_dict() if model_config is not None else {}

    def snapshot(epoch, metrics):
        return Checkpoint(
            weights=copy.deepcopy(model.state_dict()), config_hash=chash, epoch=epoch,
            metrics=metrics, rng_digest=_rng_digest(rng), seed=config.seed,
            arch=arch, scale=scale, config=cfg_dict,
        )

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("w")

    best = snapshot(0, {})
    best_score = math.inf
    stale = 0
    n = len(train.records)
    try:
        for epoch in range(1, config.max_epochs + 1):
            lr = config.base_lr
            if config.cosine_decay:
                lr = config.base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / config.max_epochs))
            for group in opt.param_groups:
                group["lr"] = lr

            model.train()
            total = 0.0
            for idx in _batches(n, config.batch_size, rng.permutation(n)):
                x = train.images[idx]
                y = train.targets[idx]
                if config.augment:
                    xs, ys = [], []
                    for xi, yi in zip(x.numpy(), y.numpy()):
                        fx, fy = augment_flip(xi, yi if segment else None, rng)
                        xs.append(fx)
                        ys.append(fy if segment else yi)
                    x = torch.as_tensor(np.stack(xs), dtype=dtype)
                    y = torch.as_tensor(np.stack(ys), dtype=dtype)
                opt.zero_grad()
                loss = _loss(model(x), y, config)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)

            train_eval = _evaluate(model, train, config)
            val_eval = _evaluate(model, val, config) if val is not None else train_eval
            metrics = {"train_loss": total / n, **{f"train_{k}": v for k, v in train_eval.items()},
                       **{f"val_{k}": v for k, v in val_eval.items()}}
            if log_file is not None:
                log_file.write(json.dumps({"epoch": epoch, "lr": lr, **metrics}, sort_keys=True) + "\n")
                log_file.flush()
            log.info("epoch %d lr %.2e %s", epoch, lr, metrics)

            if val_eval["loss"] < best_score:
                best_score = val_eval["loss"]
                best = snapshot(epoch, metrics)
                stale = 0
            else:
                stale += 1
            if target_metric is not None:
                name, value = target_metric
                if train_eval.get(name, -math.inf) >= value:
                    best = snapshot(epoch, metrics)
                    break
            if stale >= config.early_stop_patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
    model.load_state_dict(best.weights)
    return best
