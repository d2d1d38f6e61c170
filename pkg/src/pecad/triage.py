"""Deployed decision pipeline.

Every slice is scored by the classifier ensemble, positive calls must
survive the false-positive-reduction network, a patient is PE as soon as
one slice is, and only flagged slices are segmented and rendered.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .dataset import CtVolume, Label
from .nets import build_classifier, build_segmenter
from .nets.config import config_hash
from .preprocess import PreprocConfig, preprocess_slice
from .training.checkpoint import load_checkpoint

ALERT_RGB = (255, 0, 0)


@dataclass
class ImagePrediction:
    patient_id: str
    slice_index: int
    ensemble_prob: float
    fp_net_prob: Optional[float]
    final_label: Label


@dataclass
class PatientVerdict:
    patient_id: str
    verdict: Label
    n_pe_images: int
    flagged_slices: list[int]


@dataclass
class TriageConfig:
    threshold: float = 0.5
    mask_threshold: float = 0.5
    preprocess: PreprocConfig = field(default_factory=lambda: PreprocConfig(crop_size=64))
    batch_size: int = 32


@dataclass
class TriageModels:
    """Loaded, read-only models for one triage run."""

    members: list  # ensemble classifiers
    fp_net: Optional[torch.nn.Module] = None
    segmenter: Optional[torch.nn.Module] = None
    digests: dict = field(default_factory=dict)


@dataclass
class TriageReport:
    patient_id: str
    verdict: Label
    threshold: float
    predictions: list[ImagePrediction]
    flagged: list[int]
    overlay_paths: list[str]
    model_digests: dict
    config_hash: str = ""
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "patient_id": self.patient_id,
            "verdict": self.verdict.value,
            "threshold": self.threshold,
            "per_image": [
                {
                    "slice": p.slice_index,
                    "ensemble_prob": p.ensemble_prob,
                    "fp_prob": p.fp_net_prob,
                    "label": p.final_label.value,
                }
                for p in self.predictions
            ],
            "flagged": self.flagged,
            "overlay_paths": self.overlay_paths,
            "model_digests": self.model_digests,
            "config_hash": self.config_hash,
        }
        if include_timing:
            d["timing"] = self.timing
        return d


def _check_threshold(threshold: float) -> float:
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return threshold


@torch.no_grad()
def _probs(model, images: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = [model(images[i : i + batch_size].to(dtype)) for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()


def ensemble_predict(models: Sequence, image, batch_size: int = 32):
    """Unweighted mean of member PE probabilities.

    ``image`` is one (C, H, W) image, returning a float, or a batch
    (N, C, H, W), returning an array of N probabilities.
    """
    if not models:
        raise ValueError("ensemble needs at least one model")
    x = torch.as_tensor(np.asarray(image))
    single = x.dim() == 3
    if single:
        x = x[None]
    probs = np.mean([_probs(m, x, batch_size) for m in models], axis=0)
    return float(probs[0]) if single else probs


def cascade_label(ensemble_prob: float, fp_net_prob: Optional[float], threshold: float = 0.5) -> Label:
    """PE iff the ensemble calls PE and the FP-reduction net (if any) agrees."""
    _check_threshold(threshold)
    for p in (ensemble_prob, fp_net_prob):
        if p is not None and not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    if ensemble_prob < threshold:
        return Label.NON_PE
    if fp_net_prob is not None and fp_net_prob < threshold:
        return Label.NON_PE
    return Label.PE


def patient_verdict(image_labels: Sequence, patient_id: str = "") -> PatientVerdict:
    """PE iff any image is PE; flagged slices are the positions of PE images."""
    if len(image_labels) == 0:
        raise ValueError("empty study")
    flagged = [i for i, lab in enumerate(image_labels) if Label(lab) is Label.PE]
    return PatientVerdict(
        patient_id=patient_id,
        verdict=Label.PE if flagged else Label.NON_PE,
        n_pe_images=len(flagged),
        flagged_slices=flagged,
    )


def segment_flagged(images, segmenter, flagged_slices: Sequence[int], mask_threshold: float = 0.5) -> dict:
    """Binary lesion masks for the flagged slices, keyed by slice index.

    ``images`` is indexable by slice index and yields preprocessed 2D images.
    """
    _check_threshold(mask_threshold)
    if not flagged_slices:
        return {}
    x = torch.as_tensor(np.stack([np.asarray(images[i]) for i in flagged_slices])[:, None])
    probs = _probs(segmenter, x)
    return {i: (probs[k, 0] >= mask_threshold).astype(np.uint8) for k, i in enumerate(flagged_slices)}


def render_overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale render of a [-1, 1] image with mask pixels tinted at 50% alpha."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    gray = np.rint((np.clip(image, -1, 1) + 1) * 127.5)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    tint = np.asarray(ALERT_RGB, dtype=np.float64)
    rgb[mask] = np.rint(0.5 * rgb[mask] + 0.5 * tint)
    return rgb.astype(np.uint8)


def write_png(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)
    return path


def score_study(study: CtVolume, models: TriageModels, config: TriageConfig):
    """Preprocessed images and per-slice predictions, in slice order."""
    images = np.stack([preprocess_slice(s, config.preprocess) for s in study.voxels])
    x = torch.as_tensor(images[:, None])
    ens = ensemble_predict(models.members, x, config.batch_size)
    fp = _probs(models.fp_net, x, config.batch_size) if models.fp_net is not None else None
    preds = []
    for i in range(study.n_slices):
        e = float(ens[i])
        f = float(fp[i]) if fp is not None else None
        preds.append(ImagePrediction(study.patient_id, i, e, f, cascade_label(e, f, config.threshold)))
    return images, preds


def run_triage(study: CtVolume, models: TriageModels, config: TriageConfig, out_dir=None,
               config_digest: str = "") -> TriageReport:
    """Score, decide, segment and render one study; writes report + overlays if ``out_dir``."""
    t0 = time.perf_counter()
    study.validate()
    images, preds = score_study(study, models, config)
    t_score = time.perf_counter()
    verdict = patient_verdict([p.final_label for p in preds], study.patient_id)

    overlay_paths: list[str] = []
    if verdict.flagged_slices:
        if models.segmenter is None:
            masks = {i: np.zeros(images.shape[1:], np.uint8) for i in verdict.flagged_slices}
        else:
            masks = segment_flagged(images, models.segmenter, verdict.flagged_slices, config.mask_threshold)
        for i in verdict.flagged_slices:
            name = f"{study.patient_id}_{i}.png"
            if out_dir is not None:
                write_png(render_overlay(images[i], masks[i]), Path(out_dir) / name)
            overlay_paths.append(name)
    t_end = time.perf_counter()

    report = TriageReport(
        patient_id=study.patient_id,
        verdict=verdict.verdict,
        threshold=config.threshold,
        predictions=preds,
        flagged=verdict.flagged_slices,
        overlay_paths=overlay_paths,
        model_digests=dict(models.digests),
        config_hash=config_digest,
        timing={"score_s": t_score - t0, "total_s": t_end - t0},
    )
    if out_dir is not None:
        path = Path(out_dir) / f"{study.patient_id}_report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def load_model(path, config, kind: str = "classifier") -> tuple[torch.nn.Module, str]:
    """Build a model from ``config`` and load verified weights; returns (model, digest)."""
    ckpt = load_checkpoint(path, expected_config=config)
    model = build_segmenter(config) if kind == "segmenter" else build_classifier(config)
    model.load_state_dict(ckpt.weights)
    model.eval()
    return model, ckpt.digest


def model_hash(config) -> str:
    return config_hash(config)
