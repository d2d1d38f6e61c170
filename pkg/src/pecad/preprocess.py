"""Image preparation: HU limiting, center crop, scaling, rebalancing, flips.

Also selects the lung-region slices that make up the negative half of the
false-positive-reduction training set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import CtVolume, Label, SliceRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocConfig:
    hu_limit: int = 600
    crop_size: int = 400
    upsample_factor: int = 5
    lung_hu_band: tuple[int, int] = (-950, -300)
    lung_area_fraction_min: float = 0.10

    def __post_init__(self):
        if self.hu_limit <= 0:
            raise ValueError("hu_limit must be positive")
        if self.crop_size <= 0:
            raise ValueError("crop_size must be positive")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        if not 0.0 <= self.lung_area_fraction_min <= 1.0:
            raise ValueError("lung_area_fraction_min must lie in [0, 1]")
        lo, hi = self.lung_hu_band
        if lo > hi:
            raise ValueError("lung_hu_band must be (low, high) with low <= high")
        object.__setattr__(self, "lung_hu_band", (int(lo), int(hi)))


def hu_window_scale(slice_hu: np.ndarray, hu_limit: int = 600) -> np.ndarray:
    """Clamp HU to [-hu_limit, hu_limit] and divide by hu_limit."""
    if hu_limit <= 0:
        raise ValueError(f"hu_limit must be positive, got {hu_limit}")
    a = np.asarray(slice_hu, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("slice contains non-finite values")
    return (np.clip(a, -hu_limit, hu_limit) / hu_limit).astype(np.float32)


def crop_offsets(shape: tuple[int, int], crop_size: int) -> tuple[int, int]:
    rows, cols = shape[-2:]
    if rows < crop_size or cols < crop_size:
        raise ValueError(f"image {rows}x{cols} is smaller than crop {crop_size}")
    return (rows - crop_size) // 2, (cols - crop_size) // 2


def center_crop(image: np.ndarray, crop_size: int) -> np.ndarray:
    """Return the centered ``crop_size`` x ``crop_size`` window (last two axes)."""
    r0, c0 = crop_offsets(image.shape, crop_size)
    return image[..., r0 : r0 + crop_size, c0 : c0 + crop_size].copy()


def preprocess_slice(slice_hu: np.ndarray, config: PreprocConfig) -> np.ndarray:
    return hu_window_scale(center_crop(slice_hu, config.crop_size), config.hu_limit)


def volume_records(
    volume: CtVolume,
    config: PreprocConfig,
    masks: Optional[np.ndarray] = None,
    labels: Optional[Sequence[bool]] = None,
) -> list[SliceRecord]:
    """Preprocess every slice of ``volume`` into a SliceRecord.

    Slice labels come from ``labels`` if given, else from mask non-emptiness,
    else every slice is NON_PE (only valid for non-PE studies).
    """
    n = volume.n_slices
    if masks is not None and masks.shape != volume.shape:
        raise ValueError(f"mask shape {masks.shape} != volume shape {volume.shape}")
    if labels is None:
        if masks is not None:
            labels = [bool(masks[i].any()) for i in range(n)]
        elif volume.pe_label:
            raise ValueError(
                f"PE study {volume.patient_id!r} has neither slice labels nor masks"
            )
        else:
            labels = [False] * n
    if len(labels) != n:
        raise ValueError("one label per slice required")

    records = []
    for i in range(n):
        mask = None
        if masks is not None:
            mask = center_crop(masks[i], config.crop_size).astype(np.uint8)
        records.append(
            SliceRecord(
                patient_id=volume.patient_id,
                slice_index=i,
                image=preprocess_slice(volume.voxels[i], config),
                label=Label.PE if labels[i] else Label.NON_PE,
                mask=mask,
            )
        )
    return records


def rebalance_upsample(records: Iterable[SliceRecord], factor: int = 5) -> list[SliceRecord]:
    """Repeat each PE record ``factor`` times in place; NON_PE records once."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = []
    for rec in records:
        out.extend([rec] * (factor if rec.is_pe else 1))
    return out


def augment_flip(image: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator):
    """Random horizontal then vertical flip, each with p=0.5, shared by image and mask."""
    if mask is not None and mask.shape != image.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {image.shape}")
    hflip, vflip = rng.random(2) < 0.5
    if hflip:
        image = image[..., :, ::-1]
        mask = None if mask is None else mask[..., :, ::-1]
    if vflip:
        image = image[..., ::-1, :]
        mask = None if mask is None else mask[..., ::-1, :]
    image = np.ascontiguousarray(image)
    mask = None if mask is None else np.ascontiguousarray(mask)
    return image, mask


def lung_fraction(slice_hu: np.ndarray, config: PreprocConfig) -> float:
    lo, hi = config.lung_hu_band
    window = center_crop(np.asarray(slice_hu), config.crop_size)
    return float(((window >= lo) & (window <= hi)).mean())


def lung_region_slices(volume: CtVolume, config: PreprocConfig) -> list[int]:
    """Indices of slices whose cropped lung-HU area fraction reaches the threshold."""
    return [
        i
        for i in range(volume.n_slices)
        if lung_fraction(volume.voxels[i], config) >= config.lung_area_fraction_min
    ]


def build_fp_reduction_dataset(pe_studies, non_pe_studies, config: PreprocConfig) -> list[SliceRecord]:
    """Training set for the false-positive-reduction classifier.

    ``pe_studies`` are (volume, per-slice PE flags or masks) pairs; only their
    PE slices are kept.  ``non_pe_studies`` are volumes; only their lung-region
    slices are kept, labeled NON_PE.
    """
    out: list[SliceRecord] = []
    for volume, annotation in pe_studies:
        annotation = np.asarray(annotation)
        if annotation.ndim == 3:
            records = volume_records(volume, config, masks=annotation)
        else:
            records = volume_records(volume, config, labels=[bool(a) for a in annotation])
        positives = [r for r in records if r.is_pe]
        if not positives:
            log.warning("PE study %s has no PE-labeled slices; skipped", volume.patient_id)
            continue
        out.extend(positives)
    for volume in non_pe_studies:
        keep = set(lung_region_slices(volume, config))
        out.extend(
            r for r in volume_records(volume, config, labels=[False] * volume.n_slices)
            if r.slice_index in keep
        )
    return out
