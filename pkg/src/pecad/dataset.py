"""Portable CT volume format, dataset manifests and patient-level splits.

A volume is stored as a JSON header ``<name>.ctvol.json`` next to a raw
little-endian int16 payload ``<name>.ctvol.raw`` (C order, slice-row-col).
Masks use the same layout with ``uint8`` values in {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

HU_MIN = -2048
HU_MAX = 4095

HEADER_SUFFIX = ".ctvol.json"
RAW_SUFFIX = ".ctvol.raw"
MASK_HEADER_SUFFIX = ".mask.json"
MASK_RAW_SUFFIX = ".mask.raw"


class VolumeFormatError(ValueError):
    pass


class Label(str, Enum):
    PE = "PE"
    NON_PE = "NON_PE"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass
class CtVolume:
    """A patient's CT study in Hounsfield Units, indexed (slice, row, col)."""

    patient_id: str
    voxels: np.ndarray
    slice_thickness_mm: float
    pixel_spacing_mm: float
    pe_label: bool

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.validate()

    def validate(self) -> None:
        v = self.voxels
        if v.ndim != 3:
            raise VolumeFormatError(f"voxels must be 3D (slice, row, col), got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise VolumeFormatError(f"empty volume dimensions {v.shape}")
        if v.dtype != np.int16:
            if not np.issubdtype(v.dtype, np.integer):
                raise VolumeFormatError(f"voxels must be integer HU, got {v.dtype}")
        lo, hi = int(v.min()), int(v.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise VolumeFormatError(
                f"HU values outside [{HU_MIN}, {HU_MAX}]: min={lo}, max={hi}"
            )
        self.voxels = v.astype(np.int16, copy=False)
        if not (self.slice_thickness_mm > 0 and self.pixel_spacing_mm > 0):
            raise VolumeFormatError("slice thickness and pixel spacing must be positive")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class SliceRecord:
    """One preprocessed 2D image with its label and patient linkage."""

    patient_id: str
    slice_index: int
    image: np.ndarray
    label: Label
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.label = Label(self.label)
        if self.slice_index < 0:
            raise ValueError("slice_index must be non-negative")
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < -1.0 or self.image.max() > 1.0):
            raise ValueError("image values must lie in [-1, 1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            if self.label is Label.NON_PE and self.mask.any():
                raise ValueError("NON_PE record carries a non-empty lesion mask")

    @property
    def is_pe(self) -> bool:
        return self.label is Label.PE


@dataclass
class ManifestEntry:
    patient_id: str
    volume_path: str
    pe_label: bool
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    source_tag: str = "phantom"
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.source_tag not in ("clinical", "open", "phantom"):
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        seen = set()
        for e in self.entries:
            if e.patient_id in seen:
                raise ValueError(f"duplicate patient_id {e.patient_id!r} in manifest")
            seen.add(e.patient_id)

    @property
    def patient_ids(self) -> list[str]:
        return [e.patient_id for e in self.entries]

    def entry(self, patient_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.patient_id == patient_id:
                return e
        raise KeyError(patient_id)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_json(self) -> str:
        doc = {
            "source_tag": self.source_tag,
            "entries": [
                {
                    "patient_id": e.patient_id,
                    "volume_path": e.volume_path,
                    "pe_label": e.pe_label,
                    "mask_path": e.mask_path,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(entries=entries, source_tag=doc.get("source_tag", "phantom"), root=path.parent)


@dataclass
class SplitAssignment:
    assignment: dict[str, Split]
    seed: int
    ratios: tuple[float, float, float]

    def patients(self, split: Split | str) -> list[str]:
        split = Split(split)
        return sorted(p for p, s in self.assignment.items() if s is split)

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.patients(s)) for s in Split)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignment": {p: s.value for p, s in sorted(self.assignment.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        doc = json.loads(Path(path).read_text())
        return cls(
            assignment={p: Split(s) for p, s in doc["assignment"].items()},
            seed=int(doc["seed"]),
            ratios=tuple(doc["ratios"]),
        )


def _stem(path) -> Path:
    """Strip a known volume/mask suffix so either file of a pair can be passed."""
    p = Path(path)
    name = p.name
    for suffix in (HEADER_SUFFIX, RAW_SUFFIX, MASK_HEADER_SUFFIX, MASK_RAW_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def _read_raw(raw_path: Path, shape: tuple[int, int, int], dtype: np.dtype) -> np.ndarray:
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw payload {raw_path}")
    data = raw_path.read_bytes()
    expected = math.prod(shape) * dtype.itemsize
    if len(data) != expected:
        raise VolumeFormatError(
            f"{raw_path}: raw size {len(data)} bytes, header implies {expected}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def load_volume(path) -> CtVolume:
    """Read a header+raw volume pair; ``path`` may name either file or the shared stem."""
    stem = _stem(path)
    header_path = stem.with_name(stem.name + HEADER_SUFFIX)
    if not header_path.exists():
        raise FileNotFoundError(f"missing volume header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed header ({exc})") from exc
    if header.get("dtype") != "int16-le" or header.get("order") != "slice-row-col":
        raise VolumeFormatError(f"{header_path}: unsupported dtype/order")
    try:
        shape = (int(header["n_slices"]), int(header["rows"]), int(header["cols"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: bad dimensions ({exc})") from exc
    voxels = _read_raw(stem.with_name(stem.name + RAW_SUFFIX), shape, np.dtype("<i2"))
    return CtVolume(
        patient_id=str(header["patient_id"]),
        voxels=voxels.astype(np.int16),
        slice_thickness_mm=float(header["slice_thickness_mm"]),
        pixel_spacing_mm=float(header["pixel_spacing_mm"]),
        pe_label=bool(header["pe_label"]),
    )


def save_volume(volume: CtVolume, path) -> Path:
    """Write ``volume`` as a header+raw pair and return the header path."""
    volume.validate()
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n, r, c = volume.shape
    header = {
        "patient_id": volume.patient_id,
        "pe_label": bool(volume.pe_label),
        "n_slices": n,
        "rows": r,
        "cols": c,
        "slice_thickness_mm": float(volume.slice_thickness_mm),
        "pixel_spacing_mm": float(volume.pixel_spacing_mm),
        "dtype": "int16-le",
        "order": "slice-row-col",
    }
    header_path = stem.with_name(stem.name + HEADER_SUFFIX)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    stem.with_name(stem.name + RAW_SUFFIX).write_bytes(
        np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()
    )
    return header_path


def save_mask(mask: np.ndarray, path) -> Path:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise VolumeFormatError("mask must be 3D (slice, row, col)")
    if not np.isin(mask, (0, 1)).all():
        raise VolumeFormatError("mask values must be 0 or 1")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n, r, c = mask.shape
    header = {"n_slices": n, "rows": r, "cols": c, "dtype": "uint8", "order": "slice-row-col"}
    header_path = stem.with_name(stem.name + MASK_HEADER_SUFFIX)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    stem.with_name(stem.name + MASK_RAW_SUFFIX).write_bytes(
        np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
    )
    return header_path


def load_mask(path) -> np.ndarray:
    stem = _stem(path)
    header_path = stem.with_name(stem.name + MASK_HEADER_SUFFIX)
    if not header_path.exists():
        raise FileNotFoundError(f"missing mask header {header_path}")
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "uint8":
        raise VolumeFormatError(f"{header_path}: mask dtype must be uint8")
    shape = (int(header["n_slices"]), int(header["rows"]), int(header["cols"]))
    mask = _read_raw(stem.with_name(stem.name + MASK_RAW_SUFFIX), shape, np.dtype(np.uint8))
    if not np.isin(mask, (0, 1)).all():
        raise VolumeFormatError(f"{header_path}: mask values must be 0 or 1")
    return mask


def _split_counts(n: int, ratios) -> tuple[int, int, int]:
    n_val = round(n * ratios[1])
    n_test = round(n * ratios[2])
    # remainder (positive or negative) is absorbed by TRAIN
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError(f"ratios {ratios} cannot be realised with {n} patients")
    return n_train, n_val, n_test


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative reals summing to 1, got {ratios}")
    return ratios


def split_by_patient(
    manifest: DatasetManifest,
    ratios=(0.7, 0.2, 0.1),
    seed: int = 0,
    stratify: bool = False,
) -> SplitAssignment:
    """Assign every patient in ``manifest`` to TRAIN, VAL or TEST.

    VAL and TEST receive ``round(N * ratio)`` patients; TRAIN takes the rest.
    Patients are sorted by id, then permuted with a generator seeded by
    ``seed``, so the assignment depends only on the patient set, ratios and
    seed.  With ``stratify`` the same rule is applied to PE and non-PE
    patients separately.
    """
    ratios = _check_ratios(ratios)
    if not manifest.entries:
        raise ValueError("cannot split an empty manifest")

    if stratify:
        groups = [
            sorted(e.patient_id for e in manifest.entries if e.pe_label),
            sorted(e.patient_id for e in manifest.entries if not e.pe_label),
        ]
    else:
        groups = [sorted(manifest.patient_ids)]

    assignment: dict[str, Split] = {}
    rng = np.random.default_rng(seed)
    for ids in groups:
        if not ids:
            continue
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n_train, n_val, _ = _split_counts(len(ids), ratios)
        for i, pid in enumerate(shuffled):
            if i < n_train:
                assignment[pid] = Split.TRAIN
            elif i < n_train + n_val:
                assignment[pid] = Split.VAL
            else:
                assignment[pid] = Split.TEST
    return SplitAssignment(assignment=assignment, seed=seed, ratios=ratios)
