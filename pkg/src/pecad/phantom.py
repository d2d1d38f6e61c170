"""Synthetic CTPA-like phantoms with known emboli.

Geometry per slice: air outside an elliptical soft-tissue body, two
elliptical lungs that taper toward both ends of the stack, and
contrast-filled vessels (piecewise-linear tubes with circular cross
sections) running through the lungs.  In PE studies every vessel carries
a hypodense embolus over a run of slices, kept strictly inside the lumen
so at least one ring of contrast surrounds it.

Where vessels run, the lungs keep one per-study size and each vessel's
in-plane path repeats every ``vessel_period`` slices, while a clot run is
at most one period long.  Every clotted slice therefore has clot-free
slices of identical geometry elsewhere in the stack, so only the clot
itself tells PE slices apart, yet clots still appear at many positions.
Studies that share an ``anatomy_seed`` share body, lung and vessel layout
and differ only in clots and noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import HU_MAX, HU_MIN, CtVolume, DatasetManifest, ManifestEntry, save_mask, save_volume

HU_AIR = -1000.0
RIM_CLEARANCE = 1.5  # > sqrt(2)


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_slices: int = 24
    rows: int = 72
    cols: int = 72
    pe: bool = False
    n_vessels: int = 2
    hu_lung: float = -800.0
    hu_soft: float = 40.0
    hu_contrast: float = 300.0
    hu_embolus: float = 50.0
    noise_sigma_hu: float = 15.0
    vessel_radius_fraction: float = 0.085  # vessel radius / min(rows, cols)
    vessel_period: int = 6  # slices after which a vessel's in-plane path repeats
    anatomy_seed: int | None = None  # shared layout for a cohort; None means per-study
    slice_thickness_mm: float = 8.0
    pixel_spacing_mm: float = 0.49

    def __post_init__(self):
        if self.n_slices < 4:
            raise ValueError("n_slices must be >= 4")
        if self.rows < 64 or self.cols < 64:
            raise ValueError("rows and cols must be >= 64")
        if self.n_vessels < 1:
            raise ValueError("n_vessels must be >= 1")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be non-negative")
        if not 0 < self.vessel_radius_fraction < 0.25:
            raise ValueError("vessel_radius_fraction must lie in (0, 0.25)")
        if self.vessel_period < 1:
            raise ValueError("vessel_period must be >= 1")
        if not self.hu_embolus < self.hu_contrast:
            raise ValueError("hu_embolus must be below hu_contrast (filling defect)")
        for name in ("hu_lung", "hu_soft", "hu_contrast", "hu_embolus"):
            v = getattr(self, name)
            if not HU_MIN <= v <= HU_MAX:
                raise ValueError(f"{name}={v} outside CT range")

    @property
    def patient_id(self) -> str:
        return f"{'pe' if self.pe else 'nonpe'}_{self.seed:05d}"


class PhantomStudy(NamedTuple):
    volume: CtVolume
    masks: np.ndarray  # uint8 (slice, row, col)
    labels: list[bool]  # per-slice PE flag


class PhantomGeometry(NamedTuple):
    clean_hu: np.ndarray  # float64, pre-noise
    lumen: np.ndarray  # bool, vessel lumen including embolus
    embolus: np.ndarray  # bool


def _lung_scale(n_slices: int) -> np.ndarray:
    # tapered lungs: small at apex/base, full size mid-stack
    z = (np.arange(n_slices) + 0.5) / n_slices
    return 0.3 + 0.7 * np.sin(np.pi * z)


def phantom_geometry(spec: PhantomSpec) -> PhantomGeometry:
    """Noise-free HU volume plus lumen and embolus masks for ``spec``."""
    rng = np.random.default_rng(spec.seed if spec.anatomy_seed is None else [spec.anatomy_seed, 2])
    n, h, w = spec.n_slices, spec.rows, spec.cols
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    body_ry, body_rx = 0.40 * h, 0.44 * w
    lung_ry, lung_rx = 0.27 * h, 0.17 * w
    lung_dx = 0.21 * w
    body = ((rr - cy) / body_ry) ** 2 + ((cc - cx) / body_rx) ** 2 <= 1.0

    r_vessel = max(3.0, round(spec.vessel_radius_fraction * min(h, w), 1))
    # largest clot radius; 8-neighbours of a clot pixel stay inside the lumen
    r_embolus = r_vessel - RIM_CLEARANCE
    if r_embolus < 1.0:
        raise PhantomGeometryError("image too small for a rimmed embolus")

    scale = _lung_scale(n)
    # vessels occupy the slices where lungs are at least 80% of full size
    z_lo = int(np.argmax(scale >= 0.8))
    z_hi = n - int(np.argmax(scale[::-1] >= 0.8))
    if z_hi - z_lo < 2:
        raise PhantomGeometryError("too few slices for vessels")
    scale = scale.copy()
    scale[z_lo:z_hi] = rng.uniform(0.8, 1.0)

    # feasible vessel-centre ellipse inside the lung at 80% size
    fy = 0.8 * lung_ry - r_vessel - 1
    fx = 0.8 * lung_rx - r_vessel - 1
    if fy <= 0 or fx <= 0:
        raise PhantomGeometryError("lungs too small to host vessels")

    # the band of vessel slices holds at least two periods
    span = z_hi - z_lo
    period = max(1, min(spec.vessel_period, span // 2))

    # each lung is cut into horizontal bands, one per vessel on that side;
    # a vessel's centre is drawn anywhere in the inner part of its band for
    # each phase of the period (a piecewise-linear path bending every slice)
    per_side = {-1: (spec.n_vessels + 1) // 2, 1: spec.n_vessels // 2}
    gap = 2 * r_vessel + 1
    vessels = []  # (side, centre offset (dy, dx) per phase)
    for side, m in per_side.items():
        if m == 0:
            continue
        band = 2 * fy / m
        wiggle = (band - gap) / 2
        if wiggle < 0:
            raise PhantomGeometryError(
                f"cannot place {spec.n_vessels} non-overlapping vessels in {h}x{w}"
            )
        for j in range(m):
            centre = -fy + (j + 0.5) * band
            path = [(centre + rng.uniform(-wiggle, wiggle), rng.uniform(-fx, fx)) for _ in range(period)]
            vessels.append((side, path))

    clean = np.full((n, h, w), HU_AIR)
    lumen = np.zeros((n, h, w), dtype=bool)
    embolus = np.zeros((n, h, w), dtype=bool)

    # clots: every vessel, each over its own run of at most one period;
    # radius and off-centre shift are redrawn per slice
    # (irregular thrombus) while always leaving a rim
    clots = {}  # vessel -> {slice: (radius, shift_y, shift_x)}
    if spec.pe:
        rng = np.random.default_rng([spec.seed, 3])
        for k in range(len(vessels)):
            run = int(rng.integers(max(1, period // 2), period + 1))
            start = z_lo + int(rng.integers(0, span - run + 1))
            clots[k] = {}
            for z in range(start, start + run):
                r_e = float(rng.uniform(max(1.0, r_embolus - 1.5), r_embolus))
                max_shift = max(0.0, r_vessel - r_e - RIM_CLEARANCE)
                ang = rng.uniform(0, 2 * np.pi)
                shift = rng.uniform(0, max_shift)
                clots[k][z] = (r_e, shift * np.sin(ang), shift * np.cos(ang))

    for z in range(n):
        sl = clean[z]
        sl[body] = spec.hu_soft
        for side in (-1, 1):
            lcx = cx + side * lung_dx
            lung = ((rr - cy) / (lung_ry * scale[z])) ** 2 + ((cc - lcx) / (lung_rx * scale[z])) ** 2 <= 1.0
            sl[lung] = spec.hu_lung
        if not z_lo <= z < z_hi:
            continue
        for k, (side, path) in enumerate(vessels):
            dy, dx = path[(z - z_lo) % period]
            vy, vx = cy + dy, cx + side * lung_dx + dx
            d2 = (rr - vy) ** 2 + (cc - vx) ** 2
            tube = d2 <= r_vessel**2
            sl[tube] = spec.hu_contrast
            lumen[z] |= tube
            if z in clots.get(k, {}):
                r_e, sy, sx = clots[k][z]
                clot = (rr - vy - sy) ** 2 + (cc - vx - sx) ** 2 <= r_e**2
                sl[clot] = spec.hu_embolus
                embolus[z] |= clot
    return PhantomGeometry(clean_hu=clean, lumen=lumen, embolus=embolus)


def generate_study(spec: PhantomSpec) -> PhantomStudy:
    geom = phantom_geometry(spec)
    rng = np.random.default_rng([spec.seed, 1])
    hu = geom.clean_hu
    if spec.noise_sigma_hu > 0:
        hu = hu + rng.normal(0.0, spec.noise_sigma_hu, size=hu.shape)
    voxels = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    masks = geom.embolus.astype(np.uint8)
    labels = [bool(m.any()) for m in masks]
    volume = CtVolume(
        patient_id=spec.patient_id,
        voxels=voxels,
        slice_thickness_mm=spec.slice_thickness_mm,
        pixel_spacing_mm=spec.pixel_spacing_mm,
        pe_label=any(labels),
    )
    return PhantomStudy(volume, masks, labels)


def generate_cohort(
    n_pe: int,
    n_non_pe: int,
    base_seed: int,
    template: PhantomSpec,
    out_dir,
) -> DatasetManifest:
    """Write ``n_pe`` PE then ``n_non_pe`` non-PE studies; seeds are base_seed + i."""
    if n_pe < 0 or n_non_pe < 0:
        raise ValueError("patient counts must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_pe + n_non_pe):
        spec = replace(template, seed=base_seed + i, pe=i < n_pe)
        study = generate_study(spec)
        pid = spec.patient_id
        save_volume(study.volume, out_dir / pid)
        mask_rel = None
        if spec.pe:
            save_mask(study.masks, out_dir / pid)
            mask_rel = f"{pid}.mask.json"
        entries.append(
            ManifestEntry(
                patient_id=pid,
                volume_path=f"{pid}.ctvol.json",
                pe_label=study.volume.pe_label,
                mask_path=mask_rel,
            )
        )
    manifest = DatasetManifest(entries=entries, source_tag="phantom", root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def spec_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
