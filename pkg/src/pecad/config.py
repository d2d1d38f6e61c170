"""Run configuration: one YAML file with a section per subsystem.

Every key has a default, so an empty file (or no file) is a valid desk-scale
configuration.  The config hash is taken over the canonical JSON form of the
fully resolved configuration minus ``output_dir``, so key order in the file
and the output location do not matter.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .nets.config import (
    Arch,
    ClassifierConfig,
    SegmenterConfig,
    canonical_json,
    classifier_preset,
    config_hash,
    segmenter_preset,
)
from .phantom import PhantomSpec
from .preprocess import PreprocConfig
from .training.loop import LossKind, TrainConfig
from .triage import TriageConfig

DEFAULTS: dict[str, Any] = {
    "seed": 1,
    "output_dir": "runs",
    "dataset": {
        "n_pe": 6,
        "n_non_pe": 6,
        "ratios": [0.7, 0.2, 0.1],
        "stratify": False,
    },
    "preprocess": {
        "hu_limit": 600,
        "crop_size": 64,
        "upsample_factor": 5,
        "lung_hu_band": [-950, -300],
        "lung_area_fraction_min": 0.10,
    },
    "phantom": {
        "n_slices": 24,
        "rows": 72,
        "cols": 72,
        "n_vessels": 2,
        "hu_lung": -800.0,
        "hu_soft": 40.0,
        "hu_contrast": 300.0,
        "hu_embolus": 50.0,
        "noise_sigma_hu": 15.0,
        "vessel_radius_fraction": 0.085,
        "vessel_period": 6,
        "anatomy_seed": 0,
    },
    "classifier": {"scale": "DESK", "drn": {}, "mixnet": {}},
    "fp_classifier": {"scale": "DESK", "overrides": {}},
    "segmenter": {"scale": "DESK", "overrides": {}},
    "training": {
        "base_lr": 1e-3,
        "max_epochs": 120,
        "batch_size": 16,
        "early_stop_patience": 40,
        "focal_gamma": 2.0,
        "focal_alpha": 0.25,
        "lookahead_k": 6,
        "lookahead_alpha": 0.5,
        "segmenter": {
            "max_epochs": 150,
            "batch_size": 2,
            "early_stop_patience": 60,
            "augment": True,
            "dice_smooth": 1.0,
        },
    },
    "triage": {"threshold": 0.5, "mask_threshold": 0.5},
    "metrics": {"threshold": 0.5},
}

SECTIONS = ("dataset", "preprocess", "phantom", "classifier", "fp_classifier",
            "segmenter", "training", "triage", "metrics")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        raw = {}
        if path is not None:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        data = _merge(DEFAULTS, raw)
        for key, value in overrides.items():
            if value is not None:
                data[key] = value
        return cls(data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def hash(self) -> str:
        # where a run is written does not change what it computes
        return config_hash({k: v for k, v in self.data.items() if k != "output_dir"})

    @property
    def run_dir(self) -> Path:
        # run stamp derived from the config itself so reruns are reproducible
        return Path(self.data["output_dir"]) / f"run-{self.hash[:12]}"

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def canonical(self) -> str:
        return canonical_json(self.data)

    # typed views -----------------------------------------------------------

    def preprocess(self) -> PreprocConfig:
        d = dict(self.data["preprocess"])
        d["lung_hu_band"] = tuple(d["lung_hu_band"])
        return PreprocConfig(**d)

    def phantom_template(self) -> PhantomSpec:
        return PhantomSpec(seed=self.seed, **self.data["phantom"])

    def classifier(self, arch: Arch | str) -> ClassifierConfig:
        arch = Arch(arch)
        sec = self.data["classifier"]
        key = "drn" if arch is Arch.DRN else "mixnet"
        return _with_input(classifier_preset(arch, sec["scale"], **_tuples(sec[key])), self)

    def fp_classifier(self) -> ClassifierConfig:
        sec = self.data["fp_classifier"]
        return _with_input(classifier_preset(Arch.DRN, sec["scale"], **_tuples(sec["overrides"])), self)

    def segmenter(self) -> SegmenterConfig:
        sec = self.data["segmenter"]
        return _with_input(segmenter_preset(sec["scale"], **_tuples(sec["overrides"])), self)

    def training(self, target: str) -> TrainConfig:
        sec = dict(self.data["training"])
        seg = sec.pop("segmenter")
        if target == "segmenter":
            sec.update(seg)
            sec["loss"] = LossKind.BCE_PLUS_DICE
        else:
            sec["loss"] = LossKind.FOCAL_BCE
        offsets = {"drn": 0, "mixnet": 1, "fpnet": 2, "segmenter": 3}
        sec["seed"] = self.seed * 10 + offsets[target]
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in sec.items() if k in names})

    def triage(self) -> TriageConfig:
        sec = self.data["triage"]
        return TriageConfig(threshold=float(sec["threshold"]),
                            mask_threshold=float(sec["mask_threshold"]),
                            preprocess=self.preprocess())


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in (d or {}).items()}


def _with_input(cfg, run: RunConfig):
    # model input follows the crop size
    crop = int(run.data["preprocess"]["crop_size"])
    if cfg.input.height != crop or cfg.input.width != crop:
        cfg = replace(cfg, input=replace(cfg.input, height=crop, width=crop))
    return cfg
