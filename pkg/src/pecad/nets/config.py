"""Model configurations and the preset table.

No channel counts or depths are published for these networks, so the PAPER
presets follow the reference designs (DRN-C-26-style dilated ResNet,
MixNet-M stage table widened x1.3 as in MixNet-L, ARU-Net-style encoder
widths).  DESK presets keep every block type but shrink widths and depths
so that training fits on a single CPU core.

===========  =======  ========================================================
preset       input    layout
===========  =======  ========================================================
DRN/PAPER    1x400²   stem 16; stages 16,32,64,128,256,512; blocks 1,1,2,2,2,2;
                      strides 1,2,2,2,1,1; dilations 1,1,1,1,2,4
DRN/DESK     1x64²    stem 8; stages 8,8,16,16,32,32; one block each;
                      same strides and dilations
MIX/PAPER    1x400²   stem 24 s2; MixNet-M stages x1.3; kernels 3,5,7,9; head 1536
MIX/DESK     1x64²    stem 8 s2; 4 short stages; kernels 3,5; head 64
SEG/PAPER    1x400²   encoder 64,128,256,512; JPU width 128 dil 1,2,4,8;
                      attention 4 layers x 32; SE reduction 16
SEG/DESK     1x64²    encoder 8,16,32,64; JPU width 16 dil 1,2,4,8;
                      attention 4 layers x 8; SE reduction 4
===========  =======  ========================================================
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from enum import Enum


class Arch(str, Enum):
    DRN = "DRN"
    MIXNET = "MIXNET"


class Scale(str, Enum):
    PAPER = "PAPER"
    DESK = "DESK"


@dataclass(frozen=True)
class TensorSpec:
    channels: int = 1
    height: int = 400
    width: int = 400

    def __post_init__(self):
        if min(self.channels, self.height, self.width) <= 0:
            raise ValueError("tensor dimensions must be positive")


@dataclass(frozen=True)
class MixStage:
    out_ch: int
    expand: int
    n_kernels: int
    stride: int
    repeats: int
    se_reduction: int = 0  # 0 disables SE


@dataclass(frozen=True)
class ClassifierConfig:
    arch: Arch = Arch.DRN
    scale: Scale = Scale.DESK
    input: TensorSpec = TensorSpec(1, 64, 64)
    width_multiplier: float = 1.0
    # DRN
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (8, 8, 16, 16, 32, 32)
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2, 1, 1)
    dilation_schedule: tuple[int, ...] = (1, 1, 1, 1, 2, 4)
    # MixNet
    kernel_size_groups: tuple[int, ...] = (3, 5, 7, 9)
    mix_stages: tuple[MixStage, ...] = ()
    head_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "scale", Scale(self.scale))
        if isinstance(self.input, dict):
            object.__setattr__(self, "input", TensorSpec(**self.input))
        object.__setattr__(self, "mix_stages", tuple(
            MixStage(**s) if isinstance(s, dict) else s for s in self.mix_stages
        ))
        for name in ("stage_channels", "stage_blocks", "stage_strides",
                     "dilation_schedule", "kernel_size_groups"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_size_groups):
            raise ValueError("kernel sizes must be odd")
        if any(d < 1 for d in self.dilation_schedule):
            raise ValueError("dilations must be >= 1")
        if self.arch is Arch.DRN:
            n = len(self.stage_channels)
            if not (len(self.stage_blocks) == len(self.stage_strides) == len(self.dilation_schedule) == n):
                raise ValueError("DRN stage lists must have equal length")
        elif not self.mix_stages:
            raise ValueError("MixNet config needs a stage table")

    def width(self, c: int) -> int:
        return max(1, int(round(c * self.width_multiplier)))

    def to_dict(self) -> dict:
        return _plain(asdict(self))


@dataclass(frozen=True)
class SegmenterConfig:
    scale: Scale = Scale.DESK
    input: TensorSpec = TensorSpec(1, 64, 64)
    encoder_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    jpu_width: int = 16
    jpu_dilations: tuple[int, ...] = (1, 2, 4, 8)
    attention_layers: int = 4
    attention_width: int = 8
    se_reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scale", Scale(self.scale))
        if isinstance(self.input, dict):
            object.__setattr__(self, "input", TensorSpec(**self.input))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "jpu_dilations", tuple(int(d) for d in self.jpu_dilations))
        if len(self.encoder_channels) != 4:
            raise ValueError("segmenter has exactly four downsampling stages")
        if self.se_reduction > min(self.encoder_channels):
            raise ValueError("se_reduction exceeds the narrowest encoder stage")
        if self.attention_layers < 2:
            raise ValueError("attention_layers must be >= 2")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    """sha256 of the canonical (key-sorted) JSON form; stable under field reordering."""
    payload = config.to_dict() if hasattr(config, "to_dict") else config
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


MIXNET_M_STAGES = (
    MixStage(24, 1, 1, 1, 1),
    MixStage(32, 6, 3, 2, 2),
    MixStage(40, 6, 4, 2, 4, 2),
    MixStage(80, 6, 3, 2, 4, 4),
    MixStage(120, 6, 3, 1, 4, 2),
    MixStage(200, 6, 4, 2, 4, 2),
)

MIXNET_DESK_STAGES = (
    MixStage(8, 1, 1, 1, 1),
    MixStage(12, 3, 2, 2, 1),
    MixStage(16, 3, 2, 2, 1, 4),
    MixStage(24, 3, 2, 2, 1, 4),
)


def classifier_preset(arch: Arch | str, scale: Scale | str, **overrides) -> ClassifierConfig:
    arch, scale = Arch(arch), Scale(scale)
    if arch is Arch.DRN and scale is Scale.PAPER:
        cfg = ClassifierConfig(
            arch=arch, scale=scale, input=TensorSpec(1, 400, 400),
            stem_channels=16,
            stage_channels=(16, 32, 64, 128, 256, 512),
            stage_blocks=(1, 1, 2, 2, 2, 2),
        )
    elif arch is Arch.DRN:
        cfg = ClassifierConfig(arch=arch, scale=scale)
    elif scale is Scale.PAPER:
        cfg = ClassifierConfig(
            arch=arch, scale=scale, input=TensorSpec(1, 400, 400),
            width_multiplier=1.3, stem_channels=24,
            kernel_size_groups=(3, 5, 7, 9),
            mix_stages=MIXNET_M_STAGES, head_channels=1536,
        )
    else:
        cfg = ClassifierConfig(
            arch=arch, scale=scale, stem_channels=8,
            kernel_size_groups=(3, 5),
            mix_stages=MIXNET_DESK_STAGES, head_channels=64,
        )
    return replace(cfg, **overrides) if overrides else cfg


def segmenter_preset(scale: Scale | str, **overrides) -> SegmenterConfig:
    scale = Scale(scale)
    if scale is Scale.PAPER:
        cfg = SegmenterConfig(
            scale=scale, input=TensorSpec(1, 400, 400),
            encoder_channels=(64, 128, 256, 512), jpu_width=128,
            attention_width=32, se_reduction=16,
        )
    else:
        cfg = SegmenterConfig(scale=scale)
    return replace(cfg, **overrides) if overrides else cfg


def classifier_config_from_dict(d: dict) -> ClassifierConfig:
    d = dict(d)
    d["input"] = TensorSpec(**d["input"])
    d["mix_stages"] = tuple(MixStage(**s) for s in d.get("mix_stages", ()))
    for k in ("stage_channels", "stage_blocks", "stage_strides", "dilation_schedule", "kernel_size_groups"):
        if k in d:
            d[k] = tuple(d[k])
    return ClassifierConfig(**d)


def segmenter_config_from_dict(d: dict) -> SegmenterConfig:
    d = dict(d)
    d["input"] = TensorSpec(**d["input"])
    return SegmenterConfig(**d)
