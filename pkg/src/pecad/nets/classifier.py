"""Per-image PE classifiers: dilated residual network and MixNet."""

from __future__ import annotations

import torch
from torch import nn

from .blocks import ConvSet, DilatedResidualBlock, MixedDepthwiseConv, SELayer
from .config import Arch, ClassifierConfig


class Classifier(nn.Module):
    """Common head: global average pool, one logit, sigmoid."""

    config: ClassifierConfig

    def features(self, x):
        raise NotImplementedError

    def logits(self, x):
        spec = self.config.input
        if x.dim() != 4 or tuple(x.shape[1:]) != (spec.channels, spec.height, spec.width):
            raise ValueError(
                f"expected input (N, {spec.channels}, {spec.height}, {spec.width}), got {tuple(x.shape)}"
            )
        f = self.features(x).mean(dim=(2, 3))
        return self.head(f).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class DRN(Classifier):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        w = config.width
        c_in = config.input.channels
        stem = w(config.stem_channels)
        layers = [ConvSet(c_in, stem, 7)]
        prev = stem
        for ch, n_blocks, stride, dil in zip(
            config.stage_channels, config.stage_blocks, config.stage_strides, config.dilation_schedule
        ):
            ch = w(ch)
            if stride > 1:
                layers.append(ConvSet(prev, ch, 3, stride=stride))
                prev = ch
            for _ in range(n_blocks):
                layers.append(DilatedResidualBlock(prev, ch, dilation=dil))
                prev = ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)

    def features(self, x):
        return self.body(x)


class MixBlock(nn.Module):
    """Inverted bottleneck whose spatial conv is a mixed depthwise conv."""

    def __init__(self, in_ch, out_ch, expand, kernel_sizes, stride=1, se_reduction=0):
        super().__init__()
        mid = in_ch * expand
        layers = []
        if expand != 1:
            layers.append(ConvSet(in_ch, mid, 1))
        layers += [
            MixedDepthwiseConv(mid, kernel_sizes, stride=stride),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
        ]
        if se_reduction:
            layers.append(SELayer(mid, min(se_reduction, mid)))
        layers += [nn.Conv2d(mid, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch)]
        self.block = nn.Sequential(*layers)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        y = self.block(x)
        return x + y if self.residual else y


class MixNet(Classifier):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        w = config.width
        stem = w(config.stem_channels)
        layers = [ConvSet(config.input.channels, stem, 3, stride=2)]
        prev = stem
        for st in config.mix_stages:
            ch = w(st.out_ch)
            kernels = config.kernel_size_groups[: max(1, st.n_kernels)]
            for r in range(st.repeats):
                layers.append(
                    MixBlock(prev, ch, st.expand, kernels,
                             stride=st.stride if r == 0 else 1,
                             se_reduction=st.se_reduction)
                )
                prev = ch
        head = w(config.head_channels)
        layers.append(ConvSet(prev, head, 1))
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(head, 1)

    def features(self, x):
        return self.body(x)


def build_classifier(config: ClassifierConfig) -> Classifier:
    if config.arch is Arch.DRN:
        return DRN(config)
    if config.arch is Arch.MIXNET:
        return MixNet(config)
    raise ValueError(f"unknown arch {config.arch}")


@torch.no_grad()
def classifier_forward(model: Classifier, images) -> torch.Tensor:
    """Inference-mode PE probabilities for a batch (N, C, H, W)."""
    model.eval()
    images = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    return model(images)


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
