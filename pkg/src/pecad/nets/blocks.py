"""Building blocks shared by the classifiers and the segmenter."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ConvSet(nn.Sequential):
    """Conv2d -> BatchNorm -> ReLU."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, dilation=1):
        padding = dilation * (kernel_size - 1) // 2
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=False),
        )


def receptive_field(kernel_size: int, dilation: int) -> int:
    return (kernel_size - 1) * dilation + 1


class DilatedResidualBlock(nn.Module):
    """y = proj(x) + F(x), F being two dilated 3x3 conv-BN-ReLU sets.

    Spatial size is preserved; there is no activation after the addition, so
    zeroing F gives an exact identity.
    """

    def __init__(self, in_ch: int, out_ch: int, dilation: int = 1):
        super().__init__()
        if dilation < 1:
            raise ValueError("dilation must be >= 1")
        self.body = nn.Sequential(
            ConvSet(in_ch, out_ch, 3, dilation=dilation),
            ConvSet(out_ch, out_ch, 3, dilation=dilation),
        )
        if in_ch != out_ch:
            self.proj = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.proj = nn.Identity()
        self.in_ch, self.out_ch, self.dilation = in_ch, out_ch, dilation

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} channels, got {x.shape[1]}")
        return self.proj(x) + self.body(x)


def split_channels(channels: int, n_groups: int) -> list[int]:
    """Even split; the remainder goes to the first group."""
    base = channels // n_groups
    if base == 0:
        raise ValueError(f"cannot split {channels} channels into {n_groups} groups")
    sizes = [base] * n_groups
    sizes[0] += channels - base * n_groups
    return sizes


class MixedDepthwiseConv(nn.Module):
    """Depthwise conv whose channel groups use different (odd) kernel sizes."""

    def __init__(self, channels: int, kernel_sizes: Sequence[int], stride: int = 1):
        super().__init__()
        kernel_sizes = list(kernel_sizes)
        if not kernel_sizes:
            raise ValueError("need at least one kernel size")
        for k in kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        self.splits = split_channels(channels, len(kernel_sizes))
        self.convs = nn.ModuleList(
            nn.Conv2d(c, c, k, stride=stride, padding=k // 2, groups=c, bias=False)
            for c, k in zip(self.splits, kernel_sizes)
        )
        self.kernel_sizes = kernel_sizes

    def forward(self, x):
        if len(self.convs) == 1:
            return self.convs[0](x)
        parts = torch.split(x, self.splits, dim=1)
        return torch.cat([conv(p) for conv, p in zip(self.convs, parts)], dim=1)


class SELayer(nn.Module):
    """Squeeze-and-excitation: pooled channel stats gate each channel in (0, 1)."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if reduction < 1 or reduction > channels:
            raise ValueError(f"reduction {reduction} invalid for {channels} channels")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class JPU(nn.Module):
    """Joint pyramid upsampling over the two deepest encoder maps.

    ``down4`` is upsampled x2, concatenated with ``down3`` and fed to one
    dilated 3x3 conv set per dilation; branch outputs are concatenated.
    """

    def __init__(self, in3: int, in4: int, width: int, dilations: Sequence[int] = (1, 2, 4, 8)):
        super().__init__()
        dilations = list(dilations)
        if not dilations or any(d < 1 for d in dilations):
            raise ValueError("dilations must be a non-empty list of positive ints")
        self.branches = nn.ModuleList(
            ConvSet(in3 + in4, width, 3, dilation=d) for d in dilations
        )
        self.out_channels = width * len(dilations)

    def forward(self, down3, down4):
        h3, w3 = down3.shape[-2:]
        h4, w4 = down4.shape[-2:]
        if (2 * h4, 2 * w4) != (h3, w3):
            raise ValueError(f"down4 {h4}x{w4} must be half of down3 {h3}x{w3}")
        up = F.interpolate(down4, size=(h3, w3), mode="bilinear", align_corners=False)
        feats = torch.cat([down3, up], dim=1)
        return torch.cat([b(feats) for b in self.branches], dim=1)


class ANet(nn.Module):
    """Plain conv stack producing a one-channel sigmoid attention map."""

    def __init__(self, in_ch: int = 1, width: int = 8, n_layers: int = 4):
        super().__init__()
        if n_layers < 2:
            raise ValueError("attention branch needs at least 2 layers")
        layers = [ConvSet(in_ch, width)]
        layers += [ConvSet(width, width) for _ in range(n_layers - 2)]
        self.features = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.out(self.features(x)))


def attention_combine(features: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Multiply every feature channel by a one-channel attention map."""
    if attention.shape[1] != 1:
        raise ValueError("attention map must have one channel")
    if features.shape[-2:] != attention.shape[-2:]:
        raise ValueError(
            f"size mismatch: features {tuple(features.shape[-2:])} vs attention {tuple(attention.shape[-2:])}"
        )
    return features * attention
