"""ARUX-Net lesion segmenter.

RUX branch: four downsampling stages (two conv sets + SE, then a strided
conv halving the resolution), JPU over the two deepest maps, three
bilinear upsampling stages with U-Net skips from Down2 and Down1.  The
attention branch gates the full-resolution decoder features before the
one-channel head.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import JPU, ANet, ConvSet, SELayer, attention_combine
from .config import SegmenterConfig


class DownStage(nn.Module):
    def __init__(self, in_ch, out_ch, se_reduction):
        super().__init__()
        self.convs = nn.Sequential(ConvSet(in_ch, out_ch), ConvSet(out_ch, out_ch))
        self.se = SELayer(out_ch, se_reduction)
        self.down = ConvSet(out_ch, out_ch, 3, stride=2)

    def forward(self, x):
        return self.down(self.se(self.convs(x)))


class UpStage(nn.Module):
    def __init__(self, in_ch, out_ch, skip_ch=0):
        super().__init__()
        self.reduce = ConvSet(in_ch, out_ch)
        self.fuse = ConvSet(out_ch + skip_ch, out_ch) if skip_ch else None

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.reduce(x)
        if self.fuse is not None:
            x = self.fuse(torch.cat([x, skip], dim=1))
        return x


class ARUXNet(nn.Module):
    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.encoder_channels
        cin = config.input.channels
        r = config.se_reduction
        self.down1 = DownStage(cin, c1, r)
        self.down2 = DownStage(c1, c2, r)
        self.down3 = DownStage(c2, c3, r)
        self.down4 = DownStage(c3, c4, r)
        self.jpu = JPU(c3, c4, config.jpu_width, config.jpu_dilations)
        self.up1 = UpStage(self.jpu.out_channels, c2, skip_ch=c2)
        self.up2 = UpStage(c2, c1, skip_ch=c1)
        self.up3 = UpStage(c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)
        # lesions cover ~1% of pixels; start the head at that prior
        nn.init.constant_(self.head.bias, -math.log(99.0))
        self.attention = ANet(cin, config.attention_width, config.attention_layers)

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.input.channels:
            raise ValueError(f"expected (N, {self.config.input.channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 16 (four x2 downsamplings)")

    def rux_features(self, x):
        """Decoder features at input resolution, before gating and head."""
        self._check(x)
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        d4 = self.down4(d3)
        y = self.jpu(d3, d4)
        y = self.up1(y, d2)
        y = self.up2(y, d1)
        return self.up3(y)

    def logits(self, x, attention=None):
        feats = self.rux_features(x)
        if attention is None:
            attention = self.attention(x)
        return self.head(attention_combine(feats, attention))

    def forward(self, x, attention=None):
        return torch.sigmoid(self.logits(x, attention))


def build_segmenter(config: SegmenterConfig) -> ARUXNet:
    return ARUXNet(config)


@torch.no_grad()
def segmenter_forward(model: ARUXNet, images) -> torch.Tensor:
    model.eval()
    images = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    return model(images)
