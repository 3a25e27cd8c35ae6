"""Compact encoder-decoder with skip connections.

Encoder block k: 3x3 conv + ReLU at the current resolution (kept as the skip
feature), then 2x max-pool. A bottleneck conv runs at the coarsest scale. Each decoder block upsamples 2x bilinearly, concatenates the
matching encoder feature, and applies 3x3 conv + ReLU. Decoding stops one
level short of the input, so the output is exactly half resolution.

The 1-channel head works in normalized units and ``forward`` multiplies it
by a fixed gain equal to the width of the target range (990 for 10..1000),
so Adam's per-step parameter moves translate into useful output moves.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError


def _he_uniform_(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        conv.bias.zero_()


class ReconNet(nn.Module):
    def __init__(self, channels=(16, 32, 64), in_channels: int = 3, target_range=(10.0, 1000.0),
                 seed: int = 0, zero_head: bool = False, decoder_channels=(64, 64),
                 bottleneck_channels: int = 128, pool: str = "max"):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("need at least two encoder blocks")
        if len(decoder_channels) != len(channels) - 1:
            raise ValueError("need one decoder width per decoder block (encoder depth - 1)")
        if pool not in ("max", "avg"):
            raise ValueError("pool must be 'max' or 'avg'")
        self.channels = tuple(int(c) for c in channels)
        self.decoder_channels = tuple(int(c) for c in decoder_channels)
        self.bottleneck_channels = int(bottleneck_channels)
        self.pool = pool
        self.target_range = (float(target_range[0]), float(target_range[1]))
        self.seed = int(seed)
        chans = (in_channels,) + self.channels
        self.encoder = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(channels)))
        self.bottleneck = nn.Conv2d(chans[-1], self.bottleneck_channels, 3, padding=1)
        # decoder block k joins the upsampled map with encoder feature K-k
        dec = []
        prev = self.bottleneck_channels
        for k in range(len(channels) - 1):
            skip = self.channels[-1 - k]
            out = self.decoder_channels[k]
            dec.append(nn.Conv2d(prev + skip, out, 3, padding=1))
            prev = out
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(prev, 1, 3, padding=1)
        gen = torch.Generator().manual_seed(self.seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                _he_uniform_(m, gen)
        if zero_head:
            with torch.no_grad():
                self.head.weight.zero_()

    @property
    def multiple(self) -> int:
        return 2 ** len(self.channels)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.encoder[0].in_channels:
            raise ShapeError(f"expected N x {self.encoder[0].in_channels} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ShapeError(f"input {h}x{w} must be divisible by {self.multiple} in both dimensions")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """N x 3 x H x W -> N x 1 x H/2 x W/2 in target units."""
        self.check_input(x)
        skips = []
        for conv in self.encoder:
            x = F.relu(conv(x))
            skips.append(x)
            x = F.max_pool2d(x, 2) if self.pool == "max" else F.avg_pool2d(x, 2)
        x = F.relu(self.bottleneck(x))
        for k, conv in enumerate(self.decoder):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)
            x = F.relu(conv(torch.cat([x, skips[-1 - k]], dim=1)))
        lo, hi = self.target_range
        return (hi - lo) * self.head(x)

    def config(self) -> dict:
        return {"channels": list(self.channels), "in_channels": self.encoder[0].in_channels,
                "decoder_channels": list(self.decoder_channels),
                "bottleneck_channels": self.bottleneck_channels, "pool": self.pool,
                "target_range": list(self.target_range), "seed": self.seed}


class TinyConvNet(nn.Module):
    """Two 3x3 convolutions with a ReLU between; full-resolution output."""

    def __init__(self, in_channels: int = 3, hidden: int = 4, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        _he_uniform_(self.conv1, gen)
        _he_uniform_(self.conv2, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(x)))
