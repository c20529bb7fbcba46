"""Free-form networks F(c_in x, c_noise, y).

A small U-Net with noise-conditioned residual blocks (adaptive scale and
shift from the noise embedding), and a 10-parameter per-pixel toy network
used where gradients are checked against finite differences.
"""

import math

import torch
from torch import nn
from torch.nn.functional import silu

from pfcm.field.schema import ArchDescriptor


def group_count(channels: int) -> int:
    return math.gcd(8, channels)


class PositionalEmbedding(nn.Module):
    def __init__(self, num_channels: int, max_positions: int = 10_000):
        super().__init__()
        self.num_channels = num_channels
        self.max_positions = max_positions

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        freqs = torch.arange(
            self.num_channels // 2, dtype=torch.float32, device=x.device
        )
        freqs = (1 / self.max_positions) ** (freqs / (self.num_channels // 2))
        x = torch.outer(x.float(), freqs)
        return torch.cat([x.cos(), x.sin()], dim=1)


class ResBlock(nn.Module):
    def __init__(
        self, in_channels: int, out_channels: int, emb_channels: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.dropout = dropout
        self.norm0 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv0 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.affine = nn.Linear(emb_channels, 2 * out_channels)
        self.norm1 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv1 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        nn.init.zeros_(self.conv1.weight)
        nn.init.zeros_(self.conv1.bias)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else None
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        orig = x
        x = self.conv0(silu(self.norm0(x)))
        scale, shift = self.affine(emb)[:, :, None, None].chunk(2, dim=1)
        x = silu(torch.addcmul(shift, self.norm1(x), scale + 1))
        x = self.conv1(
            nn.functional.dropout(x, p=self.dropout, training=self.training)
        )
        return x + (self.skip(orig) if self.skip is not None else orig)


class UNet(nn.Module):
    """Encoder/decoder with one residual block per resolution."""

    def __init__(
        self, in_channels: int, width: int = 32, levels: int = 2,
        dropout: float = 0.0,
    ):
        super().__init__()
        emb_channels = 4 * width
        self.levels = levels
        self.embed = PositionalEmbedding(width)
        self.map0 = nn.Linear(width, emb_channels)
        self.map1 = nn.Linear(emb_channels, emb_channels)
        self.conv_in = nn.Conv2d(in_channels, width, 3, padding=1)

        channels = [width * 2**level for level in range(levels)]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        ch = width
        for level, out in enumerate(channels):
            self.enc.append(ResBlock(ch, out, emb_channels, dropout))
            ch = out
            if level < levels - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = ResBlock(ch, ch, emb_channels, dropout)

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for level in reversed(range(levels)):
            skip_ch = channels[level]
            if level < levels - 1:
                self.up.append(nn.Upsample(scale_factor=2, mode='nearest'))
            self.dec.append(
                ResBlock(ch + skip_ch, skip_ch, emb_channels, dropout)
            )
            ch = skip_ch

        self.norm_out = nn.GroupNorm(group_count(ch), ch)
        self.conv_out = nn.Conv2d(ch, 1, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(
        self, x: torch.Tensor, noise_labels: torch.Tensor
    ) -> torch.Tensor:
        emb = silu(self.map1(silu(self.map0(self.embed(noise_labels)))))

        h = self.conv_in(x)
        skips = []
        for level, block in enumerate(self.enc):
            h = block(h, emb)
            skips.append(h)
            if level < self.levels - 1:
                h = self.down[level](h)

        h = self.mid(h, emb)

        for k, block in enumerate(self.dec):
            if k > 0:
                h = self.up[k - 1](h)
            h = block(torch.cat([h, skips.pop()], dim=1), emb)

        return self.conv_out(silu(self.norm_out(h)))


class ToyNet(nn.Module):
    """Per-pixel two-unit tanh network on (x_in, y, c_noise): 10 weights."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.hidden = nn.Conv2d(3, 2, 1)
        self.out = nn.Conv2d(2, 1, 1, bias=False)
        self.in_channels = in_channels

    def forward(
        self, x: torch.Tensor, noise_labels: torch.Tensor
    ) -> torch.Tensor:
        if self.in_channels == 1:
            x = torch.cat([x, torch.zeros_like(x)], dim=1)
        labels = noise_labels.to(x.dtype)[:, None, None, None]
        h = torch.cat([x, labels.expand_as(x[:, :1])], dim=1)
        return self.out(torch.tanh(self.hidden(h)))


def build_network(arch: ArchDescriptor, in_channels: int) -> nn.Module:
    if arch.kind == 'toy':
        return ToyNet(in_channels)
    return UNet(
        in_channels, width=arch.width, levels=arch.levels,
        dropout=arch.dropout,
    )
