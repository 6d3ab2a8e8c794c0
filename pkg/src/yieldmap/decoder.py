"""UperNet-style decoder over four tapped encoder depths.

tokens -> 2D maps (mean over frames) -> 4-level pyramid at 4x/2x/1x/0.5x
-> top-down FPN fusion -> concat at finest extent -> PSP -> 3x3 bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DecoderConfig:
    fpn_channels: int = 64
    psp_pool_sizes: tuple[int, ...] = (1, 2, 3, 6)
    scales: tuple[float, ...] = (4, 2, 1, 0.5)
    aux_level: int = 1  # index into the fine->coarse fused levels

    def __post_init__(self):
        self.psp_pool_sizes = tuple(int(s) for s in self.psp_pool_sizes)
        self.scales = tuple(float(s) for s in self.scales)
        if self.scales != (4.0, 2.0, 1.0, 0.5):
            raise ValueError(f"only the (4, 2, 1, 0.5) pyramid is supported, got {self.scales}")
        if list(self.psp_pool_sizes) != sorted(set(self.psp_pool_sizes)):
            raise ValueError("psp_pool_sizes must be strictly ascending")
        if not 0 <= self.aux_level < 4:
            raise ValueError(f"aux_level must index one of 4 levels, got {self.aux_level}")


def tokens_to_map(tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """[B, T*gh*gw, D] -> [B, D, gh, gw], averaging over the T frame grids."""
    B, N, D = tokens.shape
    per_frame = grid_h * grid_w
    if N % per_frame:
        raise ValueError(f"{N} tokens do not tile a {grid_h}x{grid_w} grid")
    frames = tokens.reshape(B, N // per_frame, grid_h, grid_w, D)
    return frames.mean(dim=1).permute(0, 3, 1, 2)


def map_to_tokens(fmap: torch.Tensor) -> torch.Tensor:
    return fmap.flatten(2).transpose(1, 2)


class Pyramid(nn.Module):
    """Single-scale ViT maps to a 4-level pyramid, projected to fpn_channels.

    Purely linear (no biases) so a zero input yields a zero pyramid.
    """

    def __init__(self, dim: int, out_ch: int):
        super().__init__()
        self.up4 = nn.Sequential(
            nn.ConvTranspose2d(dim, dim, 2, stride=2, bias=False),
            nn.ConvTranspose2d(dim, dim, 2, stride=2, bias=False),
        )
        self.up2 = nn.ConvTranspose2d(dim, dim, 2, stride=2, bias=False)
        self.down2 = nn.MaxPool2d(2, stride=2)
        self.proj = nn.ModuleList(nn.Conv2d(dim, out_ch, 1, bias=False) for _ in range(4))

    def forward(self, maps: list[torch.Tensor]) -> list[torch.Tensor]:
        ops = (self.up4, self.up2, nn.Identity(), self.down2)
        return [proj(op(m)) for proj, op, m in zip(self.proj, ops, maps)]


class FPN(nn.Module):
    def __init__(self, ch: int, levels: int = 4):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(ch, ch, 1) for _ in range(levels))
        self.refine = nn.ModuleList(nn.Conv2d(ch, ch, 3, padding=1) for _ in range(levels))

    def forward(self, pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        # pyramid is ordered fine -> coarse
        n = len(pyramid)
        merged: list[torch.Tensor] = [None] * n  # type: ignore[list-item]
        top = None
        for k in reversed(range(n)):
            lat = self.lateral[k](pyramid[k])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            merged[k] = top = lat
        return [F.relu(self.refine[k](merged[k])) for k in range(n)]


class PSP(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, pool_sizes=(1, 2, 3, 6)):
        super().__init__()
        self.pool_sizes = tuple(pool_sizes)
        self.branches = nn.ModuleList(nn.Conv2d(in_ch, out_ch, 1) for _ in self.pool_sizes)
        self.fuse = nn.Conv2d(in_ch + out_ch * len(self.pool_sizes), out_ch, 3, padding=1)

    def concat(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if min(h, w) < max(self.pool_sizes):
            raise ValueError(f"map extent {h}x{w} smaller than pool size {max(self.pool_sizes)}")
        outs = [x]
        for s, conv in zip(self.pool_sizes, self.branches):
            pooled = F.relu(conv(F.adaptive_avg_pool2d(x, s)))
            outs.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fuse(self.concat(x)))


class UperNetDecoder(nn.Module):
    def __init__(self, embed_dim: int, grid: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.grid = grid
        ch = cfg.fpn_channels
        self.pyramid = Pyramid(embed_dim, ch)
        self.fpn = FPN(ch)
        self.psp = PSP(4 * ch, ch, cfg.psp_pool_sizes)
        self.bottleneck = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, taps: list[torch.Tensor]):
        """Returns (main feature map at 4x grid, aux feature map)."""
        maps = [tokens_to_map(t, self.grid, self.grid) for t in taps]
        fused = self.fpn(self.pyramid(maps))
        size = fused[0].shape[-2:]
        cat = torch.cat(
            [fused[0]] + [F.interpolate(f, size=size, mode="bilinear", align_corners=False)
                          for f in fused[1:]],
            dim=1,
        )
        main = F.relu(self.bottleneck(self.psp(cat)))
        return main, fused[self.cfg.aux_level]
