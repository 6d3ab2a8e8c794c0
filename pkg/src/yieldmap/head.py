"""Dense regression heads producing [B, 1, H, W] standardized yield."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import PSP


@dataclass
class HeadConfig:
    channels: tuple[int, ...] | None = None  # default: fpn -> fpn/2 -> fpn/4 -> 1
    dropout: float = 0.1
    out_size: int = 96

    def schedule(self, in_ch: int) -> tuple[int, ...]:
        sched = tuple(self.channels) if self.channels else (in_ch, in_ch // 2, in_ch // 4, 1)
        if sched[0] != in_ch or sched[-1] != 1 or len(sched) != 4:
            raise ValueError(f"head schedule must run {in_ch} -> ... -> 1 over 3 convs, got {sched}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        return sched


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError("non-finite values in head input")


class RegressionHead(nn.Module):
    """conv3x3-BN-ReLU-dropout twice, then conv3x3 to one channel and bilinear upsample.

    No output activation: predictions are unbounded standardized yield.
    """

    def __init__(self, in_ch: int, cfg: HeadConfig):
        super().__init__()
        c0, c1, c2, c3 = cfg.schedule(in_ch)
        self.out_size = cfg.out_size
        self.body = nn.Sequential(
            nn.Conv2d(c0, c1, 3, padding=1),
            nn.BatchNorm2d(c1, momentum=0.1),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.BatchNorm2d(c2, momentum=0.1),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
        )
        self.out = nn.Conv2d(c2, c3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_finite(x)
        y = self.out(self.body(x))
        return F.interpolate(y, size=(self.out_size, self.out_size), mode="bilinear",
                             align_corners=False)


class AuxHead(nn.Module):
    """Reduced decoder for deep supervision: PSP, conv3x3, conv1x1 to one channel."""

    def __init__(self, in_ch: int, cfg: HeadConfig, pool_sizes=(1, 2, 3, 6)):
        super().__init__()
        hidden = max(in_ch // 2, 1)
        self.out_size = cfg.out_size
        self.psp = PSP(in_ch, hidden, pool_sizes)
        self.conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_finite(x)
        y = self.out(F.relu(self.conv(self.psp(x))))
        return F.interpolate(y, size=(self.out_size, self.out_size), mode="bilinear",
                             align_corners=False)
