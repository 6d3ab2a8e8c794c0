"""Training objectives: pixel MSE, Huber, and deep-supervised total loss.

Every loss is a per-chip pixel mean, then a mean over the batch, so its
scale does not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

AUX_WEIGHT = 0.2


class LossMode(str, Enum):
    MSE = "MSE"
    HUBER = "HUBER"
    MSE_AUX = "MSE_AUX"


@dataclass
class LossConfig:
    mode: LossMode = LossMode.MSE_AUX
    huber_delta: float = 1.0
    aux_weight: float = AUX_WEIGHT

    def __post_init__(self):
        self.mode = LossMode(self.mode)
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")

    @property
    def uses_aux(self) -> bool:
        return self.mode is LossMode.MSE_AUX


def _check(y: torch.Tensor, y_hat: torch.Tensor) -> None:
    if y.shape != y_hat.shape:
        raise ValueError(f"prediction shape {tuple(y_hat.shape)} != target shape {tuple(y.shape)}")


def _reduce(per_pixel: torch.Tensor) -> torch.Tensor:
    if per_pixel.ndim <= 2:
        return per_pixel.mean()
    # mean over the trailing [1, H, W] / [H, W] of each chip, then over chips
    return per_pixel.flatten(1).mean(dim=1).mean()


def mse_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    _check(y, y_hat)
    return _reduce((y - y_hat) ** 2)


def huber_loss(y: torch.Tensor, y_hat: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    _check(y, y_hat)
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    e = (y - y_hat).abs()
    per_pixel = torch.where(e <= delta, 0.5 * e**2, delta * e - 0.5 * delta**2)
    return _reduce(per_pixel)


def base_loss(cfg: LossConfig):
    if cfg.mode is LossMode.HUBER:
        return lambda y, y_hat: huber_loss(y, y_hat, cfg.huber_delta)
    return mse_loss


def total_loss(main_pred: torch.Tensor, aux_pred: torch.Tensor, y: torch.Tensor,
               base=mse_loss, aux_weight: float = AUX_WEIGHT):
    """Main loss plus weighted auxiliary loss under the same base objective.

    Returns (total, main, aux) so the components can be logged.
    """
    main = base(y, main_pred)
    aux = base(y, aux_pred)
    return main + aux_weight * aux, main, aux


def compute_loss(cfg: LossConfig, main_pred, aux_pred, y):
    base = base_loss(cfg)
    if cfg.uses_aux:
        return total_loss(main_pred, aux_pred, y, base, cfg.aux_weight)
    main = base(y, main_pred)
    return main, main, None
