"""Pixel-pooled regression metrics and agricultural unit conversions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

ACRES_PER_HECTARE = 2.4710538146716536
KG_PER_LB = 0.45359237
CANOLA_BUSHEL_KG = 50 * KG_PER_LB  # 22.6796 kg
KG_HA_PER_BU_AC = CANOLA_BUSHEL_KG * ACRES_PER_HECTARE  # ~56.04

UNITS = ("kg_ha", "kg_ac", "bu_ac")


class MetricError(ValueError):
    pass


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise MetricError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise MetricError("metrics need at least one value")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def r2(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        raise MetricError("R^2 undefined for constant targets")
    return float(1.0 - np.sum((y - y_hat) ** 2) / sst)


def pearson(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    dy, dp = y - y.mean(), y_hat - y_hat.mean()
    sy, sp = np.sqrt(np.mean(dy**2)), np.sqrt(np.mean(dp**2))
    if sy == 0 or sp == 0:
        raise MetricError("Pearson correlation undefined for zero variance")
    return float(np.clip(np.mean(dy * dp) / (sy * sp), -1.0, 1.0))


def convert_units(value_kg_ha, unit: str):
    """Convert a kg/ha quantity (yield or error magnitude) to ``unit``."""
    if unit == "kg_ha":
        return value_kg_ha
    if unit == "kg_ac":
        return value_kg_ha / ACRES_PER_HECTARE
    if unit == "bu_ac":
        return value_kg_ha / KG_HA_PER_BU_AC
    raise MetricError(f"unknown unit {unit!r}; expected one of {UNITS}")


class MetricAccumulator:
    """Streaming, mergeable accumulator of pooled-pixel regression statistics.

    Keeps count, means and centered (co)moments, combined pairwise so that
    shard-and-merge agrees with a two-pass computation.
    """

    def __init__(self):
        self.n = 0
        self.mean_y = 0.0
        self.mean_p = 0.0
        self.m2_y = 0.0
        self.m2_p = 0.0
        self.c_yp = 0.0
        self.sse = 0.0
        self.sae = 0.0

    def update(self, y, y_hat) -> "MetricAccumulator":
        y, y_hat = _pair(y, y_hat)
        other = MetricAccumulator()
        other.n = y.size
        other.mean_y, other.mean_p = y.mean(), y_hat.mean()
        dy, dp = y - other.mean_y, y_hat - other.mean_p
        other.m2_y = float(dy @ dy)
        other.m2_p = float(dp @ dp)
        other.c_yp = float(dy @ dp)
        e = y - y_hat
        other.sse = float(e @ e)
        other.sae = float(np.abs(e).sum())
        return self.merge(other)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if other.n == 0:
            return self
        n = self.n + other.n
        f = self.n * other.n / n
        dy = other.mean_y - self.mean_y
        dp = other.mean_p - self.mean_p
        self.m2_y += other.m2_y + dy * dy * f
        self.m2_p += other.m2_p + dp * dp * f
        self.c_yp += other.c_yp + dy * dp * f
        self.mean_y += dy * other.n / n
        self.mean_p += dp * other.n / n
        self.sse += other.sse
        self.sae += other.sae
        self.n = n
        return self

    def rmse(self) -> float:
        return float(np.sqrt(self.sse / self.n))

    def mae(self) -> float:
        return self.sae / self.n

    def r2(self) -> float:
        if self.m2_y == 0:
            raise MetricError("R^2 undefined for constant targets")
        return float(1.0 - self.sse / self.m2_y)

    def pearson(self) -> float:
        if self.m2_y == 0 or self.m2_p == 0:
            raise MetricError("Pearson correlation undefined for zero variance")
        return float(np.clip(self.c_yp / np.sqrt(self.m2_y * self.m2_p), -1.0, 1.0))


@dataclass
class EvalReport:
    rmse: dict
    mae: dict
    r2: float
    pearson: float | None  # None when predictions have zero variance
    n_pixels: int
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _with_units(std_value: float, yield_std: float) -> dict:
    kg_ha = std_value * yield_std
    out = {"standardized": std_value}
    out.update({u: float(convert_units(kg_ha, u)) for u in UNITS})
    return out


def destandardized_report(rmse_std: float, mae_std: float, r2_value: float,
                          pearson_value: float, yield_std: float, n_pixels: int = 0,
                          split: str = "val") -> EvalReport:
    """Error magnitudes scale by the yield std; R^2 and Pearson are scale-free."""
    if not yield_std > 0:
        raise MetricError("yield std must be positive")
    return EvalReport(
        rmse=_with_units(rmse_std, yield_std),
        mae=_with_units(mae_std, yield_std),
        r2=r2_value,
        pearson=pearson_value,
        n_pixels=n_pixels,
        split=split,
    )


def report_from_accumulator(acc: MetricAccumulator, yield_std: float,
                            split: str = "val") -> EvalReport:
    # a constant prediction is a legitimate model output; its correlation is undefined
    pearson_value = acc.pearson() if acc.m2_p > 0 else None
    return destandardized_report(acc.rmse(), acc.mae(), acc.r2(), pearson_value,
                                 yield_std, acc.n, split)
