"""Temporal attention and spectral importance analyses, plus map exports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .chipstore import (
    MONTHS,
    BandStats,
    Chip,
    DatasetManifest,
    InputMode,
    YieldStats,
    destandardize_yield,
    flatten_to_input,
    normalize,
    read_chip,
)
from .encoder import AttentionRecord, EncoderConfig
from .model import YieldModel


class UnsupportedModeError(ValueError):
    """Temporal attention needs time-indexed tokens (PER_TIMESTEP mode)."""


@dataclass
class TemporalAttentionMatrix:
    layer: int
    matrix: np.ndarray  # [T, T], rows = source month, cols = target month
    months: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"layer": self.layer, "months": list(self.months), "matrix": self.matrix.tolist()}


def default_layers(cfg: EncoderConfig) -> tuple[int, int]:
    """The middle and last decoder taps (2nd and 4th of four): layers 4 and 8 at desk scale."""
    taps = cfg.tap_layers
    return taps[len(taps) // 2 - 1], taps[-1]


def _month_labels(T: int) -> tuple[str, ...]:
    return MONTHS[:T] if T <= len(MONTHS) else tuple(f"t{i}" for i in range(T))


def month_block_means(weights: torch.Tensor | np.ndarray, token_time: np.ndarray) -> np.ndarray:
    """Mean attention between month groups: [..., N, N] -> [T, T], averaged over leading axes."""
    a = torch.as_tensor(weights, dtype=torch.float64)
    a = a.reshape(-1, a.shape[-2], a.shape[-1]).mean(dim=0)  # average batch and heads
    T = int(token_time.max()) + 1
    onehot = torch.zeros(len(token_time), T, dtype=torch.float64)
    onehot[torch.arange(len(token_time)), torch.as_tensor(token_time)] = 1.0
    counts = onehot.sum(dim=0)
    block_sum = onehot.T @ a @ onehot
    return (block_sum / torch.outer(counts, counts)).numpy()


def temporal_attention(records: list[AttentionRecord], layer: int,
                       cfg: EncoderConfig) -> TemporalAttentionMatrix:
    if cfg.mode is not InputMode.PER_TIMESTEP:
        raise UnsupportedModeError(
            "temporal attention requires PER_TIMESTEP tokenization; FLATTENED_CHANNELS "
            "tokens mix all months into every token"
        )
    rec = next((r for r in records if r.layer == layer), None)
    if rec is None:
        raise KeyError(f"no attention captured for layer {layer}")
    m = month_block_means(rec.weights, cfg.token_index()[:, 0])
    return TemporalAttentionMatrix(layer, _renormalize(m), _month_labels(cfg.num_frames))


def _renormalize(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=1, keepdims=True)


def receiving_score(matrix: TemporalAttentionMatrix | np.ndarray) -> np.ndarray:
    m = matrix.matrix if isinstance(matrix, TemporalAttentionMatrix) else np.asarray(matrix)
    return m.sum(axis=0)


def spectral_importance(patch_weight: torch.Tensor | np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Per-band L2 norm of the patch projection weights, normalized to sum 1.

    ``patch_weight`` is the [D, C_in, p, p] convolution kernel. With flattened
    input channels, band ``c`` owns input channels ``t * C + c`` for every t.
    """
    w = torch.as_tensor(patch_weight, dtype=torch.float64).detach()
    C = cfg.in_chans
    if cfg.mode is InputMode.FLATTENED_CHANNELS:
        w = w.reshape(w.shape[0], cfg.num_frames, C, *w.shape[2:]).transpose(1, 2)
    else:
        w = w[:, :, None]
    per_band = w.transpose(0, 1).reshape(C, -1).norm(dim=1).numpy()
    total = per_band.sum()
    if total == 0:
        return np.full(C, 1.0 / C)
    return per_band / total


# ---------------------------------------------------------------------------
# Map export
# ---------------------------------------------------------------------------


def write_pgm16(path: str | Path, values: np.ndarray, vmin: float, vmax: float) -> None:
    """Binary 16-bit PGM, linearly mapping [vmin, vmax] onto [0, 65535]."""
    values = np.asarray(values, dtype=np.float64)
    span = vmax - vmin
    scaled = np.zeros_like(values) if span <= 0 else (values - vmin) / span
    q = np.round(np.clip(scaled, 0.0, 1.0) * 65535).astype(">u2")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype).reshape(h, w)


@torch.no_grad()
def predict_chip(model: YieldModel, chip: Chip, band_stats: BandStats,
                 yield_stats: YieldStats) -> np.ndarray:
    """Full-resolution kg/ha prediction, clamped at 0."""
    model.eval()
    x = flatten_to_input(normalize(chip, band_stats), model.cfg.encoder.mode)
    ll = torch.tensor([[chip.header.lat, chip.header.lon]], dtype=torch.float32)
    z = model(torch.from_numpy(x)[None], ll).main[0, 0].numpy()
    return np.maximum(destandardize_yield(z, yield_stats), 0.0)


def export_maps(prefix: str | Path, prediction: np.ndarray, truth: np.ndarray) -> dict:
    """Write prediction/truth/residual PGMs and a JSON sidecar of kg/ha ranges.

    Residual is prediction minus truth.
    """
    prefix = Path(prefix)
    residual = prediction - truth
    lo = float(min(prediction.min(), truth.min()))
    hi = float(max(prediction.max(), truth.max()))
    rabs = float(np.abs(residual).max())
    ranges = {
        "prediction": [lo, hi],
        "truth": [lo, hi],
        "residual": [-rabs, rabs],
    }
    maps = {"prediction": prediction, "truth": truth, "residual": residual}
    files = {}
    for key, arr in maps.items():
        path = prefix.parent / f"{prefix.name}_{key}.pgm"
        write_pgm16(path, arr, *ranges[key])
        files[key] = path.name
    sidecar = {
        "units": "kg/ha",
        "height": int(truth.shape[0]),
        "width": int(truth.shape[1]),
        "ranges": ranges,
        "files": files,
        "residual_convention": "prediction - truth",
    }
    prefix.parent.joinpath(f"{prefix.name}_maps.json").write_text(json.dumps(sidecar, indent=2))
    return sidecar


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@torch.no_grad()
def explain(model: YieldModel, manifest: DatasetManifest, layers=None, split: str = "val",
            max_chips: int | None = 32, batch_size: int = 8,
            map_prefix: str | Path | None = None) -> dict:
    cfg = model.cfg.encoder
    if cfg.mode is not InputMode.PER_TIMESTEP:
        raise UnsupportedModeError(
            "this checkpoint uses FLATTENED_CHANNELS tokenization; month-by-month attention "
            "is undefined because every token mixes all time steps"
        )
    layers = tuple(layers) if layers else default_layers(cfg)
    for layer in layers:
        if not 1 <= layer <= cfg.depth:
            raise ValueError(f"layer {layer} outside 1..{cfg.depth}")
    band_stats, yield_stats = manifest.load_stats()
    entries = manifest.split(split)[:max_chips]
    if not entries:
        raise ValueError(f"split {split!r} has no chips")
    token_time = cfg.token_index()[:, 0]
    sums = {layer: np.zeros((cfg.num_frames, cfg.num_frames)) for layer in layers}
    count = 0
    model.eval()
    first = None
    for start in range(0, len(entries), batch_size):
        chips = [read_chip(manifest.root / e.path) for e in entries[start:start + batch_size]]
        if first is None:
            first = chips[0]
        x = np.stack([flatten_to_input(normalize(c, band_stats), cfg.mode) for c in chips])
        ll = torch.tensor([[c.header.lat, c.header.lon] for c in chips], dtype=torch.float32)
        out = model(torch.from_numpy(x), ll, capture=True)
        for rec in out.attention:
            if rec.layer in sums:
                sums[rec.layer] += month_block_means(rec.weights, token_time) * len(chips)
        count += len(chips)

    report = {"split": split, "n_chips": count, "layers": [], "band_names": list(band_stats.band_names)}
    for layer in layers:
        m = TemporalAttentionMatrix(layer, _renormalize(sums[layer] / count),
                                    _month_labels(cfg.num_frames))
        entry = m.to_dict()
        entry["receiving_score"] = receiving_score(m).tolist()
        report["layers"].append(entry)
    imp = spectral_importance(model.encoder.patch_embed.proj.weight, cfg)
    report["spectral_importance"] = dict(zip(band_stats.band_names, imp.tolist()))
    if map_prefix is not None:
        pred = predict_chip(model, first, band_stats, yield_stats)
        report["maps"] = export_maps(map_prefix, pred, first.yield_map.astype(np.float64))
        report["maps"]["chip_id"] = first.header.chip_id
    return report
