"""Chip container format, normalization, augmentation and dataset splitting.

A chip is one geographic tile: ``T`` monthly composites of ``C`` surface
reflectance bands plus a co-registered per-pixel yield map in kg/ha.
Chips are stored raw (un-normalized); normalization is applied on the fly
from a stats file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"CYPC"
FORMAT_VERSION = 1
CHIP_SUFFIX = ".cyp"

DEFAULT_BANDS = ("BLUE", "GREEN", "RED", "NIR_NARROW", "SWIR1", "SWIR2")
MONTHS = ("May", "June", "July", "August", "September")

# Channel-wise reference statistics of the HLS canola dataset (reflectance units).
REFERENCE_BAND_MEANS = (493.94, 832.45, 901.06, 2927.87, 2427.47, 1658.56)
REFERENCE_BAND_STDS = (250.38, 265.75, 481.92, 1038.83, 855.02, 855.37)


class ChipFormatError(ValueError):
    """Raised when a chip file has the wrong magic or version."""


class ChipLengthError(ChipFormatError):
    """Raised when a chip payload is truncated or has trailing bytes."""


class ChipValidationError(ValueError):
    """Raised when chip contents violate the container invariants."""


class DatasetError(ValueError):
    """Raised for degenerate statistics or invalid dataset splits."""


class InputMode(str, Enum):
    FLATTENED_CHANNELS = "FLATTENED_CHANNELS"
    PER_TIMESTEP = "PER_TIMESTEP"


@dataclass(frozen=True)
class ChipHeader:
    chip_id: str
    year: int
    lat: float
    lon: float
    T: int = 5
    C: int = 6
    H: int = 224
    W: int = 224
    band_names: tuple[str, ...] = DEFAULT_BANDS

    def __post_init__(self):
        # lat/lon are stored as float32 on disk
        object.__setattr__(self, "lat", float(np.float32(self.lat)))
        object.__setattr__(self, "lon", float(np.float32(self.lon)))
        object.__setattr__(self, "band_names", tuple(self.band_names))
        if self.T < 1 or self.C < 1 or self.H < 1 or self.W < 1:
            raise ChipValidationError(f"non-positive extent in header {self}")
        if len(self.band_names) != self.C:
            raise ChipValidationError(
                f"band_names has {len(self.band_names)} entries, expected C={self.C}"
            )


@dataclass
class Chip:
    header: ChipHeader
    bands: np.ndarray  # [T, C, H, W] float32 reflectance
    yield_map: np.ndarray  # [H, W] float32 kg/ha

    def __post_init__(self):
        self.bands = np.ascontiguousarray(self.bands, dtype=np.float32)
        self.yield_map = np.ascontiguousarray(self.yield_map, dtype=np.float32)
        validate_chip(self)


def validate_chip(chip: Chip) -> None:
    h = chip.header
    if chip.bands.shape != (h.T, h.C, h.H, h.W):
        raise ChipValidationError(
            f"bands shape {chip.bands.shape} does not match header {(h.T, h.C, h.H, h.W)}"
        )
    if chip.yield_map.shape != (h.H, h.W):
        raise ChipValidationError(
            f"yield_map shape {chip.yield_map.shape} does not match header {(h.H, h.W)}"
        )
    if not (np.isfinite(chip.bands).all() and np.isfinite(chip.yield_map).all()):
        raise ChipValidationError(f"chip {h.chip_id} contains non-finite values")
    if (chip.yield_map < 0).any():
        raise ChipValidationError(f"chip {h.chip_id} has negative yield values")


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def _pack_text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_chip(chip: Chip) -> bytes:
    validate_chip(chip)
    h = chip.header
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        _pack_text(h.chip_id),
        struct.pack("<I", h.year),
        struct.pack("<ff", h.lat, h.lon),
        struct.pack("<IIII", h.T, h.C, h.H, h.W),
    ]
    parts.extend(_pack_text(name) for name in h.band_names)
    parts.append(chip.bands.astype("<f4").tobytes(order="C"))
    parts.append(chip.yield_map.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChipLengthError(
                f"truncated chip: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode_chip(buf: bytes) -> Chip:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise ChipFormatError("bad magic: not a chip file")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise ChipFormatError(f"unsupported chip format version {version}")
    chip_id = r.text()
    (year,) = r.unpack("<I")
    lat, lon = r.unpack("<ff")
    T, C, H, W = r.unpack("<IIII")
    band_names = tuple(r.text() for _ in range(C))
    n_bands = T * C * H * W
    bands = np.frombuffer(r.take(4 * n_bands), dtype="<f4").reshape(T, C, H, W)
    ymap = np.frombuffer(r.take(4 * H * W), dtype="<f4").reshape(H, W)
    if r.pos != len(buf):
        raise ChipLengthError(f"{len(buf) - r.pos} trailing bytes after chip payload")
    header = ChipHeader(chip_id, year, lat, lon, T, C, H, W, band_names)
    return Chip(header, bands.astype(np.float32), ymap.astype(np.float32))


def payload_nbytes(header: ChipHeader) -> int:
    """Size of the array payload that follows the header fields."""
    return 4 * (header.T * header.C * header.H * header.W + header.H * header.W)


def write_chip(chip: Chip, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory {path.parent} does not exist")
    path.write_bytes(encode_chip(chip))


def read_chip(path: str | Path) -> Chip:
    return decode_chip(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Statistics and normalization
# ---------------------------------------------------------------------------


@dataclass
class BandStats:
    band_names: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.band_names = tuple(self.band_names)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if not (len(self.band_names) == len(self.means) == len(self.stds)):
            raise DatasetError("band stats lengths disagree")
        if not (self.stds > 0).all():
            raise DatasetError(f"degenerate band statistics, std={self.stds.tolist()}")

    @classmethod
    def reference(cls) -> "BandStats":
        return cls(DEFAULT_BANDS, REFERENCE_BAND_MEANS, REFERENCE_BAND_STDS)


@dataclass
class YieldStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DatasetError(f"yield std must be positive, got {self.std}")


def save_stats(path: str | Path, band_stats: BandStats, yield_stats: YieldStats) -> None:
    doc = {
        "band_names": list(band_stats.band_names),
        "means": band_stats.means.tolist(),
        "stds": band_stats.stds.tolist(),
        "yield_mean": yield_stats.mean,
        "yield_std": yield_stats.std,
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_stats(path: str | Path) -> tuple[BandStats, YieldStats]:
    doc = json.loads(Path(path).read_text())
    bs = BandStats(doc["band_names"], doc["means"], doc["stds"])
    return bs, YieldStats(float(doc["yield_mean"]), float(doc["yield_std"]))


class _Pooled:
    """Pairwise-merged count/mean/M2 (Chan et al.), float64."""

    def __init__(self, shape=()):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add(self, x: np.ndarray, axes) -> None:
        x = x.astype(np.float64)
        n = x.size if axes is None else x.size // x.shape[1]
        mean = x.mean(axis=axes)
        dev = x - (mean if axes is None else mean.reshape(1, -1, 1, 1))
        m2 = (dev**2).sum(axis=axes)
        total = self.n + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta**2 * (self.n * n / total)
        self.n = total

    def mean_std(self):
        return self.mean, np.sqrt(self.m2 / self.n)


def compute_stats(chips: Iterable[Chip]) -> tuple[BandStats, YieldStats]:
    """Population mean/std per band (pooled over pixels and time) and of yield."""
    band_acc = None
    yield_acc = _Pooled()
    names = None
    for chip in chips:
        if band_acc is None:
            names = chip.header.band_names
            band_acc = _Pooled((chip.header.C,))
        elif chip.header.band_names != names:
            raise DatasetError("chips disagree on band names")
        band_acc.add(chip.bands, axes=(0, 2, 3))
        yield_acc.add(chip.yield_map, axes=None)
    if band_acc is None:
        raise DatasetError("cannot compute statistics from an empty training split")
    bmean, bstd = band_acc.mean_std()
    ymean, ystd = yield_acc.mean_std()
    return BandStats(names, bmean, bstd), YieldStats(float(ymean), float(ystd))


def compute_band_stats(manifest: "DatasetManifest", split: str = "train") -> BandStats:
    return compute_stats(manifest.iter_chips(split))[0]


def normalize(chip: Chip, band_stats: BandStats) -> np.ndarray:
    """Per-band standardization of ``chip.bands``; returns float32 [T, C, H, W]."""
    if len(band_stats.means) != chip.header.C:
        raise DatasetError(
            f"stats carry {len(band_stats.means)} bands, chip has C={chip.header.C}"
        )
    mean = band_stats.means.reshape(1, -1, 1, 1)
    std = band_stats.stds.reshape(1, -1, 1, 1)
    return ((chip.bands.astype(np.float64) - mean) / std).astype(np.float32)


def standardize_yield(y, ys: YieldStats):
    return (np.asarray(y, dtype=np.float64) - ys.mean) / ys.std


def destandardize_yield(z, ys: YieldStats):
    return np.asarray(z, dtype=np.float64) * ys.std + ys.mean


def flatten_to_input(bands_normalized: np.ndarray, mode: InputMode | str) -> np.ndarray:
    """Arrange a [T, C, H, W] array for the encoder.

    FLATTENED_CHANNELS stacks time-major, so channel ``k = t * C + c``.
    """
    mode = InputMode(mode)
    T, C, H, W = bands_normalized.shape
    if mode is InputMode.FLATTENED_CHANNELS:
        return bands_normalized.reshape(T * C, H, W)
    return bands_normalized


def flat_channel_index(t: int, c: int, C: int) -> int:
    return t * C + c


def prepare_target(chip: Chip, ys: YieldStats) -> np.ndarray:
    return standardize_yield(chip.yield_map, ys).astype(np.float32)[None]


def augment(x: np.ndarray, y: np.ndarray, p: float, rng: np.random.Generator):
    """Random horizontal/vertical flips applied jointly to input and target.

    Flips act on the last two axes, so any leading layout works.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must lie in [0, 1], got {p}")
    hflip, vflip = rng.random(2) < p
    if hflip:
        x, y = x[..., ::-1], y[..., ::-1]
    if vflip:
        x, y = x[..., ::-1, :], y[..., ::-1, :]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenParams:
    H: int = 224
    W: int = 224
    T: int = 5
    C: int = 6
    smoothing_radius: float = 6.0
    yield_min: float = 800.0
    yield_max: float = 4200.0
    phenology: tuple[float, ...] = (0.25, 0.60, 1.00, 0.80, 0.30)
    base: tuple[float, ...] = (500.0, 830.0, 900.0, 2900.0, 2400.0, 1650.0)
    # NIR/SWIR carry the strongest positive response, RED responds negatively.
    gain: tuple[float, ...] = (60.0, 120.0, -500.0, 2000.0, 1400.0, 1100.0)
    noise: float = 150.0
    band_names: tuple[str, ...] = DEFAULT_BANDS

    def validate(self) -> None:
        if self.H < 1 or self.W < 1 or self.T < 1 or self.C < 1:
            raise ValueError("non-positive extent")
        if not 0 <= self.yield_min < self.yield_max:
            raise ValueError("yield range must satisfy 0 <= min < max")
        if self.smoothing_radius < 0 or self.noise < 0:
            raise ValueError("smoothing radius and noise must be non-negative")
        if len(self.phenology) != self.T:
            raise ValueError("phenology weights need one entry per time step")
        if not (len(self.base) == len(self.gain) == len(self.band_names) == self.C):
            raise ValueError("per-band parameters need one entry per band")


def _smooth_field(rng: np.random.Generator, H: int, W: int, radius: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    field_ = rng.standard_normal((H, W))
    if radius > 0:
        field_ = gaussian_filter(field_, sigma=radius, mode="wrap")
    return field_


def synthesize_chip(seed: int, params: GenParams = GenParams(), *, year: int = 2023,
                    chip_id: str | None = None) -> Chip:
    """Deterministic synthetic chip whose bands respond linearly to yield."""
    params.validate()
    rng = np.random.default_rng(seed)
    f = _smooth_field(rng, params.H, params.W, params.smoothing_radius)
    lo, hi = f.min(), f.max()
    unit = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
    # Per-chip sub-range so chips differ in their mean yield level.
    width = rng.uniform(0.35, 0.65)
    offset = rng.uniform(0.0, 1.0 - width)
    ymap = params.yield_min + (params.yield_max - params.yield_min) * (offset + width * unit)
    rel = ymap / params.yield_max
    w = np.asarray(params.phenology)[:, None, None, None]
    base = np.asarray(params.base)[None, :, None, None]
    gain = np.asarray(params.gain)[None, :, None, None]
    noise = rng.normal(0.0, params.noise, size=(params.T, params.C, params.H, params.W))
    bands = np.clip(base + gain * w * rel[None, None] + noise, 0.0, 10000.0)
    header = ChipHeader(
        chip_id=chip_id or f"syn{seed:08d}",
        year=year,
        lat=float(49.0 + rng.uniform(0, 4)),
        lon=float(-110.0 + rng.uniform(0, 13)),
        T=params.T, C=params.C, H=params.H, W=params.W,
        band_names=tuple(params.band_names),
    )
    return Chip(header, bands.astype(np.float32), ymap.astype(np.float32))


# ---------------------------------------------------------------------------
# Manifest and splitting
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    chip_id: str
    year: int
    path: str


@dataclass
class DatasetManifest:
    root: Path
    chips: list[ManifestEntry]
    val_years: list[int] = field(default_factory=list)
    stats_path: str = "stats.json"

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(c["chip_id"], int(c["year"]), c["path"]) for c in doc["chips"]]
        return cls(path.parent, entries, [int(y) for y in doc.get("val_years", [])],
                   doc.get("stats", "stats.json"))

    def save(self, path: str | Path | None = None) -> None:
        path = Path(path) if path else self.root / "manifest.json"
        doc = {
            "chips": [{"chip_id": e.chip_id, "year": e.year, "path": e.path} for e in self.chips],
            "val_years": list(self.val_years),
            "stats": self.stats_path,
        }
        path.write_text(json.dumps(doc, indent=2))

    def load_stats(self) -> tuple[BandStats, YieldStats]:
        return load_stats(self.root / self.stats_path)

    def split(self, which: str) -> list[ManifestEntry]:
        train, val = split_by_year(self.chips, self.val_years)
        if which == "train":
            return train
        if which == "val":
            return val
        if which == "all":
            return list(self.chips)
        raise DatasetError(f"unknown split {which!r}")

    def iter_chips(self, which: str = "train"):
        for e in self.split(which):
            yield read_chip(self.root / e.path)


def split_by_year(entries: Sequence[ManifestEntry], val_years: Iterable[int]):
    val_years = set(val_years)
    if not val_years:
        raise DatasetError("val_years must be nonempty")
    train = [e for e in entries if e.year not in val_years]
    val = [e for e in entries if e.year in val_years]
    if not train or not val:
        raise DatasetError(
            f"year split leaves an empty side (train={len(train)}, val={len(val)})"
        )
    return train, val


def generate_dataset(out: str | Path, chips_per_year: int, years: Sequence[int],
                     val_years: Sequence[int], params: GenParams = GenParams(),
                     seed: int = 0) -> DatasetManifest:
    """Write synthetic chips, a manifest and train-split stats under ``out``."""
    out = Path(out)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    entries = []
    seeds = np.random.SeedSequence(seed).spawn(len(years) * chips_per_year)
    k = 0
    for year in years:
        for i in range(chips_per_year):
            chip_seed = int(seeds[k].generate_state(1)[0])
            k += 1
            cid = f"{year}_{i:05d}"
            chip = synthesize_chip(chip_seed, params, year=year, chip_id=cid)
            rel = f"chips/{cid}{CHIP_SUFFIX}"
            write_chip(chip, out / rel)
            entries.append(ManifestEntry(cid, year, rel))
    manifest = DatasetManifest(out, entries, list(val_years))
    manifest.split("train")  # validates the split
    bs, ys = compute_stats(manifest.iter_chips("train"))
    save_stats(out / manifest.stats_path, bs, ys)
    manifest.save()
    return manifest
