"""Training loop: AdamW with decoupled decay, per-epoch cosine annealing,
best-R^2 checkpointing and seeded determinism.

Gradients come from torch autograd; ``tests/test_gradcheck.py`` holds the
independent central-difference oracle for them.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .chipstore import (
    DatasetManifest,
    InputMode,
    YieldStats,
    augment,
    flatten_to_input,
    normalize,
    prepare_target,
    read_chip,
)
from .metrics import EvalReport, MetricAccumulator, report_from_accumulator
from .model import PARAM_GROUPS, ModelConfig, YieldModel
from .objectives import LossConfig, compute_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class CheckpointError(OSError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 3e-4
    lr_min: float = 1e-8
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    flip_prob: float = 0.2
    threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_max > self.lr_min > 0:
            raise ValueError(f"need lr_max > lr_min > 0, got {self.lr_max}, {self.lr_min}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["loss"]["mode"] = self.loss.mode.value
        return d


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if total == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def decays(name: str, param: torch.Tensor) -> bool:
    """Biases and norm scales/shifts (all <2-D tensors) are exempt from weight decay."""
    return param.ndim >= 2


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               state: AdamWState, lr: float, weight_decay: float = 0.1,
               betas=(0.9, 0.999), eps: float = 1e-8) -> AdamWState:
    """One in-place AdamW update.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    Parameters whose gradient is None are left untouched.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        update = (m / bc1) / ((v / bc2).sqrt() + eps)
        if weight_decay and decays(name, p):
            update = update + weight_decay * p
        p.sub_(lr * update)
    return state


def backward(loss: torch.Tensor, model: torch.nn.Module) -> dict[str, torch.Tensor | None]:
    """Reverse-mode gradients of a scalar loss for every named parameter."""
    for p in model.parameters():
        p.grad = None
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(
                f"non-finite gradient in parameter group '{name.split('.', 1)[0]}' ({name})"
            )
        grads[name] = p.grad
    return grads


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class ChipDataset:
    """All chips of one split, normalized and held in memory."""

    def __init__(self, manifest: DatasetManifest, split: str, mode: InputMode):
        band_stats, self.yield_stats = manifest.load_stats()
        entries = manifest.split(split)
        xs, ys, ll, ids = [], [], [], []
        for e in entries:
            path = manifest.root / e.path
            if not path.exists():
                raise FileNotFoundError(f"missing chip {path}")
            chip = read_chip(path)
            xs.append(flatten_to_input(normalize(chip, band_stats), mode))
            ys.append(prepare_target(chip, self.yield_stats))
            ll.append((chip.header.lat, chip.header.lon))
            ids.append(chip.header.chip_id)
        self.x = np.stack(xs)
        self.y = np.stack(ys)
        self.latlon = np.asarray(ll, dtype=np.float32)
        self.ids = ids
        self.split = split

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    opt_step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0  # number of completed epochs
    best_metric: float = float("-inf")
    rng: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: YieldModel, train_cfg: TrainConfig, opt: AdamWState,
                epoch: int, best_metric: float) -> "Checkpoint":
        def arr(t):
            return t.detach().cpu().numpy().copy()

        return cls(
            model_config=model.cfg.to_dict(),
            train_config=train_cfg.to_dict(),
            params={k: arr(v) for k, v in model.state_dict().items()},
            opt_step=opt.step,
            exp_avg={k: arr(v) for k, v in opt.exp_avg.items()},
            exp_avg_sq={k: arr(v) for k, v in opt.exp_avg_sq.items()},
            epoch=epoch,
            best_metric=best_metric,
            rng={
                "seed": train_cfg.seed,
                "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
            },
        )

    def build_model(self) -> YieldModel:
        model = YieldModel(ModelConfig(**self.model_config))
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model

    def optimizer_state(self) -> AdamWState:
        return AdamWState(
            step=self.opt_step,
            exp_avg={k: torch.from_numpy(v.copy()) for k, v in self.exp_avg.items()},
            exp_avg_sq={k: torch.from_numpy(v.copy()) for k, v in self.exp_avg_sq.items()},
        )

    def save(self, path: str | Path) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian payload)."""
        path = Path(path)
        tensors = []
        for prefix, table in (("param", self.params), ("exp_avg", self.exp_avg),
                              ("exp_avg_sq", self.exp_avg_sq)):
            for name in sorted(table):
                tensors.append((prefix, name, table[name]))
        entries, offset, chunks = [], 0, []
        for prefix, name, a in tensors:
            dtype = "i8" if a.dtype.kind in "iu" else "f4"
            raw = np.ascontiguousarray(a, dtype="<" + dtype).tobytes()
            entries.append({"kind": prefix, "name": name, "shape": list(a.shape),
                            "dtype": dtype, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "best_metric": self.best_metric if math.isfinite(self.best_metric) else None,
            "opt_step": self.opt_step,
            "rng": self.rng,
            "tensors": entries,
        }
        path.with_suffix(".bin").write_bytes(b"".join(chunks))
        path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        jpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
        if not jpath.exists() or not bpath.exists():
            raise CheckpointError(f"checkpoint {path} not found")
        try:
            doc = json.loads(jpath.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint manifest {jpath}: {exc}") from exc
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')}")
        payload = bpath.read_bytes()
        tables: dict[str, dict] = {"param": {}, "exp_avg": {}, "exp_avg_sq": {}}
        for e in doc["tensors"]:
            raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"truncated checkpoint payload at {e['name']}")
            a = np.frombuffer(raw, dtype="<" + e["dtype"]).reshape(e["shape"])
            tables[e["kind"]][e["name"]] = a.astype(np.int64 if e["dtype"] == "i8" else np.float32)
        best = doc.get("best_metric")
        return cls(
            model_config=doc["model_config"],
            train_config=doc["train_config"],
            params=tables["param"],
            opt_step=doc["opt_step"],
            exp_avg=tables["exp_avg"],
            exp_avg_sq=tables["exp_avg_sq"],
            epoch=doc["epoch"],
            best_metric=float("-inf") if best is None else best,
            rng=doc.get("rng", {}),
        )


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def set_threads(n: int) -> None:
    torch.set_num_threads(max(int(n), 1))


def _batch(ds: ChipDataset, idx, dtype=torch.float32):
    x = torch.from_numpy(ds.x[idx]).to(dtype)
    y = torch.from_numpy(ds.y[idx]).to(dtype)
    ll = torch.from_numpy(ds.latlon[idx]).to(dtype)
    return x, y, ll


@torch.no_grad()
def predict(model: YieldModel, ds: ChipDataset, batch_size: int = 8):
    """Eval-mode standardized predictions, yielded per batch as (indices, main)."""
    model.eval()
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x, _, ll = _batch(ds, idx)
        yield idx, model(x, ll).main.numpy()


def evaluate_model(model: YieldModel, ds: ChipDataset, batch_size: int = 8) -> EvalReport:
    acc = MetricAccumulator()
    for idx, pred in predict(model, ds, batch_size):
        acc.update(ds.y[idx], pred)
    return report_from_accumulator(acc, ds.yield_stats.std, ds.split)


def evaluate(checkpoint: Checkpoint | str | Path, manifest: DatasetManifest | str | Path,
             split: str = "val") -> EvalReport:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    model = checkpoint.build_model()
    ds = ChipDataset(manifest, split, model.cfg.encoder.mode)
    return evaluate_model(model, ds)


@dataclass
class TrainResult:
    model: YieldModel
    best: Checkpoint
    last: Checkpoint
    log: list[dict]


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(manifest: DatasetManifest | str | Path, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    set_threads(cfg.threads)
    mode = model_cfg.encoder.mode
    train_ds = ChipDataset(manifest, "train", mode)
    val_ds = ChipDataset(manifest, "val", mode)

    if resume is not None:
        model = resume.build_model()
        opt = resume.optimizer_state()
        start_epoch, best_r2 = resume.epoch, resume.best_metric
        if start_epoch >= cfg.epochs:
            raise ValueError(f"nothing to train: checkpoint already at epoch {start_epoch} "
                             f"of {cfg.epochs}")
    else:
        torch.manual_seed(cfg.seed)
        model = YieldModel(model_cfg)
        opt = AdamWState()
        start_epoch, best_r2 = 0, float("-inf")
    params = dict(model.named_parameters())
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    if log_path and resume is None and log_path.exists():
        log_path.unlink()

    best = resume
    log: list[dict] = []
    last = resume
    n = len(train_ds)
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        eseed = _epoch_seed(cfg.seed, epoch)
        torch.manual_seed(eseed)
        order = np.random.default_rng(eseed).permutation(n)
        model.train()
        sums = {"loss": 0.0, "main": 0.0, "aux": 0.0}
        batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start: start + cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                rng = np.random.default_rng([cfg.seed, epoch, int(i)])
                x_i, y_i = augment(train_ds.x[i], train_ds.y[i], cfg.flip_prob, rng)
                xs.append(x_i)
                ys.append(y_i)
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys))
            ll = torch.from_numpy(train_ds.latlon[idx])
            try:
                out = model(x, ll)
            except FloatingPointError as exc:
                raise NumericalError(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            loss, main, aux = compute_loss(cfg.loss, out.main, out.aux, y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            grads = backward(loss, model)
            adamw_step(params, grads, opt, lr, cfg.weight_decay, cfg.betas, cfg.eps)
            sums["loss"] += loss.item()
            sums["main"] += main.item()
            sums["aux"] += aux.item() if aux is not None else 0.0
            batches += 1

        report = evaluate_model(model, val_ds, cfg.batch_size)
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": sums["loss"] / batches,
            "train_main_loss": sums["main"] / batches,
            "val_rmse": report.rmse["standardized"],
            "val_mae": report.mae["standardized"],
            "val_r2": report.r2,
            "val_pearson": report.pearson,
        }
        if cfg.loss.uses_aux:
            record["train_aux_loss"] = sums["aux"] / batches
        log.append(record)
        logger.info("epoch %d lr %.3g loss %.4f val r2 %.4f", epoch + 1, lr,
                    record["train_loss"], report.r2)
        if on_epoch:
            on_epoch(record)
        if report.r2 > best_r2:
            best_r2 = report.r2
            best = Checkpoint.capture(model, cfg, opt, epoch + 1, best_r2)
            if out_dir:
                best.save(out_dir / "best")
        last = Checkpoint.capture(model, cfg, opt, epoch + 1, best_r2)
        if out_dir:
            last.save(out_dir / "last")
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    return TrainResult(model, best, last, log)
