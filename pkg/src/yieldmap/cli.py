"""Command line entry point: ``yieldmap {gen,train,eval,predict,explain}``.

Exit codes: 0 ok, 2 usage/format, 3 numerical failure, 4 I/O/checkpoint,
5 unsupported tokenization mode.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .chipstore import ChipFormatError, ChipValidationError, DatasetError, GenParams, generate_dataset
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .head import HeadConfig
from .model import ModelConfig
from .objectives import LossConfig
from .trainer import Checkpoint, CheckpointError, NumericalError, TrainConfig, set_threads

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO, EXIT_MODE = 0, 2, 3, 4, 5
DATA_ENV = "YIELDMAP_DATA"

log = logging.getLogger("yieldmap")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def _check_keys(section: str, given: dict, cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _set_dotted(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve_config(path: str | None, overrides: list[str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Defaults < JSON file < ``--set section.key=value`` overrides."""
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(doc, key, value)
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown top-level key(s): {sorted(unknown)}")
    model_doc = doc.get("model", {})
    train_doc = doc.get("train", {})
    _check_keys("model", model_doc, ModelConfig)
    for sub, cls in (("encoder", EncoderConfig), ("decoder", DecoderConfig), ("head", HeadConfig)):
        _check_keys(f"model.{sub}", model_doc.get(sub, {}), cls)
    _check_keys("train", train_doc, TrainConfig)
    _check_keys("train.loss", train_doc.get("loss", {}), LossConfig)
    try:
        return ModelConfig(**model_doc), TrainConfig(**train_doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _data_root(arg: str | None) -> Path:
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"--data not given and ${DATA_ENV} unset")
    return Path(root)


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.size % 16:
        raise UsageError(f"--size {args.size} is not divisible by the patch size 16")
    if args.chips < 1:
        raise UsageError("--chips must be >= 1")
    years = [int(y) for y in args.years.split(",") if y]
    val_years = [int(y) for y in args.val_years.split(",")] if args.val_years else [years[-1]]
    if len(years) < 2:
        raise UsageError("need at least two years for a temporal hold-out split")
    params = GenParams(H=args.size, W=args.size)
    manifest = generate_dataset(args.out, args.chips, years, val_years, params, seed=args.seed)
    print(json.dumps({"chips": len(manifest.chips), "manifest": str(Path(args.out) / "manifest.json")}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    model_cfg, train_cfg = resolve_config(args.config, args.set)
    if args.threads:
        train_cfg.threads = args.threads
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = _load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model_cfg = ModelConfig(**resume.model_config)
    (out / "resolved_config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2)
    )
    try:
        result = train(_data_root(args.data), model_cfg, train_cfg, out_dir=out, resume=resume)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result.log[-1], sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .chipstore import DatasetManifest
    from .trainer import evaluate

    ckpt = _load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(_data_root(args.data))
    if args.split not in ("train", "val"):
        raise CheckpointError(f"unknown split {args.split!r}")
    set_threads(args.threads or 1)
    try:
        report = evaluate(ckpt, manifest, args.split)
    except DatasetError as exc:
        raise CheckpointError(str(exc)) from exc
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .chipstore import load_stats, read_chip
    from .interpret import export_maps, predict_chip

    ckpt = _load_checkpoint(args.ckpt)
    chip = read_chip(args.chip)
    stats_path = Path(args.stats) if args.stats else Path(args.chip).resolve().parent.parent / "stats.json"
    if not stats_path.exists():
        raise CheckpointError(f"stats file {stats_path} not found (use --stats)")
    band_stats, yield_stats = load_stats(stats_path)
    model = ckpt.build_model()
    if chip.header.H != model.cfg.encoder.img_size or chip.header.W != model.cfg.encoder.img_size:
        raise UsageError(f"chip extent {chip.header.H}x{chip.header.W} does not match the model")
    pred = predict_chip(model, chip, band_stats, yield_stats)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    sidecar = export_maps(args.out, pred, chip.yield_map.astype("float64"))
    print(json.dumps(sidecar, indent=2))
    return EXIT_OK


def cmd_explain(args) -> int:
    from .chipstore import DatasetManifest
    from .interpret import UnsupportedModeError, explain

    ckpt = _load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(_data_root(args.data))
    layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    model = ckpt.build_model()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        report = explain(model, manifest, layers, split=args.split, max_chips=args.max_chips,
                         map_prefix=out.with_suffix(""))
    except UnsupportedModeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE
    out.write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in ("layers", "spectral_importance")}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yieldmap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic chip dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--chips", type=int, default=64, help="chips per year")
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--years", default="2018,2019,2020,2022,2023")
    g.add_argument("--val-years", default=None, help="default: last listed year")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None)
    t.add_argument("--data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint stem to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.epochs=5")
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--split", default="val")
    e.add_argument("--out", default=None)
    e.add_argument("--threads", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="export prediction/truth/residual maps for one chip")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--chip", required=True)
    pr.add_argument("--out", required=True, help="output prefix")
    pr.add_argument("--stats", default=None)
    pr.set_defaults(func=cmd_predict)

    x = sub.add_parser("explain", help="temporal attention and spectral importance report")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", default=None)
    x.add_argument("--layers", default=None, help="comma-separated 1-based block indices")
    x.add_argument("--split", default="val")
    x.add_argument("--max-chips", type=int, default=32)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChipFormatError, ChipValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
