"""Command-line front end: pretrain, finetune, eval, saliency, synth.

All randomness flows from a single --seed through derived per-purpose
streams, so reruns with identical flags produce bytewise-identical
artifacts. Logs go to stderr; machine-readable outputs go only to files.

Exit codes: 0 success, 2 config error, 3 data error, 4 IO error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, model, saliency, store, training
from .errors import (BadMagic, CorruptPayload, DegenerateBatch, EmptyCorpus,
                     EmptySplit, InsufficientClassSamples, InvalidGeometry,
                     InvalidSpec, IoFailure, LabelOutOfRange, NotScalar,
                     ShapeMismatch, SpecMismatch, UnknownPrefix,
                     UnreadableImage, VersionUnsupported, WindowOutOfBounds)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

_DATA_ERRORS = (EmptyCorpus, UnreadableImage, InsufficientClassSamples,
                EmptySplit, LabelOutOfRange, DegenerateBatch)
_IO_ERRORS = (IoFailure, BadMagic, VersionUnsupported, CorruptPayload, SpecMismatch)
_CONFIG_ERRORS = (ValueError, InvalidSpec, InvalidGeometry, WindowOutOfBounds,
                  UnknownPrefix, ShapeMismatch, NotScalar)

# hard defaults, also consulted when merging an optional key=value config file
_DEFAULTS = {
    "seed": 42,
    "epochs": 100,
    "batch_size": 24,
    "lr": 0.0002,
    "lambda1": 1e-4,
    "optimizer": "adam",
    "freeze_mode": "full_finetune",
    "model": "resnet_micro",
    "k_test": 4,
    "val_fraction": 0.2,
    "window": 32,
    "stride": 16,
    "fill": 0.0,
    "max_images": 4,
    "classes": 20,
    "per_class": 10,
    "image_size": 32,
    "skip_unreadable": False,
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _opt(parser, name, type_, help_text, required=False):
    key = name.lstrip("-").replace("-", "_")
    shown = _DEFAULTS.get(key)
    suffix = "" if required or shown is None else f" (default: {shown})"
    parser.add_argument(name, dest=key, type=type_, default=None,
                        required=required, help=help_text + suffix)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irisnet",
        description="Few-shot image-identity recognition: training, transfer and occlusion saliency.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=False):
        _opt(p, "--seed", int, "master seed; all randomness derives from it")
        _opt(p, "--out-dir", str, "directory for reports and artifacts", required=True)
        _opt(p, "--config", str, "key=value config file; command-line flags win")
        if needs_data:
            _opt(p, "--data-root", str, "corpus root (one directory per class)", required=True)
            p.add_argument("--skip-unreadable", dest="skip_unreadable", action="store_const",
                           const=True, default=None,
                           help="report undecodable images and skip them instead of failing")

    def train_flags(p):
        _opt(p, "--epochs", int, "training epochs")
        _opt(p, "--batch-size", int, "minibatch size")
        _opt(p, "--lr", float, "learning rate")
        _opt(p, "--lambda1", float, "head weight-decay coefficient (squared Frobenius penalty)")
        _opt(p, "--optimizer", str, "adam or sgd")
        _opt(p, "--k-test", int, "held-out test images per class")
        _opt(p, "--val-fraction", float, "fraction of non-test images used for validation")

    p = sub.add_parser("pretrain", help="train from random init and save a weight file")
    common(p, needs_data=True)
    train_flags(p)
    _opt(p, "--model", str, "model variant: resnet_micro or resnet50")
    _opt(p, "--weights-out", str, "output weight file", required=True)

    p = sub.add_parser("finetune", help="transfer pretrained weights to a new corpus")
    common(p, needs_data=True)
    train_flags(p)
    _opt(p, "--weights-in", str, "pretrained weight file", required=True)
    _opt(p, "--weights-out", str, "output weight file", required=True)
    _opt(p, "--freeze-mode", str, "feature_extractor or full_finetune")

    p = sub.add_parser("eval", help="report test accuracy of a weight file on a corpus")
    common(p, needs_data=True)
    _opt(p, "--weights-in", str, "weight file to evaluate", required=True)
    _opt(p, "--split-manifest", str, "reuse an exported split instead of regenerating")
    _opt(p, "--k-test", int, "held-out test images per class (when regenerating the split)")
    _opt(p, "--val-fraction", float, "validation fraction (when regenerating the split)")

    p = sub.add_parser("saliency", help="occlusion-sweep saliency maps for test images")
    common(p, needs_data=True)
    _opt(p, "--weights-in", str, "weight file to explain", required=True)
    _opt(p, "--split-manifest", str, "reuse an exported split instead of regenerating")
    _opt(p, "--k-test", int, "held-out test images per class (when regenerating the split)")
    _opt(p, "--val-fraction", float, "validation fraction (when regenerating the split)")
    _opt(p, "--window", int, "occlusion square size N")
    _opt(p, "--stride", int, "occlusion stride S")
    _opt(p, "--fill", float, "fill value, raw [0,1] pixel space")
    _opt(p, "--max-images", int, "number of test images to explain")

    p = sub.add_parser("synth", help="generate a synthetic ring corpus on disk")
    common(p)
    _opt(p, "--classes", int, "number of classes")
    _opt(p, "--per-class", int, "images per class")
    _opt(p, "--image-size", int, "square image side in pixels")

    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    """Resolve each option: explicit flag, then config file, then default."""
    cfg = vars(args).copy()
    file_values = {}
    if cfg.get("config"):
        path = Path(cfg["config"])
        if not path.is_file():
            raise ValueError(f"config file {path} does not exist")
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            file_values[key] = value
    unknown = set(file_values) - set(cfg)
    if unknown:
        raise ValueError(f"config file sets unknown keys: {sorted(unknown)}")
    for key, value in cfg.items():
        if value is not None:
            continue
        if key in file_values:
            default = _DEFAULTS.get(key)
            caster = type(default) if default is not None else str
            cfg[key] = caster(file_values[key]) if caster is not bool else file_values[key] not in ("0", "false", "False")
        elif key in _DEFAULTS:
            cfg[key] = _DEFAULTS[key]
    return cfg


def _train_config(cfg: dict, freeze_prefixes=()) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        lambda1=cfg["lambda1"], optimizer=cfg["optimizer"], seed=cfg["seed"],
        freeze_prefixes=tuple(freeze_prefixes),
    )


def _load_sized_corpus(cfg: dict, input_size: int):
    images, class_names = data.load_corpus(cfg["data_root"], skip_unreadable=bool(cfg["skip_unreadable"]))
    for im in images:
        if im.pixels.shape[1:] != (input_size, input_size):
            im.pixels = data.resize_bilinear(im.pixels, input_size, input_size)
    return images, class_names


def _resolve_split(cfg: dict, images) -> data.DatasetSplit:
    if cfg.get("split_manifest"):
        return data.split_from_manifest(images, cfg["split_manifest"], seed=cfg["seed"])
    return data.make_split(images, k_test=cfg["k_test"],
                           val_fraction=cfg["val_fraction"], seed=cfg["seed"])


def _run_training(cfg: dict, net: model.Model, split: data.DatasetSplit) -> None:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    data.export_manifest(split, out_dir / "split_manifest.csv")
    tcfg = _train_config(cfg)
    best, report = training.train(net, split, tcfg)
    report.test_accuracy = training.evaluate(best, split.test, None)
    for line in report.log_lines():
        _log(line)
    try:
        (out_dir / "report.csv").write_text(report.csv_text())
        (out_dir / "summary.txt").write_text(
            f"best_epoch={report.best_epoch}\n"
            f"best_val_accuracy={report.best_val_accuracy:.6f}\n"
            f"test_accuracy={report.test_accuracy:.6f}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write reports under {out_dir}: {exc}") from exc
    store.save(best, cfg["weights_out"])
    _log(f"saved weights to {cfg['weights_out']}")


def cmd_pretrain(cfg: dict) -> int:
    spec_probe = model.make_spec(cfg["model"], 2)  # class count patched after loading
    images, class_names = _load_sized_corpus(cfg, spec_probe.input_size)
    split = _resolve_split(cfg, images)
    net = model.build(model.make_spec(cfg["model"], split.class_count),
                      data.subseed(cfg["seed"], "build"))
    _log(f"pretrain: {split.class_count} classes, {len(split.train)} train / "
         f"{len(split.val)} val / {len(split.test)} test")
    _run_training(cfg, net, split)
    return EXIT_OK


def cmd_finetune(cfg: dict) -> int:
    probe = store.load(cfg["weights_in"])
    images, class_names = _load_sized_corpus(cfg, probe.spec.input_size)
    split = _resolve_split(cfg, images)
    net = store.transfer(cfg["weights_in"], split.class_count, cfg["freeze_mode"],
                         seed=data.subseed(cfg["seed"], "head"))
    _log(f"finetune ({cfg['freeze_mode']}): {split.class_count} classes, "
         f"{len(split.train)} train / {len(split.val)} val / {len(split.test)} test")
    _run_training(cfg, net, split)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    net = store.load(cfg["weights_in"])
    images, class_names = _load_sized_corpus(cfg, net.spec.input_size)
    split = _resolve_split(cfg, images)
    if split.class_count != net.spec.head_classes:
        raise SpecMismatch(f"weight file has {net.spec.head_classes}-class head, "
                           f"corpus has {split.class_count} classes")
    correct = {cid: 0 for cid in range(split.class_count)}
    total = {cid: 0 for cid in range(split.class_count)}
    for lo in range(0, len(split.test), 64):
        chunk = split.test[lo:lo + 64]
        preds = net.predict(training.stack_images(chunk))
        for im, p in zip(chunk, preds):
            total[im.class_id] += 1
            correct[im.class_id] += int(p == im.class_id)
    accuracy = sum(correct.values()) / max(1, sum(total.values()))
    out_dir = Path(cfg["out_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["class_id,class_name,correct,total,accuracy"]
        for cid in range(split.class_count):
            acc = correct[cid] / total[cid] if total[cid] else 0.0
            lines.append(f"{cid},{class_names[cid]},{correct[cid]},{total[cid]},{acc:.6f}")
        (out_dir / "per_class_accuracy.csv").write_text("\n".join(lines) + "\n")
        (out_dir / "test_accuracy.txt").write_text(f"test_accuracy={accuracy:.6f}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write evaluation outputs under {out_dir}: {exc}") from exc
    _log(f"test_accuracy {accuracy:.6f} over {sum(total.values())} images, "
         f"{split.class_count} classes")
    return EXIT_OK


def cmd_saliency(cfg: dict) -> int:
    net = store.load(cfg["weights_in"])
    size = net.spec.input_size
    if cfg["window"] > size:
        raise InvalidGeometry(f"window {cfg['window']} exceeds model input {size}x{size}")
    images, _ = _load_sized_corpus(cfg, size)
    split = _resolve_split(cfg, images)
    occ = saliency.OcclusionConfig(window=cfg["window"], stride=cfg["stride"],
                                   fill_value=cfg["fill"])
    out_dir = Path(cfg["out_dir"])
    targets = split.test[:cfg["max_images"]]
    for im in targets:
        smap = saliency.sweep(net, im.pixels, im.class_id, occ)
        stem = Path(im.source_path).stem
        dest = out_dir / f"c{im.class_id:03d}_{stem}"
        saliency.export_map(smap, im.pixels, dest)
        _log(f"{im.source_path}: base={smap.base_prediction} "
             f"conf={smap.base_confidence:.4f} flips={int(smap.flip.sum())} -> {dest}")
    _log(f"wrote {len(targets)} saliency maps under {out_dir}")
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    images = data.synth_corpus(cfg["classes"], cfg["per_class"],
                               cfg["image_size"], cfg["image_size"], cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    try:
        for im in images:
            cdir = out_dir / f"c{im.class_id:03d}"
            cdir.mkdir(parents=True, exist_ok=True)
            idx = im.source_path.rsplit("/i", 1)[1]
            data.write_pgm(cdir / f"i{idx}.pgm", im.pixels[0])
    except OSError as exc:
        raise IoFailure(f"cannot write corpus under {out_dir}: {exc}") from exc
    _log(f"wrote {len(images)} images ({cfg['classes']} classes) under {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _merge_config(args)
        return _COMMANDS[cfg["command"]](cfg)
    except _DATA_ERRORS as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except _IO_ERRORS as exc:
        _log(f"io error: {exc}")
        return EXIT_IO
    except _CONFIG_ERRORS as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
