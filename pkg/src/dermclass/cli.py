"""Command-line pipeline: gen-synthetic, prepare, train, resume, evaluate, augment-preview.

Every command takes ``--config run.json``; flags override config values and
the fully resolved config is echoed to ``<out>/config.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from . import synthetic
from .augment import AugmentConfig, apply_transform, cap_classes, class_weights, sample_rng, sample_transform
from .checkpoint import graph_from_checkpoint, load_checkpoint, load_into, read_archive, save_checkpoint, write_archive
from .dataset import (
    LABEL_MAP,
    SampleRecord,
    class_counts,
    encode_labels,
    find_image,
    impute_age,
    load_images,
    load_resized,
    read_manifest,
    split,
)
from .errors import MissingFile, PipelineError, ShapeMismatch
from .metrics import evaluate, write_metrics_bundle
from .model import NetworkConfig, build_network, freeze_for_fine_tuning, init_parameters
from .training import (
    OptimizerConfig,
    TrainConfig,
    TrainingData,
    copy_checkpoint,
    evaluate_set,
    fit,
    read_history_csv,
    resume_from_best,
    write_history_csv,
)

log = logging.getLogger("dermclass")

CLASS_ORDER = sorted(LABEL_MAP, key=LABEL_MAP.get)
CACHE_FILE = "cache.irn"


@dataclass
class PathsConfig:
    manifest: str = "data/HAM10000_metadata.csv"
    image_dir: str = "data/images"
    output_dir: str = "runs/default"
    pretrained: Optional[str] = None


@dataclass
class SplitConfig:
    ratio: float = 0.8
    seed: int = 0
    stratified: bool = False


@dataclass
class SyntheticConfig:
    counts: dict = field(default_factory=lambda: dict(synthetic.DEFAULT_COUNTS))
    height: int = 96
    width: int = 128
    seed: int = 0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    cap: Optional[int] = 450
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augment_enabled: bool = True
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    class_weight_source: str = "capped"
    cache_images: bool = True
    workers: int = 1
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.class_weight_source not in ("capped", "precap", "none"):
            raise ValueError(f"class_weight_source must be capped, precap or none, got {self.class_weight_source!r}")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be >= 1 or null")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        nested = {
            "paths": PathsConfig,
            "split": SplitConfig,
            "augment": AugmentConfig,
            "network": NetworkConfig,
            "optimizer": OptimizerConfig,
            "train": TrainConfig,
            "synthetic": SyntheticConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            kwargs[key] = nested[key](**value) if key in nested else value
        return cls(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return RunConfig.from_dict(json.loads(path.read_text()))


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.out:
        cfg.paths.output_dir = args.out
    if args.seed_split is not None:
        cfg.split.seed = args.seed_split
    if args.seed_augment is not None:
        cfg.augment = dataclasses.replace(cfg.augment, seed=args.seed_augment)
    if args.seed_init is not None:
        cfg.network = dataclasses.replace(cfg.network, seed=args.seed_init)
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


# -- small file helpers -----------------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_listing(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "label_code"])
        for r in records:
            writer.writerow([r.image_id, r.label_code])


def read_listing(path: str | Path) -> list[tuple[str, int]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with open(path, newline="") as fh:
        return [(row["image_id"], int(row["label_code"])) for row in csv.DictReader(fh)]


def _records_from_listing(rows) -> list[SampleRecord]:
    return [SampleRecord("", image_id, CLASS_ORDER[code], "", None, "", "", code) for image_id, code in rows]


class Run:
    """Output directory bookkeeping: lock, echoed config, run-status file."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.paths.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.out / ".lock"))
        self.artifacts: list[str] = []
        self.info: dict = {}

    def __enter__(self):
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            raise PipelineError(f"output directory {self.out} is locked by another command") from None
        _write_json(self.out / "config.json", self.cfg.to_dict())
        self._status("running")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            missing = [a for a in self.artifacts if not (self.out / a).exists()]
            if missing:
                self.info["missing_artifacts"] = missing
                self._status("failed")
                self.lock.release()
                raise PipelineError(f"artifacts not written: {missing}")
            self._status("ok")
        else:
            self.info["error"] = f"{type(exc).__name__}: {exc}"
            self._status("failed", partial=True)
        self.lock.release()
        return False

    def add(self, *names: str) -> None:
        self.artifacts.extend(names)

    def _status(self, status: str, partial: bool = False) -> None:
        doc = {"command": self.command, "status": status, "artifacts": self.artifacts, **self.info}
        if partial:
            doc["partial_outputs"] = sorted(a for a in self.artifacts if (self.out / a).exists())
        _write_json(self.out / f"status_{self.command}.json", doc)


# -- data assembly ---------------------------------------------------------------------


def _image_stack(cfg: RunConfig, ids: list[str]) -> np.ndarray:
    paths = [find_image(cfg.paths.image_dir, i) for i in ids]
    return load_images(paths, cfg.network.input_hw, cfg.workers)


def _load_prepared(cfg: RunConfig, out: Path):
    train_rows = read_listing(out / "train_capped.csv")
    val_rows = read_listing(out / "validation.csv")
    cache = out / CACHE_FILE
    if cache.is_file():
        header, tensors = read_archive(cache, mmap=True)
        if header.get("input_hw") != cfg.network.input_hw:
            raise ShapeMismatch("image cache", (cfg.network.input_hw,), (header.get("input_hw"),))
        train_images = np.array(tensors["train_images"])
        val_images = np.array(tensors["val_images"])
        if header["train_ids"] != [r[0] for r in train_rows] or header["val_ids"] != [r[0] for r in val_rows]:
            raise PipelineError("image cache does not match the prepared listings; rerun prepare")
    else:
        train_images = _image_stack(cfg, [r[0] for r in train_rows])
        val_images = _image_stack(cfg, [r[0] for r in val_rows])
    weights_doc = json.loads((out / "class_weights.json").read_text())
    weights = None if weights_doc["weights"] is None else np.array(weights_doc["weights"], dtype=np.float64)
    data = TrainingData(
        train_records=_records_from_listing(train_rows),
        train_images=train_images,
        val_images=val_images,
        val_labels=np.array([code for _, code in val_rows], dtype=np.int64),
        augment=cfg.augment,
        augment_enabled=cfg.augment_enabled,
        workers=cfg.workers,
    )
    return data, weights


def _emit_metrics(run: Run, graph, data: TrainingData, prefix: str) -> dict:
    _, _, probs = evaluate_set(graph, data.val_images, data.val_labels)
    summary = evaluate(probs, data.val_labels, CLASS_ORDER)
    doc = write_metrics_bundle(run.out, prefix, summary, CLASS_ORDER)
    run.add(f"{prefix}_confusion.csv", f"{prefix}_confusion_normalized.csv", f"{prefix}_metrics.json")
    return doc


# -- commands ------------------------------------------------------------------------


def cmd_gen_synthetic(cfg: RunConfig, args) -> dict:
    s = cfg.synthetic
    with Run(cfg, "gen-synthetic") as run:
        n = synthetic.generate(cfg.paths.image_dir, cfg.paths.manifest, s.counts, s.height, s.width, s.seed)
        run.info["records"] = n
    return {"records": n}


def cmd_prepare(cfg: RunConfig, args) -> dict:
    with Run(cfg, "prepare") as run:
        records = impute_age(encode_labels(read_manifest(cfg.paths.manifest)))
        parts = split(records, cfg.split.ratio, cfg.split.seed, cfg.split.stratified)
        capped = cap_classes(parts.train, cfg.cap, cfg.split.seed) if cfg.cap is not None else list(parts.train)
        write_listing(run.out / "train.csv", parts.train)
        write_listing(run.out / "validation.csv", parts.validation)
        write_listing(run.out / "train_capped.csv", capped)
        run.add("train.csv", "validation.csv", "train_capped.csv")

        counts = {
            "capped": [class_counts(capped)[c] for c in CLASS_ORDER],
            "precap": [class_counts(parts.train)[c] for c in CLASS_ORDER],
        }
        if cfg.class_weight_source == "none":
            weights = None
        else:
            weights = class_weights(counts[cfg.class_weight_source]).tolist()
        _write_json(
            run.out / "class_weights.json",
            {"source": cfg.class_weight_source, "classes": CLASS_ORDER, "counts": counts.get(cfg.class_weight_source), "weights": weights},
        )
        report = {
            "manifest_records": len(records),
            "manifest_counts": class_counts(records),
            "train_counts_precap": class_counts(parts.train),
            "train_counts_capped": class_counts(capped),
            "validation_counts": class_counts(parts.validation),
            "cap": cfg.cap,
            "label_map": LABEL_MAP,
        }
        _write_json(run.out / "prepare_report.json", report)
        run.add("class_weights.json", "prepare_report.json")

        if cfg.cache_images:
            train_images = _image_stack(cfg, [r.image_id for r in capped])
            val_images = _image_stack(cfg, [r.image_id for r in parts.validation])
            write_archive(
                run.out / CACHE_FILE,
                {
                    "kind": "image-cache",
                    "input_hw": cfg.network.input_hw,
                    "train_ids": [r.image_id for r in capped],
                    "val_ids": [r.image_id for r in parts.validation],
                },
                {"train_images": train_images, "val_images": val_images},
            )
            run.add(CACHE_FILE)
    return report


def _build_graph(cfg: RunConfig):
    graph = init_parameters(build_network(cfg.network), cfg.network.seed)
    report = None
    if cfg.paths.pretrained:
        report = load_into(graph, load_checkpoint(cfg.paths.pretrained), strict=False)
    freeze_for_fine_tuning(graph, cfg.train.fine_tune_last_n)
    return graph, report


def cmd_train(cfg: RunConfig, args, epoch_fn=None) -> dict:
    torch.use_deterministic_algorithms(True)
    with Run(cfg, "train") as run:
        data, weights = _load_prepared(cfg, run.out)
        graph, pretrained = _build_graph(cfg)
        if pretrained is not None:
            run.info["pretrained_initialized"] = pretrained["initialized"]
        (run.out / "graph.txt").write_text(graph.listing())
        run.add("graph.txt")
        t0 = time.perf_counter()
        result = fit(graph, data, cfg.train, cfg.optimizer, weights, run.out, epoch_fn=epoch_fn)
        if result.best_checkpoint is None:
            # no epoch ran (or none produced a comparable metric): keep the initial weights
            result.best_checkpoint = save_checkpoint(graph, run.out / "best.ckpt", {"epoch": 0, "phase": 1})
        write_history_csv(run.out / "history.csv", result.history, [1] * len(result.history))
        run.add("history.csv", "best.ckpt")
        best = graph_from_checkpoint(load_checkpoint(result.best_checkpoint))
        metrics = _emit_metrics(run, best, data, "validation")
        summary = {
            "phase1_best_val_accuracy": result.state.best_metric if result.state.best_epoch else None,
            "phase1_best_epoch": result.state.best_epoch,
            "epochs_run": result.stop_epoch,
            "stopped_early": result.stopped_early,
            "best_checkpoint": "best.ckpt",
            "validation": metrics,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        run.info.update(early_stop_epoch=result.stop_epoch if result.stopped_early else None)
        _write_json(run.out / "summary.json", summary)
        run.add("summary.json")
    return summary


def cmd_resume(cfg: RunConfig, args, epoch_fn=None) -> dict:
    torch.use_deterministic_algorithms(True)
    with Run(cfg, "resume") as run:
        source = Path(args.checkpoint) if args.checkpoint else run.out / "best.ckpt"
        if not source.is_file():
            raise MissingFile(source)
        data, weights = _load_prepared(cfg, run.out)
        phase1 = load_checkpoint(source).meta.get("best_val_accuracy")
        result = resume_from_best(
            source, data, cfg.train.resume_epochs, cfg.optimizer, weights, cfg.train, run.out, epoch_fn=epoch_fn
        )
        final = copy_checkpoint(result.best_checkpoint, run.out / "final.ckpt")
        run.add("final.ckpt", "history.csv")

        history_path = run.out / "history.csv"
        rows = [r for r in read_history_csv(history_path) if r.get("phase") == "1"] if history_path.exists() else []
        with open(history_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "phase"])
            for r in rows:
                writer.writerow([r[k] for k in ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "phase")])
            for rec in result.history:
                writer.writerow([rec.epoch, *(repr(float(v)) for v in (rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy)), 2])

        graph = graph_from_checkpoint(load_checkpoint(final))
        metrics = _emit_metrics(run, graph, data, "final_validation")
        phase2 = max((r.val_accuracy for r in result.history), default=None)
        summary = {
            "phase1_best_val_accuracy": phase1,
            "phase2_best_val_accuracy": phase2,
            "final_best_val_accuracy": result.state.best_metric if math.isfinite(result.state.best_metric) else None,
            "resume_epochs_run": result.stop_epoch,
            "stopped_early": result.stopped_early,
            "final_checkpoint": "final.ckpt",
            "validation": metrics,
        }
        _write_json(run.out / "final_summary.json", summary)
        run.add("final_summary.json")
    return summary


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    with Run(cfg, "evaluate") as run:
        if not args.checkpoint:
            raise PipelineError("evaluate requires --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.config.num_classes != len(CLASS_ORDER):
            raise ShapeMismatch("logits", (len(CLASS_ORDER),), (ckpt.config.num_classes,))
        graph = graph_from_checkpoint(ckpt)
        listing = Path(args.listing) if args.listing else run.out / "validation.csv"
        rows = read_listing(listing)
        images = load_images([find_image(cfg.paths.image_dir, i) for i, _ in rows], ckpt.config.input_hw, cfg.workers)
        labels = np.array([c for _, c in rows], dtype=np.int64)
        _, _, probs = evaluate_set(graph, images, labels)
        prefix = args.prefix or f"eval_{listing.stem}"
        doc = write_metrics_bundle(run.out, prefix, evaluate(probs, labels, CLASS_ORDER), CLASS_ORDER)
        run.add(f"{prefix}_confusion.csv", f"{prefix}_confusion_normalized.csv", f"{prefix}_metrics.json")
    return doc


def cmd_augment_preview(cfg: RunConfig, args) -> dict:
    with Run(cfg, "augment-preview") as run:
        if not args.image_id:
            raise PipelineError("augment-preview requires --image-id")
        image = load_resized(find_image(cfg.paths.image_dir, args.image_id), cfg.network.input_hw)
        preview = run.out / "preview"
        preview.mkdir(exist_ok=True)
        fields = ["index", "file", "rotation_deg", "shear_deg", "tx", "ty", "hflip", "vflip"]
        rows = []
        for k in range(args.n):
            rng = sample_rng(cfg.augment.seed, 0, k)
            t, hflip, vflip, params = sample_transform(cfg.augment, rng, image.shape[0], image.shape[1])
            name = f"{args.image_id}_aug{k:03d}.png"
            Image.fromarray(apply_transform(image, t, hflip, vflip)).save(preview / name)
            rows.append({"index": k, "file": name, **{f: repr(params[f]) if isinstance(params[f], float) else params[f] for f in fields[2:]}})
            run.add(f"preview/{name}")
        with open(preview / "transforms.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        run.add("preview/transforms.csv")
    return {"written": args.n}


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "resume": cmd_resume,
    "evaluate": cmd_evaluate,
    "augment-preview": cmd_augment_preview,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dermclass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", help="output directory (overrides paths.output_dir)")
        p.add_argument("--seed-split", type=int)
        p.add_argument("--seed-augment", type=int)
        p.add_argument("--seed-init", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--checkpoint", help="checkpoint for resume/evaluate")
        p.add_argument("--log-level", default="INFO")
        if name == "evaluate":
            p.add_argument("--listing", help="CSV of image_id,label_code (default: validation listing)")
            p.add_argument("--prefix", help="output file prefix")
        if name == "augment-preview":
            p.add_argument("--image-id", required=True)
            p.add_argument("--n", type=int, default=8)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        result = COMMANDS[args.command](cfg, args)
    except (PipelineError, OSError, ValueError, KeyError) as exc:
        code = exc.code if isinstance(exc, PipelineError) else type(exc).__name__
        print(json.dumps({"error": code, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
