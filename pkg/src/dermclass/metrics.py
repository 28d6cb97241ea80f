"""Accuracy, confusion matrices and per-class true-positive rates."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CodeOutOfRange, EmptyInput


def predict_labels(probs) -> np.ndarray:
    """Row-wise arg-max; ``np.argmax`` already resolves ties to the lowest index."""
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise ValueError(f"expected a (batch, K) array, got shape {probs.shape}")
    return np.argmax(probs, axis=1)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise EmptyInput("accuracy of an empty set is undefined")
    return float(np.count_nonzero(preds == labels)) / preds.size


def confusion(preds, labels, k: int) -> np.ndarray:
    """``k x k`` counts; rows are true classes, columns predicted classes."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    for name, codes in (("prediction", preds), ("label", labels)):
        if codes.size and (codes.min() < 0 or codes.max() >= k):
            raise CodeOutOfRange(f"{name} code outside 0..{k - 1}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def normalize_rows(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


def per_class_tpr(cm) -> list[Optional[float]]:
    """Recall per class; ``None`` where the class has no samples."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    return [float(cm[i, i]) / rows[i] if rows[i] > 0 else None for i in range(cm.shape[0])]


def write_confusion_csv(path: str | Path, matrix, class_names: Sequence[str]) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, matrix):
            if matrix.dtype.kind == "f":
                writer.writerow([name, *(repr(float(v)) for v in row)])
            else:
                writer.writerow([name, *(int(v) for v in row)])


def read_confusion_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def evaluate(probs, labels, class_names: Sequence[str]) -> dict:
    """Summary dict for an evaluated set."""
    labels = np.asarray(labels)
    preds = predict_labels(probs)
    cm = confusion(preds, labels, len(class_names))
    tpr = per_class_tpr(cm)
    return {
        "n": int(labels.size),
        "accuracy": accuracy(preds, labels),
        "per_class_tpr": {name: v for name, v in zip(class_names, tpr)},
        "confusion": cm,
        "confusion_normalized": normalize_rows(cm),
    }


def write_metrics_bundle(out_dir: str | Path, prefix: str, summary: dict, class_names: Sequence[str]) -> dict:
    """Write raw/normalized confusion CSVs and a JSON summary referencing them."""
    out_dir = Path(out_dir)
    raw = f"{prefix}_confusion.csv"
    norm = f"{prefix}_confusion_normalized.csv"
    write_confusion_csv(out_dir / raw, summary["confusion"], class_names)
    write_confusion_csv(out_dir / norm, summary["confusion_normalized"], class_names)
    doc = {
        "n": summary["n"],
        "accuracy": summary["accuracy"],
        "per_class_tpr": summary["per_class_tpr"],
        "confusion_csv": raw,
        "confusion_normalized_csv": norm,
    }
    (out_dir / f"{prefix}_metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
