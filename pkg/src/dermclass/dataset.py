"""Manifest ingestion, label encoding, image loading and train/validation splits.

Images are plain numpy arrays of shape ``(H, W, 3)`` in RGB order. The array
dtype carries the form: ``uint8`` is the integer form (0-255), a floating
dtype is the normalized form (0.0-1.0).
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    AllAgesMissing,
    AlreadyNormalized,
    DecodeError,
    DegenerateSplit,
    EmptyImage,
    MalformedRow,
    MissingFile,
    MissingHeader,
    UnknownClass,
)

CLASS_NAMES: tuple[str, ...] = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
LABEL_MAP: dict[str, int] = {name: code for code, name in enumerate(sorted(CLASS_NAMES))}
NUM_CLASSES = len(CLASS_NAMES)

MANIFEST_COLUMNS = ("lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization")


@dataclass(frozen=True)
class SampleRecord:
    lesion_id: str
    image_id: str
    dx: str
    dx_type: str
    age: Optional[float]
    sex: str
    localization: str
    label_code: Optional[int] = None


@dataclass(frozen=True)
class SplitResult:
    train: list[SampleRecord]
    validation: list[SampleRecord]
    seed: int
    ratio: float


def parse_manifest(content: bytes | str) -> list[SampleRecord]:
    """Parse a HAM10000-style metadata CSV into records, in file order.

    Extra columns are tolerated; the seven standard ones must be present.
    """
    text = content.decode("utf-8-sig") if isinstance(content, (bytes, bytearray)) else content
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise MissingHeader("manifest is empty")
    header = [h.strip() for h in header]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise MissingHeader(f"manifest header lacks columns: {', '.join(missing)}")
    idx = {c: header.index(c) for c in MANIFEST_COLUMNS}

    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRow(line_no, f"({len(row)} fields, expected {len(header)})")
        dx = row[idx["dx"]].strip()
        if dx not in LABEL_MAP:
            raise UnknownClass(dx, line_no)
        age_text = row[idx["age"]].strip()
        try:
            age = float(age_text) if age_text else None
        except ValueError:
            raise MalformedRow(line_no, f"(age {age_text!r} is not a number)") from None
        if age is not None and not (math.isfinite(age) and age >= 0):
            raise MalformedRow(line_no, f"(age {age_text!r} out of range)")
        records.append(
            SampleRecord(
                lesion_id=row[idx["lesion_id"]].strip(),
                image_id=row[idx["image_id"]].strip(),
                dx=dx,
                dx_type=row[idx["dx_type"]].strip(),
                age=age,
                sex=row[idx["sex"]].strip(),
                localization=row[idx["localization"]].strip(),
            )
        )
    return records


def read_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return parse_manifest(path.read_bytes())


def encode_labels(records: Iterable[SampleRecord]) -> list[SampleRecord]:
    return [replace(r, label_code=LABEL_MAP[r.dx]) for r in records]


def impute_age(records: Sequence[SampleRecord]) -> list[SampleRecord]:
    """Fill absent ages with the mean of the present ones."""
    present = [r.age for r in records if r.age is not None]
    if not present:
        raise AllAgesMissing("no record has an age to average")
    mean = math.fsum(present) / len(present)
    return [r if r.age is not None else replace(r, age=mean) for r in records]


def class_counts(records: Iterable[SampleRecord]) -> dict[str, int]:
    counts = Counter(r.dx for r in records)
    return {name: counts.get(name, 0) for name in sorted(CLASS_NAMES)}


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit image file into a ``(H, W, 3)`` uint8 RGB array."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGB":
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from exc
    return np.ascontiguousarray(arr)


def find_image(image_dir: str | Path, image_id: str) -> Path:
    image_dir = Path(image_dir)
    for ext in (".jpg", ".png", ".jpeg"):
        candidate = image_dir / f"{image_id}{ext}"
        if candidate.is_file():
            return candidate
    raise MissingFile(image_dir / f"{image_id}.jpg")


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment.

    Source coordinates are ``(i + 0.5) * in / out - 0.5`` clamped to the
    image. Integer images are rounded half away from zero.
    """
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise EmptyImage(f"cannot resize image of shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    in_h, in_w = image.shape[:2]
    src = image.astype(np.float64)
    y0, y1, wy = _axis_weights(in_h, out_h)
    x0, x1, wx = _axis_weights(in_w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    # a + (b - a) * w keeps constant regions exact
    top = src[y0][:, x0] + (src[y0][:, x1] - src[y0][:, x0]) * wx
    bottom = src[y1][:, x0] + (src[y1][:, x1] - src[y1][:, x0]) * wx
    out = top + (bottom - top) * wy
    if image.dtype == np.uint8:
        return np.clip(round_half_away(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def normalize(image: np.ndarray) -> np.ndarray:
    if image.dtype != np.uint8:
        raise AlreadyNormalized(f"expected uint8 image, got {image.dtype}")
    return (image.astype(np.float64) / 255.0).astype(np.float32)


def load_resized(path: str | Path, size: int) -> np.ndarray:
    return resize(load_image(path), size, size)


def load_images(paths: Sequence[Path], size: int, workers: int = 1) -> np.ndarray:
    """Load and resize many images into one ``(N, size, size, 3)`` uint8 stack.

    The result is in input order regardless of ``workers``.
    """
    out = np.empty((len(paths), size, size, 3), dtype=np.uint8)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, img in enumerate(pool.map(lambda p: load_resized(p, size), paths)):
                out[i] = img
    else:
        for i, p in enumerate(paths):
            out[i] = load_resized(p, size)
    return out


def _n_train(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 0.5))


def split(
    records: Sequence[SampleRecord], ratio: float = 0.8, seed: int = 0, stratified: bool = False
) -> SplitResult:
    """Seeded train/validation partition.

    The training side receives ``round(ratio * N)`` records (half rounds up);
    with ``stratified`` the same rule is applied within each class.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if len(records) < 2:
        raise DegenerateSplit(f"need at least 2 records, got {len(records)}")
    rng = np.random.default_rng(seed)
    train: list[SampleRecord] = []
    validation: list[SampleRecord] = []
    if stratified:
        groups: dict[str, list[SampleRecord]] = {}
        for r in records:
            groups.setdefault(r.dx, []).append(r)
        for dx in sorted(groups):
            members = groups[dx]
            order = rng.permutation(len(members))
            k = _n_train(len(members), ratio)
            train.extend(members[i] for i in order[:k])
            validation.extend(members[i] for i in order[k:])
    else:
        order = rng.permutation(len(records))
        k = _n_train(len(records), ratio)
        train = [records[i] for i in order[:k]]
        validation = [records[i] for i in order[k:]]
    if not train or not validation:
        raise DegenerateSplit(
            f"ratio {ratio} on {len(records)} records leaves an empty side "
            f"({len(train)} train, {len(validation)} validation)"
        )
    return SplitResult(train=train, validation=validation, seed=seed, ratio=ratio)
