"""Synthetic stand-in for the lesion corpus: one colored shape per class.

Each class has its own shape and base hue; size, position, rotation, color
and background texture are jittered per image. Output mirrors the real
layout: ``<image_id>.png`` files plus a metadata CSV with the standard
seven columns.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, ImageDraw

DEFAULT_COUNTS = {"nv": 1200, "mel": 450, "bkl": 300, "bcc": 150, "akiec": 100, "vasc": 60, "df": 40}

_STYLE = {
    "akiec": ("triangle", (200, 60, 40)),
    "bcc": ("square", (60, 150, 210)),
    "bkl": ("circle", (150, 110, 50)),
    "df": ("cross", (70, 170, 70)),
    "mel": ("ring", (40, 30, 30)),
    "nv": ("ellipse", (180, 120, 170)),
    "vasc": ("diamond", (220, 200, 40)),
}
_DX_TYPES = ("histo", "follow_up", "consensus", "confocal")
_SITES = ("back", "lower extremity", "trunk", "upper extremity", "abdomen", "face", "chest", "scalp")


def _polygon(kind: str, cx: float, cy: float, r: float, angle: float) -> list[tuple[float, float]]:
    if kind == "triangle":
        pts = [(0, -1), (0.87, 0.5), (-0.87, 0.5)]
    elif kind == "square":
        pts = [(-0.75, -0.75), (0.75, -0.75), (0.75, 0.75), (-0.75, 0.75)]
    elif kind == "diamond":
        pts = [(0, -1), (0.6, 0), (0, 1), (-0.6, 0)]
    else:  # cross
        a, b = 0.3, 1.0
        pts = [(-a, -b), (a, -b), (a, -a), (b, -a), (b, a), (a, a), (a, b), (-a, b), (-a, a), (-b, a), (-b, -a), (-a, -a)]
    c, s = math.cos(angle), math.sin(angle)
    return [(cx + r * (x * c - y * s), cy + r * (x * s + y * c)) for x, y in pts]


def render(dx: str, rng: np.random.Generator, height: int = 96, width: int = 128) -> np.ndarray:
    kind, base = _STYLE[dx]
    skin = np.array([225, 185, 160]) + rng.integers(-20, 21, size=3)
    bg = np.clip(skin + rng.normal(0, 8, size=(height, width, 3)), 0, 255).astype(np.uint8)
    img = Image.fromarray(bg, "RGB")
    draw = ImageDraw.Draw(img)
    color = tuple(int(v) for v in np.clip(np.array(base) + rng.integers(-20, 21, size=3), 0, 255))
    r = rng.uniform(0.22, 0.32) * min(height, width)
    cx = width / 2 + rng.uniform(-0.12, 0.12) * width
    cy = height / 2 + rng.uniform(-0.12, 0.12) * height
    angle = rng.uniform(-0.4, 0.4)
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif kind == "ellipse":
        draw.ellipse([cx - 1.2 * r, cy - 0.6 * r, cx + 1.2 * r, cy + 0.6 * r], fill=color)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        inner = 0.55 * r
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=tuple(int(v) for v in skin))
    else:
        draw.polygon(_polygon(kind, cx, cy, r, angle), fill=color)
    return np.asarray(img, dtype=np.uint8)


def generate(
    image_dir: str | Path,
    manifest_path: str | Path,
    counts: Mapping[str, int] = DEFAULT_COUNTS,
    height: int = 96,
    width: int = 128,
    seed: int = 0,
    missing_age_frac: float = 0.03,
) -> int:
    """Write the images and the manifest; returns the number of records."""
    image_dir, manifest_path = Path(image_dir), Path(manifest_path)
    image_dir.mkdir(parents=True, exist_ok=True)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    unknown = set(counts) - set(_STYLE)
    if unknown:
        raise ValueError(f"unknown classes in synthetic counts: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    labels = [dx for dx in sorted(counts) for _ in range(int(counts[dx]))]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    rows = []
    for i, dx in enumerate(labels):
        image_id = f"SYN_{i:07d}"
        Image.fromarray(render(dx, rng, height, width)).save(image_dir / f"{image_id}.png")
        age = "" if rng.random() < missing_age_frac else f"{5 * int(rng.integers(1, 18))}.0"
        rows.append(
            [
                f"LES_{i // 2:07d}",
                image_id,
                dx,
                _DX_TYPES[int(rng.integers(len(_DX_TYPES)))],
                age,
                "male" if rng.random() < 0.5 else "female",
                _SITES[int(rng.integers(len(_SITES)))],
            ]
        )
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization"])
        writer.writerows(rows)
    return len(rows)
