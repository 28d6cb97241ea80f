"""Training-set rebalancing and seeded affine augmentation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .dataset import SampleRecord, normalize, round_half_away
from .errors import EmptyClass, SingularTransform


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    max_rotation_deg: float = 20.0
    max_shear_deg: float = 10.0
    max_translate_frac: float = 0.1
    fill_policy: str = "nearest_edge"
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_rotation_deg < 0 or self.max_shear_deg < 0:
            raise ValueError("rotation and shear ranges must be non-negative")
        if not 0.0 <= self.max_translate_frac < 1.0:
            raise ValueError("max_translate_frac must lie in [0, 1)")
        if self.fill_policy != "nearest_edge":
            raise ValueError(f"unsupported fill policy {self.fill_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AffineTransform:
    """Maps centered output pixel coordinates ``(x, y, 1)`` to centered source coordinates."""

    m: np.ndarray  # (2, 3)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m[:, :2]))

    def inverse(self) -> "AffineTransform":
        if self.det == 0.0:
            raise SingularTransform("linear part is singular")
        a_inv = np.linalg.inv(self.m[:, :2])
        return AffineTransform(np.hstack([a_inv, -(a_inv @ self.m[:, 2:])]))


def cap_classes(records: Sequence[SampleRecord], cap: int, seed: int = 0) -> list[SampleRecord]:
    """Keep at most ``cap`` records per class, chosen uniformly without replacement.

    Surviving records keep their input order.
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.dx, []).append(i)
    keep: list[int] = []
    for dx in sorted(by_class):
        idx = by_class[dx]
        if len(idx) > cap:
            chosen = rng.choice(len(idx), size=cap, replace=False)
            keep.extend(idx[j] for j in chosen)
        else:
            keep.extend(idx)
    return [records[i] for i in sorted(keep)]


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Balanced weights ``N / (K * n_c)``; minority classes get the largest weight."""
    counts = np.asarray(counts, dtype=np.int64)
    for c, n in enumerate(counts):
        if n <= 0:
            raise EmptyClass(c)
    total = counts.sum()
    return total / (len(counts) * counts.astype(np.float64))


def _cos_sin(deg: float) -> tuple[float, float]:
    # Quarter turns are snapped so 90 degree rotations stay exact.
    quarter = deg / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def make_transform(
    rotation_deg: float = 0.0, shear_deg: float = 0.0, tx: float = 0.0, ty: float = 0.0
) -> AffineTransform:
    """Compose translate . rotate . shear (x-axis shear applied first)."""
    c, s = _cos_sin(rotation_deg)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, math.tan(math.radians(shear_deg))], [0.0, 1.0]])
    lin = rot @ shear
    return AffineTransform(np.array([[lin[0, 0], lin[0, 1], tx], [lin[1, 0], lin[1, 1], ty]]))


def sample_transform(
    cfg: AugmentConfig, rng: np.random.Generator, height: int = 1, width: int = 1
) -> tuple[AffineTransform, bool, bool, dict]:
    """Draw one random transform; advances ``rng``.

    Draw order is fixed: rotation, shear, tx, ty, hflip, vflip. Translations
    are in pixels, scaled by ``width``/``height``. The last element of the
    returned tuple holds the raw sampled parameters for logging.
    """
    rotation = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    shear = rng.uniform(-cfg.max_shear_deg, cfg.max_shear_deg)
    tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * width
    ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * height
    hflip = bool(rng.random() < cfg.hflip_prob)
    vflip = bool(rng.random() < cfg.vflip_prob)
    params = {
        "rotation_deg": float(rotation),
        "shear_deg": float(shear),
        "tx": float(tx),
        "ty": float(ty),
        "hflip": hflip,
        "vflip": vflip,
    }
    return make_transform(rotation, shear, tx, ty), hflip, vflip, params


def _is_identity(t: AffineTransform) -> bool:
    return bool(np.array_equal(t.m, AffineTransform.identity().m))


def warp(image: np.ndarray, t: AffineTransform) -> np.ndarray:
    """Inverse-warp ``image`` through ``t`` with bilinear sampling and edge clamping."""
    if t.det == 0.0:
        raise SingularTransform(f"transform {t.m.tolist()} is singular")
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xc, yc = xs - cx, ys - cy
    m = t.m
    sx = m[0, 0] * xc + m[0, 1] * yc + m[0, 2] + cx
    sy = m[1, 0] * xc + m[1, 1] * yc + m[1, 2] + cy
    sx = np.clip(sx, 0.0, w - 1)
    sy = np.clip(sy, 0.0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = image.astype(np.float64)
    top = src[y0, x0] + (src[y0, x1] - src[y0, x0]) * fx
    bottom = src[y1, x0] + (src[y1, x1] - src[y1, x0]) * fx
    out = top + (bottom - top) * fy
    if image.dtype == np.uint8:
        return np.clip(round_half_away(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def apply_transform(
    image: np.ndarray, t: AffineTransform, hflip: bool = False, vflip: bool = False
) -> np.ndarray:
    """Flip, then warp. Output has the input's shape and dtype."""
    if image.size == 0:
        raise ValueError("cannot transform an empty image")
    if t.det == 0.0:
        raise SingularTransform(f"transform {t.m.tolist()} is singular")
    out = image
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    if _is_identity(t):
        return np.ascontiguousarray(out)
    return warp(out, t)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; depends only on (seed, epoch, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def augment_one(image: np.ndarray, cfg: AugmentConfig, epoch: int, index: int) -> np.ndarray:
    rng = sample_rng(cfg.seed, epoch, index)
    t, hflip, vflip, _ = sample_transform(cfg, rng, image.shape[0], image.shape[1])
    return apply_transform(image, t, hflip, vflip)


def augmented_stream(
    records: Sequence[SampleRecord],
    images: Sequence[np.ndarray],
    cfg: AugmentConfig,
    epoch: int,
    workers: int = 1,
    order: Optional[Sequence[int]] = None,
) -> Iterator[tuple[np.ndarray, int]]:
    """Yield one augmented, normalized sample per record.

    ``images[i]`` is the uint8 image of ``records[i]``. Records are visited in
    ``order`` (default: record order); each sample's randomness depends only
    on ``(cfg.seed, epoch, i)``, so the output does not depend on ``workers``.
    """
    if len(records) != len(images):
        raise ValueError(f"{len(records)} records but {len(images)} images")
    indices = range(len(records)) if order is None else [int(i) for i in order]

    def work(i):
        return normalize(augment_one(images[i], cfg, epoch, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, img in zip(indices, pool.map(work, indices)):
                yield img, records[i].label_code
    else:
        for i in indices:
            yield work(i), records[i].label_code
