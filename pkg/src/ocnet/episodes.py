"""Episodic data model, fold splits, synthetic shape data, and folder I/O.

A dataset is a flat list of (image, mask, class_id) samples; episodes pair K
annotated support samples with one query sample of the same class. The
synthetic generator produces desk-scale scenes in the multi-object noise
regime: each image holds one labeled target shape plus unlabeled distractor
shapes from other classes (including held-out ones) on a textured background.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

GEOMETRIES = [
    "circle",
    "square",
    "triangle",
    "star",
    "ring",
    "cross",
    "ellipse",
    "diamond",
    "hexagon",
    "bar",
    "crescent",
    "lshape",
]

# Feature-grid stride of the encoder; generated masks must survive this
# downsampling so support pooling never sees an empty mask.
FEATURE_STRIDE = 4


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    class_id: int


class SegDataset:
    """Immutable collection of samples with a per-class index."""

    def __init__(self, samples: list[Sample], class_names: list[str]):
        self.samples = tuple(samples)
        self.class_names = tuple(class_names)
        self._by_class: dict[int, tuple[int, ...]] = {}
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            buckets.setdefault(s.class_id, []).append(i)
        self._by_class = {c: tuple(v) for c, v in buckets.items()}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_for_class(self, class_id: int) -> tuple[int, ...]:
        return self._by_class.get(class_id, ())

    def subset(self, class_ids) -> "SegDataset":
        keep = set(class_ids)
        return SegDataset(
            [s for s in self.samples if s.class_id in keep], list(self.class_names)
        )


@dataclass(frozen=True)
class ClassSplit:
    train_classes: frozenset
    test_classes: frozenset
    fold_id: int

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ValueError("train and test classes overlap")


@dataclass
class Episode:
    """One K-shot task. ``query_mask`` is None on the inference path."""

    support_images: list[np.ndarray]
    support_masks: list[np.ndarray]
    query_image: np.ndarray
    query_mask: np.ndarray | None
    class_id: int
    fold_id: int

    def __post_init__(self):
        hw = self.query_image.shape[:2]
        masks = list(self.support_masks) + ([self.query_mask] if self.query_mask is not None else [])
        for img in self.support_images:
            if img.shape[:2] != hw:
                raise ValueError("support/query image sizes differ within an episode")
        for m in masks:
            if m.shape != hw:
                raise ValueError("mask size differs from image size")
            vals = np.unique(m)
            if not np.all(np.isin(vals, [0, 1])):
                raise ValueError("masks must be strictly binary")
        for m in self.support_masks:
            if m.sum() == 0:
                raise ValueError("support mask has no foreground")

    def without_query_mask(self) -> "Episode":
        return Episode(
            self.support_images,
            self.support_masks,
            self.query_image,
            None,
            self.class_id,
            self.fold_id,
        )


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_classes: int = 12
    images_per_class: int = 60
    scale_range: tuple[float, float] = (0.14, 0.26)
    hue_jitter: float = 0.04
    distractor_range: tuple[int, int] = (0, 3)
    distractor_scale: float = 0.55  # distractors stay smaller than the target
    noise_level: float = 0.04
    min_object_frac: float = 0.02
    max_object_frac: float = 0.28
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 8:
            raise ValueError("need at least 8 classes so every fold holds >= 2")
        if self.distractor_range[0] < 0 or self.distractor_range[1] < self.distractor_range[0]:
            raise ValueError("invalid distractor range")


def make_folds(num_classes: int, fold_id: int) -> ClassSplit:
    """Contiguous-quarter class split: fold ``fold_id`` is held out for test."""
    if not 0 <= fold_id <= 3:
        raise ValueError(f"fold_id must be in 0..3, got {fold_id}")
    if num_classes % 4 != 0:
        raise ValueError(f"num_classes must be divisible by 4, got {num_classes}")
    q = num_classes // 4
    test = frozenset(range(fold_id * q, (fold_id + 1) * q))
    train = frozenset(range(num_classes)) - test
    return ClassSplit(train, test, fold_id)


def sample_episode(
    dataset: SegDataset,
    split_classes,
    k: int,
    rng: np.random.Generator,
    fold_id: int = 0,
    with_query_mask: bool = True,
) -> Episode:
    """Draw one episode: a class from the split, K support samples, 1 query.

    Classes with fewer than K+1 samples are skipped; all K+1 sample ids are
    distinct. The caller owns the RNG stream, so a fixed generator state
    replays the same episode sequence.
    """
    eligible = [c for c in sorted(split_classes) if len(dataset.indices_for_class(c)) >= k + 1]
    if not eligible:
        raise ValueError(f"no class in the split has at least {k + 1} samples")
    cid = int(eligible[rng.integers(len(eligible))])
    ids = rng.choice(len(dataset.indices_for_class(cid)), size=k + 1, replace=False)
    picks = [dataset.samples[dataset.indices_for_class(cid)[int(i)]] for i in ids]
    support, query = picks[:k], picks[k]
    return Episode(
        support_images=[s.image for s in support],
        support_masks=[s.mask for s in support],
        query_image=query.image,
        query_mask=query.mask if with_query_mask else None,
        class_id=cid,
        fold_id=fold_id,
    )


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def _inside(geometry: str, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    rho2 = ux * ux + uy * uy
    if geometry == "circle":
        return rho2 <= 1.0
    if geometry == "ellipse":
        return (ux / 1.0) ** 2 + (uy / 0.6) ** 2 <= 1.0
    if geometry == "square":
        return np.maximum(np.abs(ux), np.abs(uy)) <= 0.85
    if geometry == "diamond":
        return np.abs(ux) + np.abs(uy) <= 1.1
    if geometry == "triangle":
        return (uy <= 0.55) & (uy >= np.abs(ux) * math.sqrt(3.0) - 0.55)
    if geometry == "star":
        phi = np.arctan2(uy, ux)
        radius = 0.45 + 0.55 * (0.5 + 0.5 * np.cos(5.0 * phi))
        return rho2 <= radius * radius
    if geometry == "ring":
        return (rho2 <= 1.0) & (rho2 >= 0.55 * 0.55)
    if geometry == "cross":
        arm = 0.35
        return ((np.abs(ux) <= arm) & (np.abs(uy) <= 1.0)) | (
            (np.abs(uy) <= arm) & (np.abs(ux) <= 1.0)
        )
    if geometry == "hexagon":
        a = np.abs(ux)
        b = np.abs(ux * 0.5 + uy * math.sqrt(3.0) / 2.0)
        c = np.abs(ux * 0.5 - uy * math.sqrt(3.0) / 2.0)
        return np.maximum(np.maximum(a, b), c) <= 0.9
    if geometry == "bar":
        return (np.abs(ux) <= 1.0) & (np.abs(uy) <= 0.38)
    if geometry == "crescent":
        hole = (ux - 0.5) ** 2 + uy * uy
        return (rho2 <= 1.0) & (hole >= 0.75 * 0.75)
    if geometry == "lshape":
        box = (np.abs(ux) <= 1.0) & (np.abs(uy) <= 1.0)
        notch = (ux > -0.3) & (uy > -0.3)
        return box & ~notch
    raise ValueError(f"unknown geometry {geometry!r}")


def _rasterize(geometry: str, size: int, cx: float, cy: float, r: float, theta: float):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    px = (xs - cx) / r
    py = (ys - cy) / r
    ct, st = math.cos(theta), math.sin(theta)
    ux = ct * px + st * py
    uy = -st * px + ct * py
    return _inside(geometry, ux, uy), ux


def _bilerp(coarse: np.ndarray, size: int) -> np.ndarray:
    c = coarse.shape[0]
    xs = np.linspace(0.0, c - 1.0, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, c - 1)
    f = xs - i0
    rows = coarse[i0] * (1.0 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]


def class_color(class_id: int, num_classes: int) -> tuple[float, float, float]:
    hue = (0.13 + class_id * 0.618034) % 1.0
    return hue, 0.78, 0.92


def _paint_shape(image, inside, shade, hue, sat, val):
    r, g, b = colorsys.hsv_to_rgb(hue, sat, min(val, 1.0))
    color = np.stack([r * shade, g * shade, b * shade], axis=-1)
    image[inside] = np.clip(color[inside], 0.0, 1.0)


def _feature_grid_nonempty(mask: np.ndarray) -> bool:
    s = FEATURE_STRIDE
    h, w = mask.shape
    if h % s or w % s:
        return mask.sum() > 0
    cells = mask.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    return bool((cells >= 0.5).any())


def _draw_shape(
    image,
    cid: int,
    config: SynthConfig,
    rng: np.random.Generator,
    constrain: bool,
    scale_mult: float = 1.0,
):
    """Paint one shape of class ``cid``; returns its raster (maybe after retries)."""
    size = config.image_size
    geometry = GEOMETRIES[cid % len(GEOMETRIES)]
    hue, sat, val = class_color(cid, config.num_classes)
    for attempt in range(40):
        r = size * rng.uniform(*config.scale_range) * scale_mult
        cx = rng.uniform(0.2 * size, 0.8 * size)
        cy = rng.uniform(0.2 * size, 0.8 * size)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        inside, ux = _rasterize(geometry, size, cx, cy, r, theta)
        frac = inside.mean()
        if constrain:
            if not (config.min_object_frac <= frac <= config.max_object_frac):
                continue
            if not _feature_grid_nonempty(inside.astype(np.uint8)):
                continue
        elif frac == 0.0:
            continue
        shade = 0.82 + 0.18 * np.clip((ux + 1.0) * 0.5, 0.0, 1.0)
        jhue = (hue + rng.uniform(-config.hue_jitter, config.hue_jitter)) % 1.0
        _paint_shape(image, inside, shade, jhue, sat, val)
        return inside
    # fall back to a centered mid-scale disk of this class's color
    r = size * (config.scale_range[0] + config.scale_range[1]) * 0.5
    inside, ux = _rasterize("circle", size, size / 2.0, size / 2.0, r, 0.0)
    shade = 0.82 + 0.18 * np.clip((ux + 1.0) * 0.5, 0.0, 1.0)
    _paint_shape(image, inside, shade, hue, sat, val)
    return inside


def _render_sample(cid: int, config: SynthConfig, rng: np.random.Generator) -> Sample:
    size = config.image_size
    bg_hue = rng.uniform(0.0, 1.0)
    bg_val = rng.uniform(0.35, 0.6)
    r, g, b = colorsys.hsv_to_rgb(bg_hue, rng.uniform(0.05, 0.18), bg_val)
    image = np.empty((size, size, 3), dtype=np.float64)
    texture = _bilerp(rng.normal(size=(8, 8)), size) * 0.06
    image[..., 0] = r + texture
    image[..., 1] = g + texture
    image[..., 2] = b + texture

    lo, hi = config.distractor_range
    n_distract = int(rng.integers(lo, hi + 1))
    others = [c for c in range(config.num_classes) if c != cid]
    for _ in range(n_distract):
        dcid = int(others[rng.integers(len(others))])
        _draw_shape(image, dcid, config, rng, constrain=False, scale_mult=config.distractor_scale)
    # target drawn last so its silhouette is never occluded
    mask = _draw_shape(image, cid, config, rng, constrain=True)

    image += rng.normal(0.0, config.noise_level, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image.astype(np.float32), mask.astype(np.uint8), cid)


def generate_synthetic(config: SynthConfig) -> SegDataset:
    """Deterministic function of the config: same seed, same dataset."""
    rng = np.random.default_rng(config.seed)
    samples = []
    for cid in range(config.num_classes):
        for _ in range(config.images_per_class):
            samples.append(_render_sample(cid, config, rng))
    names = [f"class_{c:02d}" for c in range(config.num_classes)]
    return SegDataset(samples, names)


# ---------------------------------------------------------------------------
# Folder layout: <root>/<class_name>/<id>.img.png + <id>.mask.png
# ---------------------------------------------------------------------------


def save_dataset(dataset: SegDataset, root) -> None:
    root = Path(root)
    counters = {c: 0 for c in range(dataset.num_classes)}
    for s in dataset.samples:
        cdir = root / dataset.class_names[s.class_id]
        cdir.mkdir(parents=True, exist_ok=True)
        i = counters[s.class_id]
        counters[s.class_id] += 1
        img = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(cdir / f"{i:04d}.img.png")
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(
            cdir / f"{i:04d}.mask.png"
        )


def ingest_folder(root) -> SegDataset:
    """Load image/mask pairs; grayscale masks binarize at >= 128."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise ValueError(f"no classes found under {root}")
    samples = []
    names = []
    for cid, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        img_paths = sorted(cdir.glob("*.img.png"))
        if not img_paths:
            raise ValueError(f"no images found in class directory {cdir}")
        for img_path in img_paths:
            mask_path = cdir / (img_path.name[: -len(".img.png")] + ".mask.png")
            if not mask_path.exists():
                raise FileNotFoundError(f"missing mask for image {img_path}")
            try:
                image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
                mask_raw = np.asarray(Image.open(mask_path).convert("L"))
            except OSError as e:
                raise OSError(f"unreadable file under {cdir}: {e}") from e
            mask = (mask_raw >= 128).astype(np.uint8)
            samples.append(Sample(image, mask, cid))
    return SegDataset(samples, names)
