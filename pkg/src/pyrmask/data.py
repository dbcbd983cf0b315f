"""Deterministic synthetic scenes: colored geometric shapes on a dark
background, with per-pixel Gaussian noise.

Category 0 is always the background. Categories 1..K-1 key into a fixed
color palette; each scene paints 1 to 4 non-overlapping shapes chosen from
rectangle / disk / triangle. Everything is a pure function of the seed.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

NOISE_SIGMA = 0.05
MIN_SHAPE_PIXELS = 16
VAL_SEED_OFFSET = 10**6
BACKGROUND_COLOR = (0.12, 0.12, 0.14)


def palette(n_categories: int) -> np.ndarray:
    """[K, 3] base colors; slot 0 is the background."""
    colors = np.zeros((n_categories, 3))
    colors[0] = BACKGROUND_COLOR
    for k in range(1, n_categories):
        hue = (k - 1) / max(n_categories - 1, 1)
        colors[k] = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return colors


@dataclass
class ShapeInfo:
    category: int
    kind: str
    analytic_area: float
    perimeter: float
    pixel_count: int


@dataclass
class SceneSample:
    image: np.ndarray
    label_map: np.ndarray
    seed: int
    shapes: list[ShapeInfo]


def _pixel_grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys + 0.5, xs + 0.5


def _rasterize(kind: str, rng: np.random.Generator, h: int, w: int):
    """Sample one shape's geometry; returns (mask, analytic_area, perimeter)."""
    ys, xs = _pixel_grid(h, w)
    if kind == "rect":
        rh = int(rng.integers(5, max(h // 3, 6)))
        rw = int(rng.integers(5, max(w // 3, 6)))
        y0 = int(rng.integers(0, h - rh))
        x0 = int(rng.integers(0, w - rw))
        mask = np.zeros((h, w), dtype=bool)
        mask[y0:y0 + rh, x0:x0 + rw] = True
        return mask, float(rh * rw), float(2 * (rh + rw))
    if kind == "disk":
        r = float(rng.uniform(3.0, max(min(h, w) / 6.0, 3.5)))
        cy = float(rng.uniform(r, h - r))
        cx = float(rng.uniform(r, w - r))
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        return mask, float(np.pi * r * r), float(2 * np.pi * r)
    if kind == "triangle":
        for _ in range(8):
            cy = float(rng.uniform(h * 0.15, h * 0.85))
            cx = float(rng.uniform(w * 0.15, w * 0.85))
            rad = float(rng.uniform(4.0, min(h, w) / 5.0))
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=3))
            vy = cy + rad * np.sin(angles)
            vx = cx + rad * np.cos(angles)
            area2 = (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0])
            if abs(area2) < 2 * MIN_SHAPE_PIXELS:
                continue
            # signed half-plane test against each edge, orientation-aware
            sign = np.sign(area2)
            inside = np.ones((h, w), dtype=bool)
            for i in range(3):
                j = (i + 1) % 3
                cross = (vx[j] - vx[i]) * (ys - vy[i]) - (vy[j] - vy[i]) * (xs - vx[i])
                inside &= sign * cross >= 0
            edges = [np.hypot(vx[(i + 1) % 3] - vx[i], vy[(i + 1) % 3] - vy[i]) for i in range(3)]
            return inside, float(abs(area2) / 2.0), float(sum(edges))
        return np.zeros((h, w), dtype=bool), 0.0, 0.0
    raise ConfigError(f"unknown shape kind {kind!r}")


def generate_scene(seed: int, h: int, w: int, n_categories: int) -> SceneSample:
    if h % 32 or w % 32:
        raise ShapeError(f"scene size {h}x{w} must be a multiple of 32")
    if n_categories < 2:
        raise ConfigError(f"need >= 2 categories (background + shapes), got {n_categories}")
    rng = np.random.default_rng(seed)
    colors = palette(n_categories)
    label = np.zeros((h, w), dtype=np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    shapes: list[ShapeInfo] = []
    kinds = ("rect", "disk", "triangle")
    n_shapes = int(rng.integers(1, 5))
    for _ in range(n_shapes):
        category = int(rng.integers(1, n_categories))
        kind = kinds[int(rng.integers(0, 3))]
        for _ in range(12):
            mask, area, perimeter = _rasterize(kind, rng, h, w)
            count = int(mask.sum())
            if count >= MIN_SHAPE_PIXELS and not (mask & occupied).any():
                occupied |= mask
                label[mask] = category
                shapes.append(ShapeInfo(category, kind, area, perimeter, count))
                break
    image = np.empty((3, h, w))
    image[:] = np.asarray(BACKGROUND_COLOR)[:, None, None]
    for ch in range(3):
        image[ch][occupied] = colors[label[occupied], ch]
    image += rng.normal(0.0, NOISE_SIGMA, size=(3, h, w))
    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(image=image, label_map=label, seed=seed, shapes=shapes)


class SceneDataset:
    """Ordered, lazily generated split; sample i is a pure function of
    (base_seed, split, i)."""

    def __init__(self, split: str, size: int, base_seed: int, h: int, w: int,
                 n_categories: int):
        if split not in ("train", "val"):
            raise ConfigError(f"split must be train or val, got {split!r}")
        self.split = split
        self.size = size
        self.base_seed = base_seed
        self.h, self.w = h, w
        self.n_categories = n_categories

    def seed_of(self, i: int) -> int:
        offset = 0 if self.split == "train" else VAL_SEED_OFFSET
        return self.base_seed + offset + i

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i: int) -> SceneSample:
        if not 0 <= i < self.size:
            raise IndexError(i)
        return generate_scene(self.seed_of(i), self.h, self.w, self.n_categories)


def hflip_sample(sample: SceneSample) -> SceneSample:
    return SceneSample(
        image=sample.image[:, :, ::-1].copy(),
        label_map=sample.label_map[:, ::-1].copy(),
        seed=sample.seed,
        shapes=sample.shapes,
    )
