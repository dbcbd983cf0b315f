"""On-disk artifact writers: PGM images, attention-map dumps, segmentation
maps, and raw sample caches.

Attention maps go to ``attn/layer{l}/scale{s}/cat{k}`` as three files per
map: a raw little-endian float64 grid (.f64), a JSON sidecar (.json), and
an 8-bit PGM rendering min-max normalized to [0, 1] (.pgm).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import SceneSample, palette
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary 8-bit PGM (P5). Input must already be uint8-ranged."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ShapeError(f"PGM needs a 2-d grid, got {gray.shape}")
    if gray.dtype != np.uint8:
        if gray.min() < 0 or gray.max() > 255:
            raise ShapeError("PGM values must lie in [0, 255]")
        gray = gray.astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ShapeError(f"{path}: not a binary PGM")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ShapeError(f"{path}: only maxval 255 supported, got {maxval}")
    return np.frombuffer(parts[3][: h * w], dtype=np.uint8).reshape(h, w)


def normalize_unit(grid: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant grid maps to all zeros."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def export_attention_maps(attn_weights: list[dict[int, Tensor]], out_dir,
                          write_renders: bool = True) -> list[Path]:
    """Dump every (layer, scale, category) map; returns the .f64 paths."""
    out_dir = Path(out_dir)
    written = []
    for layer, by_scale in enumerate(attn_weights):
        for scale, w in by_scale.items():
            grids = w.data if isinstance(w, Tensor) else np.asarray(w)
            base = out_dir / "attn" / f"layer{layer}" / f"scale{scale}"
            base.mkdir(parents=True, exist_ok=True)
            for k in range(grids.shape[0]):
                grid = np.ascontiguousarray(grids[k], dtype="<f8")
                stem = base / f"cat{k}"
                f64 = stem.with_suffix(".f64")
                f64.write_bytes(grid.tobytes())
                stem.with_suffix(".json").write_text(json.dumps({
                    "shape": list(grid.shape),
                    "scale": scale,
                    "layer": layer,
                    "category": k,
                }, indent=2))
                if write_renders:
                    render = np.round(normalize_unit(grid) * 255.0)
                    write_pgm(stem.with_suffix(".pgm"), render)
                written.append(f64)
    return written


def load_attention_map(f64_path) -> tuple[np.ndarray, dict]:
    f64_path = Path(f64_path)
    meta = json.loads(f64_path.with_suffix(".json").read_text())
    grid = np.frombuffer(f64_path.read_bytes(), dtype="<f8")
    return grid.reshape(meta["shape"]).copy(), meta


def export_segmentation(pred: np.ndarray, out_path,
                        n_categories: int, with_palette: bool = True) -> None:
    """Category-id PGM plus a JSON sidecar describing the id space."""
    if n_categories > 255:
        raise ConfigError(f"PGM export limited to 255 categories, got {n_categories}")
    pred = np.asarray(pred)
    if pred.min() < 0 or pred.max() >= n_categories:
        raise ShapeError("prediction ids must lie in [0, n_categories)")
    out_path = Path(out_path)
    write_pgm(out_path, pred.astype(np.uint8))
    meta = {"n_categories": n_categories, "shape": list(pred.shape)}
    if with_palette:
        meta["palette"] = [[round(c, 6) for c in row] for row in palette(n_categories)]
    out_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def export_sample(sample: SceneSample, out_dir, n_categories: int) -> Path:
    """One scene on disk: raw f64 image + label PGM + JSON meta."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"sample_{sample.seed}"
    image = np.ascontiguousarray(sample.image, dtype="<f8")
    stem.with_suffix(".f64").write_bytes(image.tobytes())
    write_pgm(stem.with_suffix(".pgm"), sample.label_map.astype(np.uint8))
    stem.with_suffix(".json").write_text(json.dumps({
        "seed": sample.seed,
        "image_shape": list(sample.image.shape),
        "n_categories": n_categories,
        "shapes": [{"category": s.category, "kind": s.kind,
                    "analytic_area": s.analytic_area,
                    "perimeter": s.perimeter,
                    "pixel_count": s.pixel_count} for s in sample.shapes],
    }, indent=2))
    return stem


def load_sample_image(stem) -> np.ndarray:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = np.frombuffer(stem.with_suffix(".f64").read_bytes(), dtype="<f8")
    return raw.reshape(meta["image_shape"]).copy()
