"""Synthetic colored-shape images for desk-scale training and evaluation.

Each image holds 2-3 non-overlapping shapes of distinct colors on a shaded
background whose hue varies per image; the color name is the category. Ground truth uses 0 for
background and 1..K for the categories in ``CATEGORIES`` order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CATEGORIES = ("red", "green", "blue", "yellow")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
# background hues kept away from the category colors
BACKGROUNDS = (
    (0.12, 0.12, 0.14),
    (0.55, 0.55, 0.55),
    (0.45, 0.2, 0.5),
    (0.1, 0.45, 0.45),
    (0.4, 0.28, 0.15),
    (0.85, 0.6, 0.75),
)
SHAPES = ("square", "disc", "triangle")


@dataclass
class SyntheticSample:
    image_id: str
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    label: np.ndarray        # (H, W) uint8, 0 = background
    categories: list[str]


def _shape_mask(shape: str, side: int, y0: int, x0: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    ry, rx = yy - y0, xx - x0
    inside = (ry >= 0) & (ry < size) & (rx >= 0) & (rx < size)
    if shape == "square":
        return inside
    if shape == "disc":
        c = (size - 1) / 2.0
        return inside & ((ry - c) ** 2 + (rx - c) ** 2 <= (size / 2.0) ** 2)
    # isosceles triangle, apex at top
    half = (ry + 1) * (size / 2.0) / size
    return inside & (np.abs(rx - (size - 1) / 2.0) <= half)


def make_sample(rng: np.random.Generator, image_id: str, side: int = 32, n_shapes: int | None = None,
                categories: tuple[str, ...] = CATEGORIES, chosen: list[int] | None = None) -> SyntheticSample:
    if chosen is None:
        n = n_shapes or int(rng.integers(2, 4))
        chosen = sorted(rng.choice(len(categories), size=n, replace=False).tolist())
    base = np.asarray(BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))])
    ramp = np.linspace(-0.08, 0.08, side)
    tilt = rng.uniform(-1.0, 1.0, size=2)
    shade = tilt[0] * ramp[:, None] + tilt[1] * ramp[None, :]
    image = np.clip(base[None, None, :] + shade[:, :, None], 0.0, 1.0).astype(np.float32)
    label = np.zeros((side, side), dtype=np.uint8)
    occupied = np.zeros((side, side), dtype=bool)
    placed = []
    for idx in chosen:
        for _ in range(200):
            size = int(rng.integers(side * 5 // 16, side // 2 + 1))
            y0 = int(rng.integers(0, side - size + 1))
            x0 = int(rng.integers(0, side - size + 1))
            mask = _shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], side, y0, x0, size)
            halo = np.zeros_like(occupied)
            halo[max(y0 - 1, 0):y0 + size + 1, max(x0 - 1, 0):x0 + size + 1] = True
            if not (halo & occupied).any():
                break
        else:
            continue
        occupied |= mask
        image[mask] = COLORS[categories[idx]]
        label[mask] = idx + 1
        placed.append(categories[idx])
    return SyntheticSample(image_id, image, label, placed)


def make_dataset(n_images: int = 8, side: int = 32, seed: int = 0) -> list[SyntheticSample]:
    """Images alternate 2 and 3 shapes; the least-used categories are picked first
    so every category appears about equally often with varied partners."""
    rng = np.random.default_rng(seed)
    used = np.zeros(len(CATEGORIES))
    samples = []
    for i in range(n_images):
        n = 2 + (i % 2)
        order = np.lexsort((rng.random(len(CATEGORIES)), used))
        chosen = sorted(order[:n].tolist())
        used[chosen] += 1
        samples.append(make_sample(rng, f"syn{i:03d}", side, chosen=chosen))
    return samples


def palette(with_background: bool = True) -> dict[int, str]:
    pal = {i + 1: c for i, c in enumerate(CATEGORIES)}
    if with_background:
        pal = {0: "background", **pal}
    return pal


def write_dataset(root: str | Path, samples: list[SyntheticSample]) -> dict[str, Path]:
    """Write images/, gt/, palette.json and manifest.jsonl under ``root``."""
    from .imageio import save_image, save_label_map

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        save_image(root / "images" / f"{s.image_id}.png", s.image)
        save_label_map(root / "gt" / f"{s.image_id}.png", s.label)
        lines.append(json.dumps({"image_path": f"images/{s.image_id}.png", "categories": s.categories}))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "palette.json").write_text(json.dumps({str(k): v for k, v in palette().items()}, indent=1) + "\n",
                                       encoding="utf-8")
    return {"root": root, "manifest": root / "manifest.jsonl", "images": root / "images",
            "gt": root / "gt", "palette": root / "palette.json"}


def training_samples(samples: list[SyntheticSample]):
    from .training import Sample

    return [Sample(s.image_id, s.image, list(s.categories)) for s in samples]


def eval_items(samples: list[SyntheticSample]):
    from .inference import EvalItem

    return [EvalItem(s.image_id, s.image, s.label) for s in samples]
