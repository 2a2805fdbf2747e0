"""PNG reading and writing for RGB images and indexed label maps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_INDEX = 255


def load_image(path: str | Path, side: int | None = None) -> np.ndarray:
    """RGB float32 array in [0, 1]; bilinearly resized to ``side`` x ``side`` if given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_label_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label maps must be single-channel (got mode {im.mode})")
        return np.asarray(im, dtype=np.uint8).copy()


def save_label_map(path: str | Path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path, format="PNG")


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG")


def load_palette(path: str | Path) -> dict[int, str]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    pal = {int(k): str(v) for k, v in raw.items()}
    if IGNORE_INDEX in pal:
        raise ValueError(f"{path}: index {IGNORE_INDEX} is reserved for ignore")
    return pal
