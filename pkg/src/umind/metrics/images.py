"""Image loading and colour conversion for the reconstruction metrics."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import DataError, FormatError, LoadError

# ITU-R BT.601 luma weights.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def as_image(x) -> np.ndarray:
    """float64 H x W x 3 (or H x W) array, checked to lie in [0, 1]."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise FormatError(f"expected an H x W or H x W x 3 image, got shape {a.shape}")
    if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
        raise DataError("image values must be finite and within [0, 1]")
    return a


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img @ GRAY_WEIGHTS


def check_pair(generated, reference) -> tuple[np.ndarray, np.ndarray]:
    g, r = as_image(generated), as_image(reference)
    if g.shape != r.shape:
        raise FormatError(f"image shapes differ: {g.shape} vs {r.shape}")
    return g, r


def load_image(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    """RGB image scaled to [0, 1]; optionally resized (bicubic) to ``size`` = (height, width)."""
    from PIL import Image

    p = Path(path)
    if not p.is_file():
        raise LoadError(f"image not found: {p}")
    with Image.open(p) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BICUBIC)
        return np.asarray(im, dtype=np.float64) / 255.0


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    from PIL import Image

    a = np.clip(np.round(as_image(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def list_images(directory: str | os.PathLike) -> dict[str, Path]:
    """Image files in a directory keyed by file stem."""
    d = Path(directory)
    if not d.is_dir():
        raise LoadError(f"image directory not found: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}
