"""Small natural-image corpus built from the photographs bundled with scikit-image.

Training tiles and test crops come from disjoint pixel regions: the bottom
``holdout`` rows of every training photograph, plus the whole of ``chelsea``,
are reserved for testing.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import PatchSet, write_png

TRAIN_SOURCES = ("astronaut", "coffee", "rocket", "immunohistochemistry", "hubble_deep_field")
TEST_ONLY_SOURCES = ("chelsea",)


@lru_cache(maxsize=None)
def _photo(name: str) -> np.ndarray:
    import skimage.data

    im = getattr(skimage.data, name)()
    return (im[..., :3].astype(np.float32) / np.float32(255)).copy()


def _tiles(im: np.ndarray, size: int) -> list[np.ndarray]:
    h, w = im.shape[:2]
    return [im[r:r + size, c:c + size] for r in range(0, h - size + 1, size)
            for c in range(0, w - size + 1, size)]


def training_tiles(tile: int = 80, holdout: int = 128) -> list[np.ndarray]:
    """Non-overlapping ``tile`` x ``tile`` tiles from the training photographs."""
    out = []
    for name in TRAIN_SOURCES:
        im = _photo(name)
        out.extend(_tiles(im[:im.shape[0] - holdout], tile))
    return out


def training_patches(patch: int = 64, tile: int = 80, seed: int = 0, holdout: int = 128) -> PatchSet:
    return PatchSet(training_tiles(tile, holdout), patch, seed)


def test_images(size: int = 128, count: int | None = None, holdout: int = 128) -> list[tuple[str, np.ndarray]]:
    """``size`` x ``size`` crops never seen by :func:`training_tiles`, as (id, H x W x 3)."""
    out = []
    for name in TEST_ONLY_SOURCES:
        for i, t in enumerate(_tiles(_photo(name), size)):
            out.append((f"{name}_{i}", t))
    for name in TRAIN_SOURCES:
        im = _photo(name)
        strip = im[im.shape[0] - holdout:]
        for i, t in enumerate(_tiles(strip, size)[:3]):
            out.append((f"{name}_{i}", t))
    return out[:count] if count else out


def test_batch(size: int = 128, count: int | None = None) -> tuple[list[str], np.ndarray]:
    items = test_images(size, count)
    return [i for i, _ in items], np.stack([im.transpose(2, 0, 1) for _, im in items]).astype(np.float32)


def write_sample_dataset(root: Path, tile: int = 80, test_size: int = 128) -> tuple[Path, Path]:
    """Write ``root/train`` tiles and ``root/test`` crops as PNG files."""
    train_dir, test_dir = Path(root) / "train", Path(root) / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(training_tiles(tile)):
        write_png(train_dir / f"tile_{i:04d}.png", t)
    for name, im in test_images(test_size):
        write_png(test_dir / f"{name}.png", im)
    return train_dir, test_dir
