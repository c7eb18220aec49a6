"""Image ingestion, seeded patch sampling and image export."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MIN_SIDE = 64
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
IMAGE_SUFFIXES = {".png", ".ppm"}


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ImageFormatError(f"{self.id}: expected H x W x 3 pixels, got {self.pixels.shape}")

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


def _check_png_header(path: Path, head: bytes) -> None:
    # IHDR: length(4) type(4) width(4) height(4) depth(1) color(1) comp(1) filter(1) interlace(1)
    if len(head) < 29 or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path.name}: malformed PNG header")
    depth, color, interlace = head[24], head[25], head[28]
    if depth != 8:
        raise ImageFormatError(f"{path.name}: {depth}-bit PNG is not supported (8-bit only)")
    if interlace:
        raise ImageFormatError(f"{path.name}: interlaced PNG is not supported")
    if color not in (2, 6):
        raise ImageFormatError(f"{path.name}: PNG must be RGB or RGBA (color type {color})")


def _check_ppm_header(path: Path, head: bytes) -> None:
    if not head.startswith(b"P6"):
        raise ImageFormatError(f"{path.name}: only binary PPM (P6) is supported")
    tokens = []
    for line in head.split(b"\n")[:4]:
        tokens.extend(line.split(b"#", 1)[0].split())
    if len(tokens) >= 4 and int(tokens[3]) != 255:
        raise ImageFormatError(f"{path.name}: PPM maxval must be 255")


def read_image(path: Path) -> ImageRecord:
    """Decode an 8-bit RGB PNG or binary PPM into a float image in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(64)
    if head.startswith(PNG_SIGNATURE):
        _check_png_header(path, head)
    elif head.startswith(b"P"):
        _check_ppm_header(path, head)
    else:
        raise ImageFormatError(f"{path.name}: not a PNG or PPM file")
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageRecord(path.stem, arr.astype(np.float32) / np.float32(255))


def write_png(path: Path, pixels: np.ndarray) -> None:
    """Write H x W x 3 (or H x W grayscale) floats in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_ppm(path: Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_directory(directory: Path, min_side: int = MIN_SIDE) -> tuple[list[ImageRecord], list[str]]:
    """All decodable images in ``directory`` sorted by name, plus warnings for skipped files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    records, warnings = [], []
    for path in sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            rec = read_image(path)
        except (ImageFormatError, OSError, ValueError) as exc:
            msg = f"skipped {path.name}: {exc}"
            log.warning(msg)
            warnings.append(msg)
            continue
        h, w = rec.pixels.shape[:2]
        if min(h, w) < min_side:
            msg = f"skipped {path.name}: {h}x{w} is smaller than {min_side}"
            log.warning(msg)
            warnings.append(msg)
            continue
        records.append(rec)
    return records, warnings


def random_crop(pixels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = pixels.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return pixels[top:top + size, left:left + size]


def center_crop_multiple(pixels: np.ndarray, multiple: int = 8) -> np.ndarray:
    h, w = pixels.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return pixels[top:top + nh, left:left + nw]


def load_dataset(directory: Path, patch: int | None = None, seed: int = 0,
                 epoch: int = 0) -> Iterator[ImageRecord]:
    """Yield one record per usable image.

    With ``patch`` set, each image yields one random ``patch`` x ``patch`` crop
    whose offset depends only on ``(seed, epoch, image index)``; images smaller
    than the patch are skipped with a warning. Without ``patch`` the full image
    is center-cropped to a multiple of 8 (the test-set convention).
    """
    records, _ = read_directory(directory, min_side=max(MIN_SIDE, patch or 0))
    if not records:
        raise ValueError(f"no usable images in {directory}")
    for i, rec in enumerate(records):
        if patch is None:
            yield ImageRecord(rec.id, center_crop_multiple(rec.pixels))
        else:
            rng = np.random.default_rng([seed, epoch, i])
            yield ImageRecord(rec.id, random_crop(rec.pixels, patch, rng))


@dataclass
class PatchSet:
    """Images from which one seeded random patch per image is drawn each epoch."""

    images: list[np.ndarray]  # each H x W x 3
    patch_size: int
    seed: int = 0
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.patch_size % 8:
            raise ValueError("patch_size must be divisible by 8")
        small = [i for i, im in enumerate(self.images) if min(im.shape[:2]) < self.patch_size]
        if small:
            raise ValueError(f"{len(small)} images are smaller than the {self.patch_size} patch")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.images))]

    @classmethod
    def from_array(cls, patches: np.ndarray, seed: int = 0) -> "PatchSet":
        """Wrap fixed N x 3 x P x P patches (cropping is then the identity)."""
        patches = np.asarray(patches, dtype=np.float32)
        return cls([p.transpose(1, 2, 0) for p in patches], patches.shape[-1], seed)

    @classmethod
    def from_directory(cls, directory: Path, patch_size: int, seed: int = 0) -> "PatchSet":
        records, _ = read_directory(directory, min_side=max(MIN_SIDE, patch_size))
        if not records:
            raise ValueError(f"no usable images in {directory}")
        return cls([r.pixels for r in records], patch_size, seed, [r.id for r in records])

    def __len__(self) -> int:
        return len(self.images)

    def epoch(self, index: int) -> np.ndarray:
        """N x 3 x P x P float32 patches for one epoch."""
        out = np.empty((len(self), 3, self.patch_size, self.patch_size), dtype=np.float32)
        for i, im in enumerate(self.images):
            rng = np.random.default_rng([self.seed, index, i])
            out[i] = random_crop(im, self.patch_size, rng).transpose(2, 0, 1)
        return out

    def split(self, val_fraction: float, seed: int) -> tuple["PatchSet", "PatchSet"]:
        """Hold out ``val_fraction`` of the images (at least one) for validation."""
        n = len(self)
        if n == 0:
            raise ValueError("empty dataset")
        n_val = max(1, int(round(n * val_fraction))) if val_fraction > 0 and n > 1 else 0
        order = np.random.default_rng(seed).permutation(n)
        val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])

        def subset(idx):
            return PatchSet([self.images[i] for i in idx], self.patch_size, self.seed,
                            [self.ids[i] for i in idx])

        return subset(train_idx), subset(val_idx)
