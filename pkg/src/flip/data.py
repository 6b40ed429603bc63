"""Synthetic shapes-and-colors dataset plus its binary container.

Each record is a 32x32 RGB image of one colored shape (4 colors x 4
shapes = 16 classes) at a random position and size on a noisy gray
background, captioned from a small template pool that shares its
vocabulary with the zero-shot prompts. Records are deterministic per
(seed, index): class cycles through all 16, everything else is drawn
from a counter-seeded generator, so generation order (or parallelism)
never changes the bytes.

File layout (little-endian): magic "FLIPDS01", count u32, height u16,
width u16, channels u8, then per record the raw u8 RGB image in
row-major order, a caption byte length u16, and the UTF-8 caption.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .masking import TAG_DATA, per_sample_rng

MAGIC = b"FLIPDS01"
IMAGE_SIZE = 32
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "cross")
CLASS_NAMES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)

_RGB = {
    "red": (220, 45, 40),
    "green": (50, 200, 70),
    "blue": (50, 90, 220),
    "yellow": (230, 215, 50),
}
_BACKGROUND = 128
_NOISE_STD = 5.0

CAPTION_TEMPLATES = (
    "a photo of a {}",
    "an image of a {}",
    "a picture of a {}",
    "a drawing of a {}",
    "a {}",
    "the {}",
    "a photo of the {}",
)


def flip_threads() -> int:
    """Worker-thread cap from FLIP_THREADS (default: machine cores)."""
    value = os.environ.get("FLIP_THREADS", "")
    return int(value) if value else (os.cpu_count() or 1)


@dataclass
class Dataset:
    images: np.ndarray  # u8 [n, h, w, 3]
    captions: list[str]

    def __len__(self):
        return self.images.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([class_of_caption(c) for c in self.captions], dtype=np.int64)


def class_of_caption(caption: str) -> int:
    """Class index recovered from the color and shape words of a caption."""
    words = set(caption.lower().split())
    color = next((i for i, c in enumerate(COLORS) if c in words), None)
    shape = next((i for i, s in enumerate(SHAPES) if s in words), None)
    if color is None or shape is None:
        raise DataFormatError(f"caption does not name a color and shape: {caption!r}")
    return color * len(SHAPES) + shape


def _shape_mask(shape: str, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # upward triangle: apex (cx, cy-r), base corners (cx +- r, cy + r)
        inside = (dy >= -r) & (dy <= r)
        half_width = (dy + r) / 2.0
        return inside & (np.abs(dx) <= half_width)
    if shape == "cross":
        w = r / 3.0
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= w) & (np.abs(dx) <= r)
        )
    raise ConfigError(f"unknown shape {shape!r}")


def make_record(seed: int, index: int) -> tuple[np.ndarray, str]:
    """One (image, caption) pair, deterministic in (seed, index)."""
    rng = per_sample_rng(seed, TAG_DATA, 0, index)
    label = index % len(CLASS_NAMES)
    color = COLORS[label // len(SHAPES)]
    shape = SHAPES[label % len(SHAPES)]

    r = rng.uniform(7.0, 12.0)
    lo, hi = r + 1.0, IMAGE_SIZE - 1.0 - r
    cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)

    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), _BACKGROUND, dtype=np.float64)
    img[_shape_mask(shape, cx, cy, r)] = _RGB[color]
    img += rng.normal(0.0, _NOISE_STD, img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)

    name = f"{color} {shape}"
    if rng.random() < 0.5:
        size_word = "big" if r >= 10.5 else "small" if r <= 8.5 else ""
        if size_word:
            name = f"{size_word} {name}"
    caption = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))].format(name)
    return img, caption


def generate_dataset(n: int, seed: int, out_path) -> Dataset:
    """Generate n records (threaded over indices) and write them to disk."""
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}")
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    captions: list[str] = [""] * n

    def fill(index: int):
        images[index], captions[index] = make_record(seed, index)

    workers = min(flip_threads(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for i in range(n):
            fill(i)

    ds = Dataset(images=images, captions=captions)
    write_dataset(out_path, ds)
    return ds


def write_dataset(path, ds: Dataset) -> None:
    n, h, w, c = ds.images.shape
    if len(ds.captions) != n:
        raise DataFormatError(f"{n} images but {len(ds.captions)} captions")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IHHB", n, h, w, c))
        for img, caption in zip(ds.images, ds.captions):
            if not caption:
                raise DataFormatError("captions must be nonempty")
            f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
            raw = caption.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: not a dataset file (bad magic)")
    off = len(MAGIC)
    try:
        n, h, w, c = struct.unpack_from("<IHHB", raw, off)
    except struct.error as e:
        raise DataFormatError(f"{path}: truncated header") from e
    off += struct.calcsize("<IHHB")
    img_bytes = h * w * c
    images = np.empty((n, h, w, c), dtype=np.uint8)
    captions: list[str] = []
    for i in range(n):
        if off + img_bytes + 2 > len(raw):
            raise DataFormatError(f"{path}: truncated at record {i}")
        images[i] = np.frombuffer(raw, np.uint8, img_bytes, off).reshape(h, w, c)
        off += img_bytes
        (cap_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + cap_len > len(raw):
            raise DataFormatError(f"{path}: truncated caption in record {i}")
        caption = raw[off : off + cap_len].decode("utf-8")
        if not caption:
            raise DataFormatError(f"{path}: empty caption in record {i}")
        captions.append(caption)
        off += cap_len
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Dataset(images=images, captions=captions)
