"""Binary image dataset container and the synthetic blob generator.

File layout (little-endian)::

    8 bytes   magic b"CEATDS1\\0"
    u32       image count
    u16, u16  height, width
    u8        channels
    u16       class count
    count*H*W*C u8 pixels, row-major (N, H, W, C)
    count u16 labels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CEATDS1\0"
_HEADER = struct.Struct("<IHHBH")
MAX_SYNTH_SIZE = 64


class CorruptDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a (N, H, W, C) uint8 array")
        if len(self.labels) != len(self.images):
            raise ValueError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def pixels(self, index=slice(None)) -> np.ndarray:
        """Images scaled to [0, 1] as float64 (callers cast to working precision)."""
        return self.images[index].astype(np.float64) / 255.0

    def class_index(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.num_classes)}


def encode_dataset(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    header = MAGIC + _HEADER.pack(n, h, w, c, ds.num_classes)
    return header + np.ascontiguousarray(ds.images).tobytes() + ds.labels.astype("<u2").tobytes()


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < len(MAGIC) + _HEADER.size or buf[: len(MAGIC)] != MAGIC:
        raise CorruptDatasetError("bad magic or truncated header")
    n, h, w, c, k = _HEADER.unpack_from(buf, len(MAGIC))
    if min(h, w, c) == 0:
        raise CorruptDatasetError("zero image dimension in header")
    off = len(MAGIC) + _HEADER.size
    pix = n * h * w * c
    expected = off + pix + 2 * n
    if len(buf) != expected:
        raise CorruptDatasetError(f"corrupt payload: expected {expected} bytes, found {len(buf)}")
    images = np.frombuffer(buf, dtype=np.uint8, count=pix, offset=off).reshape(n, h, w, c).copy()
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off + pix).astype(np.int64)
    if n and labels.max() >= k:
        raise CorruptDatasetError(f"label {int(labels.max())} overflows class count {k}")
    return Dataset(images, labels, k)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def generate_synthetic(
    num_classes: int = 10,
    train_per_class: int = 200,
    test_per_class: int = 50,
    size: int = 16,
    channels: int = 3,
    seed: int = 1993,
    blobs: int = 3,
    noise: float = 0.12,
    max_shift: int = 1,
) -> tuple[Dataset, Dataset]:
    """Class-conditional Gaussian-blob images as (train, test) datasets.

    Every class owns a fixed template of ``blobs`` coloured Gaussian blobs.
    A sample is its class template shifted by up to ``max_shift`` pixels,
    rescaled in brightness and corrupted with pixel noise.
    """
    if not (1 <= size <= MAX_SYNTH_SIZE) or channels not in (1, 3):
        raise ValueError(f"invalid synthetic dims: size={size}, channels={channels}")
    if num_classes < 1 or train_per_class < 1 or test_per_class < 0:
        raise ValueError("invalid synthetic counts")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.zeros((num_classes, size, size, channels))
    for k in range(num_classes):
        bg = rng.uniform(0.1, 0.3, size=channels)
        img = np.broadcast_to(bg, (size, size, channels)).copy()
        for _ in range(blobs):
            cy, cx = rng.uniform(2, size - 2, size=2)
            sigma = rng.uniform(1.2, 3.0) * size / 16
            colour = rng.uniform(-0.6, 0.8, size=channels)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            img += g[..., None] * colour
        templates[k] = img

    def draw(per_class):
        total = per_class * num_classes
        labels = np.repeat(np.arange(num_classes), per_class)
        images = np.empty((total, size, size, channels), dtype=np.uint8)
        for i, k in enumerate(labels):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(templates[k], (dy, dx), axis=(0, 1))
            img = img * rng.uniform(0.8, 1.2) + rng.normal(0, noise, size=img.shape)
            images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        order = rng.permutation(total)
        return Dataset(images[order], labels[order], num_classes)

    return draw(train_per_class), draw(test_per_class)
