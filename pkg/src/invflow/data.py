"""Image datasets: IDX (MNIST-style) and CIFAR-10 binary files, plus synthetic sets."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DimensionError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    """8-bit images stored as one ``(N, C, H, W)`` uint8 array."""

    images: np.ndarray
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 4:
            raise DimensionError(f"images must be (N, C, H, W), got shape {imgs.shape}")
        if imgs.dtype != np.uint8:
            if np.any(imgs < 0) or np.any(imgs > 255) or np.any(imgs != np.round(imgs)):
                raise ArgumentError("pixel values must be integers in [0, 255]")
            imgs = imgs.astype(np.uint8)
        self.images = imgs

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return self.images[i]

    @property
    def shape(self):
        return self.images.shape[1:]


def load_idx(path) -> Dataset:
    """Parse an IDX image file (big-endian magic 0x00000803, count, rows, cols)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != IDX_IMAGES_MAGIC:
        what = " (an IDX label file)" if magic == IDX_LABELS_MAGIC else ""
        raise FormatError(f"bad IDX magic 0x{magic:08x}{what}; expected 0x{IDX_IMAGES_MAGIC:08x}", offset=0)
    if len(data) < 16:
        raise FormatError("truncated IDX header", offset=len(data))
    count, rows, cols = struct.unpack_from(">III", data, 4)
    if rows == 0 or cols == 0:
        raise FormatError(f"IDX image dimensions {rows}x{cols} are empty", offset=8)
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise FormatError(
            f"truncated IDX pixel data: need {expected} bytes for {count} images, have {len(data)}",
            offset=len(data),
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after IDX pixel data", offset=expected)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16, count=count * rows * cols)
    return Dataset(pixels.reshape(count, 1, rows, cols).copy(), name=Path(path).name)


def load_cifar_bin(path) -> Dataset:
    """Parse CIFAR-10 binary records (1 label byte + 3x32x32 channel planes)."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        whole = len(data) - len(data) % CIFAR_RECORD
        raise FormatError(
            f"CIFAR file size {len(data)} is not a multiple of {CIFAR_RECORD}", offset=whole
        )
    n = len(data) // CIFAR_RECORD
    records = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    images = records[:, 1:].reshape(n, 3, 32, 32).copy()
    return Dataset(images, name=Path(path).name)


def synth_dataset(kind: str, n: int, shape=(1, 8, 8), seed: int = 0, noise: float = 8.0) -> Dataset:
    """Deterministic synthetic 8-bit images.

    ``two-gaussians``: every pixel is drawn from an equal mixture of
    ``N(48, 12^2)`` and ``N(208, 12^2)``.
    ``checkerboard``: pixel-parity pattern in {0, 255} plus ``N(0, noise^2)``.
    """
    if n < 1:
        raise ArgumentError("dataset size must be >= 1")
    shape = tuple(shape)
    rng = np.random.default_rng(seed)
    if kind == "two-gaussians":
        comp = rng.random((n,) + shape) < 0.5
        vals = np.where(comp, 48.0, 208.0) + 12.0 * rng.standard_normal((n,) + shape)
    elif kind == "checkerboard":
        vals = np.broadcast_to(checkerboard_pattern(shape), (n,) + shape).astype(np.float64)
        if noise:
            vals = vals + noise * rng.standard_normal((n,) + shape)
    else:
        raise ArgumentError(f"unknown synthetic dataset {kind!r}")
    images = np.clip(np.round(vals), 0, 255).astype(np.uint8)
    return Dataset(images, name=f"synth:{kind}")


def checkerboard_pattern(shape) -> np.ndarray:
    """Noise-free checkerboard: 255 where ``row + col`` is odd, else 0."""
    C, H, W = shape
    parity = (np.arange(H)[:, None] + np.arange(W)[None, :]) % 2
    return np.broadcast_to(255 * parity, (C, H, W)).astype(np.uint8)


def load_dataset(spec: str, n: int = 512, shape=(1, 8, 8), seed: int = 0) -> Dataset:
    """Resolve a CLI data spec: ``synth:<kind>``, ``idx:<path>`` or ``cifar:<path>``."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        return synth_dataset(rest, n, shape, seed)
    if kind == "idx":
        return load_idx(rest)
    if kind == "cifar":
        return load_cifar_bin(rest)
    raise ArgumentError(f"unknown data spec {spec!r}; use synth:<kind>, idx:<path> or cifar:<path>")
