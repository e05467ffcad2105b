"""Plain (ASCII) 8-bit PGM/PPM writing and reading."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError


def to_uint8(x) -> np.ndarray:
    """Map model-space values in ``[0, 1)`` to 8-bit pixels."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 256.0), 0, 255).astype(np.uint8)


def tile(images) -> np.ndarray:
    """Lay a batch ``(N, C, H, W)`` out side by side as one ``(C, H, N*W)`` image."""
    images = np.asarray(images)
    if images.ndim == 3:
        return images
    return np.concatenate(list(images), axis=-1)


def write_pnm(path, image) -> None:
    """Write a ``(1, H, W)`` image as P2 or a ``(3, H, W)`` image as P3."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"PGM/PPM needs 1 or 3 channels, got shape {img.shape}")
    img = img.astype(np.uint8)
    C, H, W = img.shape
    magic = "P2" if C == 1 else "P3"
    rows = img.transpose(1, 2, 0).reshape(H, W * C)
    lines = [magic, f"{W} {H}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pnm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if len(tokens) < 4 or tokens[0] not in ("P2", "P3"):
        raise FormatError("not a plain PGM/PPM file", offset=0)
    C = 1 if tokens[0] == "P2" else 3
    W, H = int(tokens[1]), int(tokens[2])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.uint8)
    if vals.size != C * H * W:
        raise FormatError(f"expected {C * H * W} pixel values, found {vals.size}")
    return vals.reshape(H, W, C).transpose(2, 0, 1)
