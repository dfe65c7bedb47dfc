"""Image arrays and PNG I/O.

An image is a float32 ``(H, W, C)`` numpy array with values in ``[0, 1]``
and ``C`` in ``{1, 3}``. Networks consume channels-first torch batches; the
``to_batch``/``from_batch`` helpers convert.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, ShapeError


def as_image(img, min_size: int = 1) -> np.ndarray:
    """Validate and normalise an image array, promoting ``(H, W)`` to ``(H, W, 1)``."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ShapeError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    if a.shape[0] < min_size or a.shape[1] < min_size:
        raise ShapeError(f"image {a.shape[:2]} smaller than {min_size}x{min_size}")
    a = a.astype(np.float32, copy=False)
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise DataError("image values must be finite and within [0, 1]")
    return a


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level (what a PNG round trip would store)."""
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.float32) / 255.0
    return as_image(a)


def write_png(path, img) -> None:
    a = as_image(np.clip(img, 0, 1))
    u8 = np.round(a * 255).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed save options keep output bytes reproducible
    Image.fromarray(u8).save(path, format="PNG", optimize=False, compress_level=6)


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(H, W, C)`` arrays into a ``(B, C, H, W)`` tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(i) for i in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def from_batch(batch: torch.Tensor) -> list[np.ndarray]:
    arr = batch.detach().cpu().float().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]
