"""PNG read/write for masks (8-bit grayscale) and RGB images."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class NotPNGError(ValueError):
    """The file is not a PNG."""


class ChannelCountError(ValueError):
    """The PNG has the wrong number of channels for the requested kind."""


def _atomic_save(img: Image.Image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            img.save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _open_png(path) -> Image.Image:
    with open(path, "rb") as fh:
        head = fh.read(len(PNG_SIGNATURE))
    if head != PNG_SIGNATURE:
        raise NotPNGError(f"{path}: not a PNG file")
    img = Image.open(path)
    img.load()
    return img


def _to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("values must lie in [0, 1]")
    # round half up: 0.5 -> 127.5 -> 128
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_mask_png(mask, path) -> None:
    """Store a [0, 1] mask (H x W or 1 x H x W) as an 8-bit grayscale PNG."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be H x W or 1 x H x W, got {m.shape}")
    _atomic_save(Image.fromarray(_to_bytes(m), mode="L"), path)


def read_mask_png(path) -> np.ndarray:
    """1 x H x W float32 mask; byte b maps to b / 255."""
    img = _open_png(path)
    bands = img.getbands()
    if img.mode == "P" or len(bands) != 1:
        raise ChannelCountError(f"{path}: expected a single-channel mask, got mode {img.mode}")
    if img.mode == "1":
        img = img.convert("L")
    if img.mode != "L":
        raise ChannelCountError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
    return (np.asarray(img, dtype=np.float32) / 255.0)[None]


def write_image_png(image, path) -> None:
    """Store a 3 x H x W image in [0, 1] as 8-bit RGB."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"image must be 3 x H x W, got {a.shape}")
    _atomic_save(Image.fromarray(_to_bytes(a.transpose(1, 2, 0)), mode="RGB"), path)


def read_image_png(path) -> np.ndarray:
    """3 x H x W float32 image in [0, 1]; grayscale files are replicated to 3 channels."""
    img = _open_png(path)
    if img.mode in ("L", "1"):
        img = img.convert("RGB")
    elif img.mode == "P":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise ChannelCountError(f"{path}: expected an RGB image, got mode {img.mode}")
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
