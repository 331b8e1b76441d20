"""8-bit PNG reading and writing for images, binary masks and soft masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def read_image(path) -> np.ndarray:
    """Load a grayscale or RGB PNG as floats in [0, 1]; alpha is dropped."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def image_size(path) -> tuple:
    """``(height, width)`` of an image file without decoding pixels."""
    with PILImage.open(path) as im:
        w, h = im.size
    return h, w


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def read_mask(path) -> np.ndarray:
    """Single-channel mask; any value above 127 is foreground."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def read_mask_values(path) -> np.ndarray:
    """Raw 8-bit mask values as a 2-D uint8 array (no conversion of RGB inputs)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            raise ValueError(f"{path}: expected a single-channel mask, got mode {im.mode}")
        return np.asarray(im.convert("L"))


def write_mask(path, mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(data).save(path, format="PNG")
    return path


def write_soft(path, soft: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(soft)).save(path, format="PNG")
    return path
