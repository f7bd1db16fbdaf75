"""8-bit PNG image I/O; pixel values map linearly to [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = ["read_image", "write_image", "resize_image", "to_chw", "to_hwc"]


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWx3 array (align-corners-false)."""
    from .ops import bilinear_resize
    from .tensor import Tensor, no_grad, precision

    with no_grad(), precision("float64"):
        chw = Tensor(np.moveaxis(img, 2, 0))
        out = bilinear_resize(chw, out_h, out_w).data
    return np.moveaxis(out, 0, 2)


def to_chw(img: np.ndarray) -> np.ndarray:
    return np.moveaxis(img, 2, 0)


def to_hwc(img: np.ndarray) -> np.ndarray:
    return np.moveaxis(img, 0, 2)
