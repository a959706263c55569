"""Small image helpers: bilinear resize and 8-bit PNG round-trips."""

from __future__ import annotations

import numpy as np
from PIL import Image


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment.

    Accepts (H, W) or (C, H, W) float arrays.  When the output size equals
    the input size the result is an exact copy.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    planes = img[None] if squeeze else img
    if planes.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {img.shape}")
    _, h, w = planes.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    src_y = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(src_y).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(src_x - x0, 0.0, 1.0)[None, None, :]
    tl = planes[:, y0[:, None], x0[None, :]]
    tr = planes[:, y0[:, None], x1[None, :]]
    bl = planes[:, y1[:, None], x0[None, :]]
    br = planes[:, y1[:, None], x1[None, :]]
    top = tl * (1.0 - fx) + tr * fx
    bottom = bl * (1.0 - fx) + br * fx
    out = top * (1.0 - fy) + bottom * fy
    return out[0] if squeeze else out


def to_uint8(img: np.ndarray) -> np.ndarray:
    """round(255 * x) for x in [0, 1], saturating outside."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image ((H, W) gray or (C, H, W) color) as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3:
        data = to_uint8(np.moveaxis(img, 0, -1))
        mode = {1: "L", 3: "RGB"}.get(data.shape[-1])
        if mode is None:
            raise ValueError(f"unsupported channel count {data.shape[-1]}")
        if mode == "L":
            data = data[..., 0]
    elif img.ndim == 2:
        data = to_uint8(img)
        mode = "L"
    else:
        raise ValueError(f"expected (H, W) or (C, H, W), got shape {img.shape}")
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    """Read an 8-bit PNG into a [0, 1] float array ((C, H, W) for color, (H, W) for gray)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        return np.moveaxis(arr.astype(np.float64) / 255.0, -1, 0)
    return arr.astype(np.float64) / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    """Write a boolean mask as an 8-bit 0/255 PNG."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr >= 128
