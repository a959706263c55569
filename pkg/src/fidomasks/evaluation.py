"""Joint-mask fusion, thresholding, bounding boxes, IoU, coherency, and TTA.

Attribution maps handled here are importance-oriented: values near 1 mark
pixels the classifier needs.  The joint fusion multiplies the sufficiency map
with the complement of the *keep-probability* view of the destruction map and
takes a square root, so two maps that both read 0.5 fuse to 0.5 rather than
0.25 and either map can veto a pixel multiplicatively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fidomasks.imutil import bilinear_resize

TTA_METHODS = ("none", "gt_bbox", "gt_bbox_only", "random_crop", "center_crop", "fido_joint")
CROP_FRACTION = 0.75  # side fraction for the heuristic random/center crops


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: x is the column axis, y the row axis."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate bbox {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


def joint_mask(theta_ssr: np.ndarray, theta_sdr: np.ndarray) -> np.ndarray:
    """sqrt(theta_ssr * (1 - theta_sdr)) elementwise.

    The second argument is consumed in keep-probability orientation (low
    where perturbing the pixel destroys the score); see
    :func:`fuse_attributions` for the importance-oriented pipeline entry.
    """
    a = np.asarray(theta_ssr, dtype=np.float64)
    b = np.asarray(theta_sdr, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.sqrt(a * (1.0 - b))


def fuse_attributions(ssr_importance: np.ndarray, sdr_importance: np.ndarray) -> np.ndarray:
    """Fuse two importance-oriented maps into the joint importance map.

    Equivalent to sqrt(ssr * sdr): high only where the region is both needed
    to sustain the score and destroys it when perturbed.
    """
    return joint_mask(ssr_importance, 1.0 - np.asarray(sdr_importance, dtype=np.float64))


def threshold_mask(theta: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Binary mask of entries strictly above ``tau``; ties resolve negative."""
    return np.asarray(theta) > tau


def bbox_from_mask(mask: np.ndarray) -> BBox:
    """Tight box around positive pixels; an empty mask falls back to the full image."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-d mask, got shape {mask.shape}")
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return BBox(0, 0, mask.shape[1], mask.shape[0])
    y = np.flatnonzero(rows)
    x = np.flatnonzero(cols)
    return BBox(int(x[0]), int(y[0]), int(x[-1]) + 1, int(y[-1]) + 1)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Defined as 1 when both masks are empty and 0 when exactly one is empty.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def coherency_tv(theta: np.ndarray) -> float:
    """Total variation of an attribution map (sum of squared neighbor diffs)."""
    m = np.asarray(theta, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {m.shape}")
    return float(np.sum((m[:, 1:] - m[:, :-1]) ** 2) + np.sum((m[1:, :] - m[:-1, :]) ** 2))


def square_bbox(box: BBox, height: int, width: int) -> BBox:
    """Grow the shorter side until the box is square, clipped at the image borders."""
    w, h = box.width, box.height
    if w == h:
        return box
    if w < h:
        grow = h - w
        x0 = box.x0 - grow // 2
        x1 = box.x1 + (grow - grow // 2)
        if x0 < 0:
            x1 = min(width, x1 - x0)
            x0 = 0
        if x1 > width:
            x0 = max(0, x0 - (x1 - width))
            x1 = width
        return BBox(x0, box.y0, x1, box.y1)
    grow = w - h
    y0 = box.y0 - grow // 2
    y1 = box.y1 + (grow - grow // 2)
    if y0 < 0:
        y1 = min(height, y1 - y0)
        y0 = 0
    if y1 > height:
        y0 = max(0, y0 - (y1 - height))
        y1 = height
    return BBox(box.x0, y0, box.x1, y1)


def crop_resize(x: np.ndarray, box: BBox, out_hw: tuple[int, int]) -> np.ndarray:
    """Crop a CHW image to ``box`` and bilinearly resize to ``out_hw``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {x.shape}")
    _, h, w = x.shape
    if not (0 <= box.x0 < box.x1 <= w and 0 <= box.y0 < box.y1 <= h):
        raise ValueError(f"bbox {box} outside image {h}x{w}")
    crop = x[:, box.y0 : box.y1, box.x0 : box.x1]
    return bilinear_resize(crop, out_hw[0], out_hw[1])


def _centered_fraction_bbox(height: int, width: int) -> BBox:
    ch = max(1, round(CROP_FRACTION * height))
    cw = max(1, round(CROP_FRACTION * width))
    y0 = (height - ch) // 2
    x0 = (width - cw) // 2
    return BBox(x0, y0, x0 + cw, y0 + ch)


def _random_fraction_bbox(height: int, width: int, rng: np.random.Generator) -> BBox:
    ch = max(1, round(CROP_FRACTION * height))
    cw = max(1, round(CROP_FRACTION * width))
    y0 = int(rng.integers(0, height - ch + 1))
    x0 = int(rng.integers(0, width - cw + 1))
    return BBox(x0, y0, x0 + cw, y0 + ch)


def tta_predict(
    model,
    x: np.ndarray,
    method: str = "none",
    attribution: np.ndarray | None = None,
    gt_bbox: BBox | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Single-crop test-time augmentation.

    ``none`` returns the plain prediction, ``gt_bbox_only`` predicts on the
    crop alone, every other method averages the probability vectors of the
    full image and one squared, resized crop.
    """
    if method not in TTA_METHODS:
        raise ValueError(f"unknown TTA method {method!r}; expected one of {TTA_METHODS}")
    x = np.asarray(x)
    if method == "none":
        return model.predict_proba(x)
    _, h, w = x.shape
    if method in ("gt_bbox", "gt_bbox_only"):
        if gt_bbox is None:
            raise ValueError(f"method {method!r} requires gt_bbox")
        box = gt_bbox
    elif method == "center_crop":
        box = _centered_fraction_bbox(h, w)
    elif method == "random_crop":
        if rng is None:
            raise ValueError("method 'random_crop' requires an rng")
        box = _random_fraction_bbox(h, w, rng)
    else:  # fido_joint
        if attribution is None:
            raise ValueError("method 'fido_joint' requires an attribution map")
        box = bbox_from_mask(threshold_mask(attribution, 0.5))
    box = square_bbox(box, h, w)
    crop = crop_resize(x, box, (model.input_shape[1], model.input_shape[2]))
    crop_probs = model.predict_proba(crop)
    if method == "gt_bbox_only":
        return crop_probs
    full_probs = model.predict_proba(x)
    return 0.5 * (full_probs + crop_probs)
