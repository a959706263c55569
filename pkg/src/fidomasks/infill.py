"""Infill image generation and mask-driven composition of perturbed inputs.

A perturbed input is the per-pixel convex combination

    composed = (1 - z) * x + z * x_hat

so a mask value of 1 replaces the pixel with infill content and 0 keeps the
original.  The mask is spatial (one value per pixel, shared across color
channels).  Infills do not depend on the mask parameters, so they are plain
arrays computed once per image and reused across all optimization steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from fidomasks import tensor as T
from fidomasks.tensor import Tensor

INFILL_KINDS = ("gaussian_blur", "constant", "uniform_random")


@dataclass
class InfillSpec:
    """How to build the replacement content for perturbed pixels.

    ``blur_sigma`` defaults to image_side / 8 when left ``None``; the blur is
    strong enough to wipe out small discriminative detail while keeping the
    overall image content, which is what makes it a meaningful evidence
    remover.  The kernel is truncated at radius 3*sigma with reflected borders.
    """

    kind: str = "gaussian_blur"
    blur_sigma: float | None = None
    constant_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in INFILL_KINDS:
            raise ValueError(f"unsupported infill kind {self.kind!r}; expected one of {INFILL_KINDS}")
        if self.kind == "gaussian_blur" and self.blur_sigma is not None and self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be positive, got {self.blur_sigma}")


def make_infill(x: np.ndarray, spec: InfillSpec) -> np.ndarray:
    """Infill image with the same shape as ``x`` (CHW, values in [0, 1])."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {x.shape}")
    if spec.kind == "gaussian_blur":
        sigma = spec.blur_sigma if spec.blur_sigma is not None else x.shape[-1] / 8.0
        return np.stack([gaussian_filter(ch, sigma=sigma, mode="reflect", truncate=3.0) for ch in x])
    if spec.kind == "constant":
        return np.full_like(x, spec.constant_value)
    if spec.kind == "uniform_random":
        rng = np.random.Generator(np.random.Philox(spec.seed))
        return rng.random(x.shape)
    raise ValueError(f"unsupported infill kind {spec.kind!r}")


def compose(x, x_hat, z) -> Tensor:
    """Blend original and infill content according to the perturbation mask.

    ``z`` may be a single (H, W) mask or a batch (B, H, W); each mask value is
    broadcast over the color channels through an explicit expand, keeping the
    result differentiable with respect to ``z``.  Returns (C, H, W) for a
    single mask or (B, C, H, W) for a batch.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(x_hat, Tensor):
        x_hat = Tensor(x_hat, precision=x.precision)
    z_t = z.values if hasattr(z, "values") else z
    if not isinstance(z_t, Tensor):
        z_t = Tensor(z_t, precision=x.precision)
    if x.shape != x_hat.shape or x.ndim != 3:
        raise ValueError(f"image/infill shapes must match as CHW, got {x.shape} vs {x_hat.shape}")
    channels = x.shape[0]
    if z_t.ndim == 2:
        if z_t.shape != x.shape[1:]:
            raise ValueError(f"mask shape {z_t.shape} does not match image plane {x.shape[1:]}")
        zc = T.expand(z_t, 0, channels)
        return T.add(T.mul(T.sub(1.0, zc), x), T.mul(zc, x_hat))
    if z_t.ndim == 3:
        if z_t.shape[1:] != x.shape[1:]:
            raise ValueError(f"mask shape {z_t.shape} does not match image plane {x.shape[1:]}")
        batch = z_t.shape[0]
        zc = T.expand(z_t, 1, channels)
        xe = T.expand(x, 0, batch)
        xhe = T.expand(x_hat, 0, batch)
        return T.add(T.mul(T.sub(1.0, zc), xe), T.mul(zc, xhe))
    raise ValueError(f"mask must be (H, W) or (B, H, W), got shape {z_t.shape}")
