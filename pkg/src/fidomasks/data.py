"""Synthetic fine-grained benchmark: two classes that differ only in a patch.

Every image is a low-frequency textured background plus per-pixel noise; the
classes are identically distributed everywhere except inside one small square
patch.  The patch is a one-pixel two-color stripe pattern (red/yellow for the
first class pair) whose *orientation* is the class signal: vertical stripes
for even labels, horizontal for odd.  Per-pixel patch colors therefore differ
between the two classes of a pair while the patch's average color is
class-independent, so a Gaussian blur removes the class evidence entirely by
construction -- the discriminative feature is purely high-frequency.  The
patch position is uniform over all valid placements and independent of the
class, and the exact patch square is the ground-truth attribution mask.

The background is low-frequency on purpose: a blurred image looks like more
background, which makes blur infill an effective evidence remover.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fidomasks.imutil import bilinear_resize, load_image_png, load_mask_png, save_image_png, save_mask_png


@dataclass
class SyntheticConfig:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 6
    classes: int = 2
    samples_per_class: int = 200
    train_fraction: float = 0.75
    noise_amplitude: float = 0.05
    background_seed: int | None = None
    ablate_patch: bool = False

    def __post_init__(self):
        if self.patch_side > self.image_side:
            raise ValueError(
                f"patch side {self.patch_side} does not fit image side {self.image_side}"
            )
        if self.channels != 3:
            raise ValueError("only 3-channel images are supported")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class LabeledSample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    gt_mask: np.ndarray  # (H, W) bool, exactly patch_side**2 positives


@dataclass
class SyntheticDataset:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    config: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0


def class_color(index: int) -> tuple[float, float, float]:
    """Saturated stripe color by index; the first two mirror red-wing/yellow-head."""
    fixed = [(0.90, 0.12, 0.12), (0.92, 0.88, 0.10)]
    if index < len(fixed):
        return fixed[index]
    hue = (0.62 + 0.381966 * (index - 2)) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.9)


def stripe_pattern(label: int) -> tuple[tuple, tuple, int]:
    """(color_a, color_b, orientation) for a class; 0 = vertical, 1 = horizontal.

    Classes 2k and 2k+1 share a color pair and differ only in orientation, so
    the blurred patch carries no class signal within a pair.
    """
    pair = label // 2
    return class_color(2 * pair), class_color(2 * pair + 1), label % 2


def _render_sample(cfg: SyntheticConfig, label: int, sample_rng, bg_rng) -> LabeledSample:
    side = cfg.image_side
    low = max(2, side // 8)
    coarse = bg_rng.random((cfg.channels, low, low))
    background = 0.25 + 0.5 * bilinear_resize(coarse, side, side)
    image = background
    top = int(sample_rng.integers(0, side - cfg.patch_side + 1))
    left = int(sample_rng.integers(0, side - cfg.patch_side + 1))
    mask = np.zeros((side, side), dtype=bool)
    mask[top : top + cfg.patch_side, left : left + cfg.patch_side] = True
    if not cfg.ablate_patch:
        color_a, color_b, orientation = stripe_pattern(label)
        rows, cols = np.mgrid[0:side, 0:side]
        phase = (cols - left) if orientation == 0 else (rows - top)
        stripes = np.where(
            (phase % 2 == 0)[None], np.array(color_a)[:, None, None], np.array(color_b)[:, None, None]
        )
        image = np.where(mask[None], stripes, image)
    noise = sample_rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=image.shape)
    image = np.clip(image + noise, 0.0, 1.0)
    return LabeledSample(image=image, label=label, gt_mask=mask)


def generate(cfg: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Deterministic dataset with a disjoint train/test split.

    Each sample gets its own counter-based RNG stream keyed by (seed, global
    index), so the dataset bytes depend only on the seed and the config.  The
    background texture stream can be re-keyed separately via
    ``cfg.background_seed``.
    """
    dataset = SyntheticDataset(config=cfg, seed=seed)
    train_per_class = int(round(cfg.train_fraction * cfg.samples_per_class))
    if not 0 < train_per_class < cfg.samples_per_class:
        raise ValueError("train_fraction leaves an empty train or test split")
    bg_key = cfg.background_seed if cfg.background_seed is not None else seed
    index = 0
    for label in range(cfg.classes):
        for k in range(cfg.samples_per_class):
            sample_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))
            bg_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([bg_key, 1_000_000 + index])))
            sample = _render_sample(cfg, label, sample_rng, bg_rng)
            (dataset.train if k < train_per_class else dataset.test).append(sample)
            index += 1
    return dataset


def to_arrays(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (images, labels, masks) arrays."""
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    masks = np.stack([s.gt_mask for s in samples])
    return images, labels, masks


def save_dataset(dataset: SyntheticDataset, outdir) -> Path:
    """Write manifest.json plus per-sample image and ground-truth-mask PNGs."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(dataset.config), "seed": dataset.seed, "splits": {}}
    for split in ("train", "test"):
        entries = []
        for i, sample in enumerate(getattr(dataset, split)):
            image_rel = f"images/{split}_{i:04d}.png"
            mask_rel = f"masks/{split}_{i:04d}.png"
            save_image_png(outdir / image_rel, sample.image)
            save_mask_png(outdir / mask_rel, sample.gt_mask)
            entries.append({"image": image_rel, "mask": mask_rel, "label": sample.label})
        manifest["splits"][split] = entries
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return outdir


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = SyntheticConfig(**manifest["config"])
    dataset = SyntheticDataset(config=cfg, seed=manifest["seed"])
    for split in ("train", "test"):
        bucket = getattr(dataset, split)
        for entry in manifest["splits"][split]:
            bucket.append(
                LabeledSample(
                    image=load_image_png(path / entry["image"]),
                    label=int(entry["label"]),
                    gt_mask=load_mask_png(path / entry["mask"]),
                )
            )
    return dataset


def load_image_folder(path) -> list[dict]:
    """Minimal loader for a folder of PNG images with an optional bbox file.

    ``bboxes.txt`` lines are ``<filename> <x0> <y0> <x1> <y1>`` in pixels.
    Returns a list of {"name", "image", "bbox"} records sorted by file name.
    """
    path = Path(path)
    boxes = {}
    bbox_file = path / "bboxes.txt"
    if bbox_file.exists():
        for line in bbox_file.read_text().splitlines():
            parts = line.split()
            if len(parts) == 5:
                boxes[parts[0]] = tuple(int(v) for v in parts[1:])
    records = []
    for img_path in sorted(path.glob("*.png")):
        records.append(
            {
                "name": img_path.name,
                "image": load_image_png(img_path),
                "bbox": boxes.get(img_path.name),
            }
        )
    return records
