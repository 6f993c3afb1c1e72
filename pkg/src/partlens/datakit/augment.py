"""Class balancing through offline augmentation."""
from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageFilter

from .crop import FILL
from .dataset import DatasetError, ImageSample, PartDataset

MAX_ROTATION = 25.0
MAX_SHEAR = 15.0


def augment_once(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation and shear, then one of blur / emboss / gaussian noise."""
    im = Image.fromarray(pixels)
    w, h = im.size
    im = im.rotate(float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)), resample=Image.BILINEAR, fillcolor=FILL)
    shear = math.tan(math.radians(float(rng.uniform(-MAX_SHEAR, MAX_SHEAR))))
    im = im.transform((w, h), Image.AFFINE, (1.0, shear, -shear * h / 2.0, 0.0, 1.0, 0.0),
                      resample=Image.BILINEAR, fillcolor=FILL)
    choice = int(rng.integers(0, 3))
    if choice == 0:
        im = im.filter(ImageFilter.GaussianBlur(float(rng.uniform(0.5, 1.5))))
    elif choice == 1:
        im = im.filter(ImageFilter.EMBOSS)
    else:
        noise = rng.normal(0.0, float(rng.uniform(5.0, 15.0)), (h, w, 3))
        return np.clip(np.asarray(im, dtype=np.float64) + noise, 0, 255).astype(np.uint8)
    return np.asarray(im)


def balance_augment(ds: PartDataset, rng_seed: int, tolerance: float = 0.05) -> PartDataset:
    """Top up minority classes with augmented copies.

    If folds are assigned only the training fold is counted and used as the
    augmentation source, and new samples join the training fold. A class is
    left alone when it is within ``tolerance`` of the largest class;
    otherwise it is filled up to the largest class count.
    """
    have_folds = bool(ds.folds)
    pool = [s for s in ds.kept() if s.source != "augment"]
    if have_folds:
        pool = [s for s in pool if ds.folds.get(s.origin_id) == "train"]
    by_class: dict[str, list[ImageSample]] = {c: [] for c in ds.classes()}
    for s in pool:
        by_class[s.label].append(s)
    for c, items in by_class.items():
        if not items:
            raise DatasetError(f"part {c!r} has no samples to balance from")
    counted = [s for s in ds.kept() if not have_folds or ds.folds.get(s.origin_id) == "train"]
    counts = {c: 0 for c in by_class}
    for s in counted:
        counts[s.label] += 1
    target = max(counts.values())

    new_samples = list(ds.samples)
    folds = dict(ds.folds)
    for ci, (c, items) in enumerate(by_class.items()):
        if counts[c] >= (1.0 - tolerance) * target:
            continue
        items = sorted(items, key=lambda s: s.origin_id)
        for j in range(target - counts[c]):
            src = items[j % len(items)]
            rng = np.random.default_rng([rng_seed, ci, j])
            oid = f"{src.origin_id}~aug{j}"
            new_samples.append(ImageSample(augment_once(src.pixels, rng), c, "augment", oid))
            if have_folds:
                folds[oid] = "train"
    return ds.with_(samples=tuple(new_samples), folds=folds)
