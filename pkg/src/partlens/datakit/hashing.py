"""Perceptual hashing and near-duplicate flagging."""
from __future__ import annotations

from collections import defaultdict

import numpy as np
from PIL import Image
from scipy.fft import dct

from .dataset import ImageSample, PartDataset


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, ImageSample) else np.asarray(image)


def phash(image) -> int:
    """64-bit perceptual hash.

    Grayscale, 32x32 Lanczos resize, separable unnormalized DCT-II, keep the
    8x8 lowest-frequency block (DC included) and set bit i (row-major, MSB
    first) when coefficient i exceeds the median of the 64.
    """
    gray = Image.fromarray(_pixels(image)).convert("L").resize((32, 32), Image.LANCZOS)
    arr = np.asarray(gray, dtype=np.float64)
    coeffs = dct(dct(arr, axis=0), axis=1)[:8, :8]
    # Exact zeros of the transform come out as ~1e-13 noise; snap them back.
    scale = max(1.0, float(np.abs(coeffs).max()))
    coeffs = np.where(np.abs(coeffs) < 1e-9 * scale, 0.0, coeffs)
    bits = (coeffs > np.median(coeffs)).ravel()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def dedupe(ds: PartDataset, hamming_threshold: int = 10) -> PartDataset:
    """Flag near-duplicates within each part class.

    Samples are scanned in origin-id order; a kept sample whose hash lies
    within ``hamming_threshold`` bits of an earlier kept sample of the same
    class is flagged ``duplicate``. Augmented samples are ignored.
    """
    if not 0 <= hamming_threshold <= 64:
        raise ValueError("hamming_threshold must be in [0, 64]")
    flags = dict(ds.flags)
    kept_hashes: dict[str, list[int]] = defaultdict(list)
    for s in sorted(ds.samples, key=lambda s: s.origin_id):
        if s.source == "augment" or flags.get(s.origin_id, "kept") != "kept":
            continue
        h = phash(s)
        if any(hamming(h, k) <= hamming_threshold for k in kept_hashes[s.label]):
            flags[s.origin_id] = "duplicate"
        else:
            kept_hashes[s.label].append(h)
    return ds.with_(flags=flags)
