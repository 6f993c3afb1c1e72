"""Grad-CAM through the split model, percentile masks and gray-fill ablation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datakit.crop import FILL
from .netcore import tensorio
from .netcore.backend import INPUT_SIZE, map_to_image, preprocess
from .netcore.head import ShapeError, head_backward, head_forward, softmax

DEFAULT_PERCENTILE = 83


@dataclass(frozen=True)
class SaliencyConfig:
    percentile: float = DEFAULT_PERCENTILE
    fill: tuple = FILL
    score: str = "softmax"

    def __post_init__(self):
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must be in [0, 100]")
        if len(self.fill) != 3 or not all(0 <= int(v) <= 255 for v in self.fill):
            raise ValueError("fill must be an RGB triple")
        if self.score != "softmax":
            raise ValueError("only softmax-probability scores are supported")

    def to_dict(self) -> dict:
        return {"percentile": self.percentile, "fill": list(self.fill), "score": self.score}


def upsample_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    arr = np.asarray(arr, dtype=np.float64)

    def weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
        return m

    return weights(arr.shape[0], out_h) @ arr @ weights(arr.shape[1], out_w).T


def _normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


def cam_weights(head, feats: np.ndarray, class_index: int, seed_scale: float = 1.0):
    """Channel weights (spatial mean of d logit / d features) for one class."""
    if not 0 <= class_index < head.n_classes:
        raise IndexError(f"class index {class_index} out of range for {head.n_classes} classes")
    if feats.shape != head.input_shape:
        raise ShapeError(f"features {feats.shape} do not match head input {head.input_shape}")
    _, cache = head_forward(head, feats)
    onehot = np.zeros(head.n_classes)
    onehot[class_index] = seed_scale
    _, d_feats = head_backward(head, cache, onehot)
    return d_feats.mean(axis=(1, 2))


def gradcam_raw(head, feats: np.ndarray, class_index: int, seed_scale: float = 1.0) -> np.ndarray:
    """relu(sum_k alpha_k A_k) at feature-map resolution, unnormalized."""
    feats = np.asarray(feats, dtype=np.float64)
    alpha = cam_weights(head, feats, class_index, seed_scale)
    return np.maximum(np.tensordot(alpha, feats, axes=1), 0.0)


def gradcam(fe, head, image, class_index: int, features=None, seed_scale: float = 1.0) -> np.ndarray:
    """Heatmap in [0, 1] at the resolution of ``image`` (float32).

    ``features`` may carry the precomputed extractor output for ``image``.
    A constant combined map gives an all-zero heatmap.
    """
    img = np.asarray(image)
    if tuple(fe.output_shape) != tuple(head.input_shape):
        raise ShapeError(f"extractor yields {tuple(fe.output_shape)} but head expects {head.input_shape}")
    feats = fe.extract(preprocess(img)) if features is None else np.asarray(features)
    raw = gradcam_raw(head, feats, class_index, seed_scale)
    if raw.max() <= raw.min():
        return np.zeros(img.shape[:2], dtype=np.float32)
    up = upsample_bilinear(raw, INPUT_SIZE, INPUT_SIZE)
    return _normalize(map_to_image(up.astype(np.float32), *img.shape[:2]))


def percentile_threshold(values: np.ndarray, q: float) -> float:
    """Nearest-rank q-th percentile."""
    if not 0 <= q <= 100:
        raise ValueError("q must be in [0, 100]")
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    # Round away float noise in q*n/100 before the ceiling (e.g. 0.83 * 100).
    rank = max(1, math.ceil(round(q * v.size / 100.0, 9)))
    return float(v[rank - 1])


def binarize(hm: np.ndarray, q: float = DEFAULT_PERCENTILE) -> np.ndarray:
    hm = np.asarray(hm)
    return hm >= percentile_threshold(hm, q)


def coverage(mask: np.ndarray) -> float:
    return float(np.asarray(mask, dtype=bool).mean())


def ablate(image, mask, fill=FILL) -> np.ndarray:
    img = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    out[mask] = np.asarray(fill, dtype=img.dtype)
    return out


def class_probability(fe, head, image, class_index: int) -> float:
    logits, _ = head_forward(head, fe.extract(preprocess(image)))
    return float(softmax(logits)[class_index])


def percent_drop(p_orig: float, p_ablated: float) -> float:
    if p_orig <= 0.0:
        raise ValueError("original class probability is zero; the drop cannot be normalized")
    return 100.0 * (p_orig - p_ablated) / p_orig


def score_drop(fe, holonym_head, image, mask, class_index: int, fill=FILL, p_orig: float | None = None) -> float:
    """Percent fall of the class probability when the masked pixels are
    grayed out. Negative when ablation raises the probability."""
    if p_orig is None:
        p_orig = class_probability(fe, holonym_head, image, class_index)
    if p_orig <= 0.0:
        raise ValueError("original class probability is zero; the drop cannot be normalized")
    p_abl = class_probability(fe, holonym_head, ablate(image, mask, fill), class_index)
    return percent_drop(p_orig, p_abl)


def heatmap_to_uint8(hm: np.ndarray) -> np.ndarray:
    return np.round(np.clip(hm, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_heatmap(path: str | Path, hm: np.ndarray):
    """Write ``<path>.png`` (8-bit grayscale) and ``<path>.htf`` (float32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_to_uint8(hm), mode="L").save(path.with_suffix(".png"), compress_level=6)
    tensorio.save(path.with_suffix(".htf"), np.asarray(hm, dtype=np.float32))
    return path.with_suffix(".png"), path.with_suffix(".htf")


def load_heatmap(path: str | Path) -> np.ndarray:
    return tensorio.load(Path(path).with_suffix(".htf")).astype(np.float32)


def save_mask(path: str | Path, mask: np.ndarray) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)
    return path


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def overlay(image, hm: np.ndarray, alpha: float = 0.5, color=(255, 0, 0)) -> np.ndarray:
    """Blend ``color`` into the image with per-pixel weight alpha * heatmap."""
    img = np.asarray(image, dtype=np.float64)
    w = alpha * np.clip(np.asarray(hm, dtype=np.float64), 0, 1)[..., None]
    out = (1 - w) * img + w * np.asarray(color, dtype=np.float64)
    return np.round(out).astype(np.uint8)
