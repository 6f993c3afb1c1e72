"""Explanation quality metrics: pixel AUC, causal curves, random baselines."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image, ImageFilter
from scipy.stats import rankdata

from .datakit.crop import FILL
from .datakit.dataset import BBox

DEFAULT_STEPS = 100
DEFAULT_GRID = tuple(range(75, 91))


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Curve:
    fractions: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=np.float64)
        s = np.asarray(self.scores, dtype=np.float64)
        if f.shape != s.shape or f.ndim != 1 or len(f) < 2:
            raise MetricError("a curve needs matching fraction and score vectors of length >= 2")
        object.__setattr__(self, "fractions", f)
        object.__setattr__(self, "scores", s)

    @property
    def auc(self) -> float:
        return trapezoid_auc(self.fractions, self.scores)

    def __eq__(self, other):
        if not isinstance(other, Curve):
            return NotImplemented
        return np.array_equal(self.fractions, other.fractions) and np.array_equal(self.scores, other.scores)

    def to_dict(self) -> dict:
        return {"fractions": self.fractions.tolist(), "scores": self.scores.tolist(), "auc": self.auc}


def trapezoid_auc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------- localization


def box_mask(boxes: Iterable[BBox], h: int, w: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    for b in boxes:
        m |= b.mask(h, w)
    return m


def pixel_auc(hm: np.ndarray, gt) -> float:
    """ROC AUC of heatmap values for separating ground-truth pixels.

    ``gt`` is a boolean mask or a list of boxes. Uses the Mann-Whitney rank
    statistic with average ranks, so ties count one half.
    """
    hm = np.asarray(hm, dtype=np.float64)
    pos = np.asarray(gt, dtype=bool) if isinstance(gt, np.ndarray) else box_mask(gt, *hm.shape)
    if pos.shape != hm.shape:
        raise MetricError(f"ground truth {pos.shape} does not match heatmap {hm.shape}")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("pixel AUC needs both positive and negative pixels")
    ranks = rankdata(hm.ravel(), method="average")
    r_pos = float(ranks[pos.ravel()].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------- curves


def pixel_order(hm: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending value, ties in row-major order."""
    return np.argsort(-np.asarray(hm, dtype=np.float64).ravel(), kind="stable")


def _cuts(n: int, steps: int) -> np.ndarray:
    if steps < 1:
        raise MetricError("steps must be >= 1")
    return np.array([(i * n) // steps for i in range(steps + 1)])


def class_scores(model: Callable, images: Sequence[np.ndarray], class_index: int) -> np.ndarray:
    batch = getattr(model, "predict_batch", None)
    if batch is not None:
        return np.asarray(batch(images), dtype=np.float64)[:, class_index]
    return np.array([float(np.asarray(model(im))[class_index]) for im in images])


def gray_like(image, fill=FILL) -> np.ndarray:
    out = np.empty_like(np.asarray(image))
    out[...] = np.asarray(fill, dtype=out.dtype)
    return out


def blur_like(image, radius: float = 10.0) -> np.ndarray:
    return np.asarray(Image.fromarray(np.asarray(image)).filter(ImageFilter.GaussianBlur(radius)))


def _sweep(model, start, source, order, class_index, steps) -> Curve:
    """Copy pixels of ``source`` into ``start`` in ``order``, scoring after each batch."""
    h, w = start.shape[:2]
    cuts = _cuts(h * w, steps)
    canvas = start.reshape(h * w, -1).copy()
    src = source.reshape(h * w, -1)
    frames = [canvas.reshape(start.shape).copy()]
    for a, b in zip(cuts[:-1], cuts[1:]):
        idx = order[a:b]
        canvas[idx] = src[idx]
        frames.append(canvas.reshape(start.shape).copy())
    scores = class_scores(model, frames, class_index)
    return Curve(cuts / float(h * w), scores)


def deletion_curve(model, image, hm, class_index: int, steps: int = DEFAULT_STEPS, fill=FILL) -> Curve:
    """Gray out pixels from most to least salient; x is the fraction removed."""
    image = np.asarray(image)
    return _sweep(model, image, gray_like(image, fill), pixel_order(hm), class_index, steps)


def insertion_curve(model, image, hm, class_index: int, steps: int = DEFAULT_STEPS, fill=FILL, baseline: str = "gray") -> Curve:
    """Reveal pixels from most to least salient on a gray (or blurred) canvas."""
    image = np.asarray(image)
    if baseline == "gray":
        start = gray_like(image, fill)
    elif baseline == "blur":
        start = blur_like(image)
    else:
        raise MetricError(f"unknown insertion baseline {baseline!r}")
    return _sweep(model, start, image, pixel_order(hm), class_index, steps)


def preservation_curve(model, image, hm, class_index: int, steps: int = DEFAULT_STEPS, fill=FILL) -> Curve:
    """Keep the top fraction of pixels, gray elsewhere; x is the fraction kept.

    With the gray insertion baseline this traces the same images as the
    insertion curve; it is computed separately so the two can diverge when
    insertion uses another baseline.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    order = pixel_order(hm)
    cuts = _cuts(h * w, steps)
    gray = gray_like(image, fill).reshape(h * w, -1)
    flat = image.reshape(h * w, -1)
    frames = []
    for k in cuts:
        frame = gray.copy()
        frame[order[:k]] = flat[order[:k]]
        frames.append(frame.reshape(image.shape))
    return Curve(cuts / float(h * w), class_scores(model, frames, class_index))


def causal_curves(model, image, hm, class_index: int, steps: int = DEFAULT_STEPS, fill=FILL) -> dict[str, Curve]:
    return {
        "deletion": deletion_curve(model, image, hm, class_index, steps, fill),
        "insertion": insertion_curve(model, image, hm, class_index, steps, fill),
        "preservation": preservation_curve(model, image, hm, class_index, steps, fill),
    }


def grid_priority(h: int, w: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Heatmap giving every cell x cell block one value from a random order."""
    if h % cell or w % cell:
        raise MetricError(f"cell size {cell} must divide the image sides {h}x{w}")
    gh, gw = h // cell, w // cell
    rank = np.empty(gh * gw)
    rank[rng.permutation(gh * gw)] = np.arange(gh * gw, 0, -1)
    return np.kron(rank.reshape(gh, gw), np.ones((cell, cell)))


def random_baseline(model, image, class_index: int, cell: int = 16, seed: int = 0, steps: int = DEFAULT_STEPS, fill=FILL) -> dict[str, Curve]:
    """Causal curves for grid superpixels taken in a seeded random order."""
    image = np.asarray(image)
    prio = grid_priority(image.shape[0], image.shape[1], cell, np.random.default_rng(seed))
    return causal_curves(model, image, prio, class_index, steps, fill)


def auc_ratio(method: Curve, baseline: Curve) -> float:
    if baseline.auc <= 0.0:
        raise MetricError("baseline AUC is zero; the ratio is undefined")
    return method.auc / baseline.auc


def curve_ratios(method: dict[str, Curve], baseline: dict[str, Curve]) -> dict[str, float]:
    return {f"{k}_ratio": auc_ratio(method[k], baseline[k]) for k in ("insertion", "deletion", "preservation") if k in method}


def tradeoff(curves: dict[str, Curve]) -> float:
    return curves["insertion"].auc - curves["deletion"].auc + curves["preservation"].auc


def tune_percentile(images: Sequence[np.ndarray], explainer, grid: Iterable[int] = DEFAULT_GRID, steps: int = DEFAULT_STEPS):
    """Pick the percentile maximizing mean (insertion - deletion + preservation)
    of the global heatmap over ``images``; the first best q wins ties.

    Returns (best_q, {q: objective}).
    """
    if not images:
        raise MetricError("percentile search needs at least one image")
    prepared = [explainer.prepare(im, f"tune{i}") for i, im in enumerate(images)]
    return tune_prepared(prepared, explainer, grid, steps)


def tune_prepared(prepared: Sequence, explainer, grid: Iterable[int] = DEFAULT_GRID, steps: int = DEFAULT_STEPS):
    """Percentile search over images already run through ``explainer.prepare``."""
    grid = list(grid)
    if not prepared:
        raise MetricError("percentile search needs at least one image")
    if not grid:
        raise MetricError("empty percentile grid")
    table = {}
    for q in grid:
        vals = []
        for prep in prepared:
            rep = explainer.finish(prep, q)
            vals.append(tradeoff(causal_curves(explainer.model, prep.image, rep.global_heatmap, prep.class_index, steps, explainer.config.fill)))
        table[q] = float(np.mean(vals))
    best = max(grid, key=lambda q: (table[q], -grid.index(q)))
    return best, table


def evaluate_report(model, image, report, steps: int = DEFAULT_STEPS, seed: int = 0, cell: int = 16, extra_maps: dict | None = None) -> dict:
    """One metrics row: curve AUCs for the global heatmap (and any extra
    maps), the random baseline, and the ratios against it."""
    fill = tuple(report.config.get("fill", FILL))
    c = report.class_index
    row = {"image": report.image, "holonym": report.holonym}
    base = random_baseline(model, image, c, cell, seed, steps, fill)
    maps = {"global": report.global_heatmap}
    maps.update(extra_maps or {})
    for name, hm in maps.items():
        curves = causal_curves(model, image, hm, c, steps, fill)
        for k, cv in curves.items():
            row[f"{name}_{k}_auc"] = cv.auc
        for k, v in curve_ratios(curves, base).items():
            row[f"{name}_{k}"] = v
    for k, cv in base.items():
        row[f"random_{k}_auc"] = cv.auc
    return row


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    fields = list(rows[0])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
