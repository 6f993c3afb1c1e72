from __future__ import annotations

import math

import numpy as np

from .dataset import DatasetError, PartDataset

DEFAULT_RATIOS = (0.81, 0.09, 0.1)


def _round(x: float) -> int:
    return math.floor(x + 0.5)


def split(ds: PartDataset, ratios=DEFAULT_RATIOS, rng_seed: int = 0) -> PartDataset:
    """Stratified train/val/test assignment.

    Only kept, non-augmented samples are shuffled and cut per class; any
    augmented sample goes to train and flagged samples get no fold.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    folds: dict[str, str] = {}
    for ci, c in enumerate(ds.classes()):
        eligible = sorted(
            (s.origin_id for s in ds.kept() if s.label == c and s.source != "augment"),
        )
        n = len(eligible)
        if n < 3:
            raise DatasetError(f"part {c!r} has {n} usable samples; at least 3 are needed to split")
        order = np.random.default_rng([rng_seed, ci]).permutation(n)
        n_test = _round(ratios[2] * n)
        n_val = _round(ratios[1] * n)
        n_val = min(n_val, n - n_test)
        for rank, idx in enumerate(order):
            if rank < n_test:
                folds[eligible[idx]] = "test"
            elif rank < n_test + n_val:
                folds[eligible[idx]] = "val"
            else:
                folds[eligible[idx]] = "train"
    for s in ds.kept():
        if s.source == "augment":
            folds[s.origin_id] = "train"
    return ds.with_(folds=folds)
