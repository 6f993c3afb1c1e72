"""End-to-end dataset construction: dedupe, drop outliers, split, balance."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import balance_augment
from .dataset import DatasetError, ImageSample, PartDataset, write_manifest
from .hashing import dedupe
from .outliers import remove_outliers
from .split import DEFAULT_RATIOS, split


@dataclass
class BuildConfig:
    hamming_threshold: int = 10
    contamination: float = 0.15
    ratios: tuple = DEFAULT_RATIOS
    balance: bool = True
    balance_tolerance: float = 0.05
    outlier_components: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d


def pooled_features(fe) -> Callable[[Sequence[ImageSample]], np.ndarray]:
    """Feature function giving channel means of the extractor's maps."""
    from ..netcore.train import sample_features

    def run(samples):
        maps = sample_features(fe, samples)
        return maps.reshape(len(maps), maps.shape[1], -1).mean(axis=2)

    return run


def _auto_components(n: int, d: int) -> int:
    # With no fewer dimensions than points every point gets the same full-rank
    # score, so only the leading half of the spectrum is used.
    return max(1, min(d, (n - 1) // 2))


def flag_outliers(ds: PartDataset, features: Callable, contamination: float, n_components: int | None = None) -> PartDataset:
    flags = dict(ds.flags)
    for c in ds.classes():
        items = sorted(
            (s for s in ds.kept() if s.label == c and s.source != "augment"), key=lambda s: s.origin_id
        )
        if len(items) < 2:
            continue
        x = np.asarray(features(items), dtype=np.float64).reshape(len(items), -1)
        k = n_components if n_components is not None else _auto_components(len(items), x.shape[1])
        _, flagged = remove_outliers(x, contamination, k)
        for i in flagged:
            flags[items[i].origin_id] = "outlier"
    return ds.with_(flags=flags)


def build_dataset(
    samples: Sequence[ImageSample],
    features: Callable | None,
    config: BuildConfig | None = None,
    seed: int = 0,
) -> PartDataset:
    """Run the cleaning stages in order. ``features`` maps a list of samples
    to an (N, d) array; pass None to skip outlier removal."""
    cfg = config or BuildConfig()
    if not samples:
        raise DatasetError("no samples to build from")
    ds = PartDataset(tuple(samples))
    ds = dedupe(ds, cfg.hamming_threshold)
    if features is not None and cfg.contamination > 0:
        ds = flag_outliers(ds, features, cfg.contamination, cfg.outlier_components)
    ds = split(ds, cfg.ratios, seed)
    if cfg.balance:
        ds = balance_augment(ds, seed, cfg.balance_tolerance)
    return ds


def build_and_write(samples, features, out_dir: str | Path, config: BuildConfig | None = None, seed: int = 0, extra: dict | None = None) -> Path:
    cfg = config or BuildConfig()
    ds = build_dataset(samples, features, cfg, seed)
    meta = cfg.to_dict()
    if extra:
        meta.update(extra)
    return write_manifest(ds, out_dir, seed, meta)
