"""Glue between the modules: dataset building and head fitting as used by
the command line and by programmatic runs."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datakit import BuildConfig, DatasetError, ImageSample, PartDataset, build_dataset, ingest, pooled_features, split
from .datakit.scrape import IMAGE_SUFFIXES
from .datakit.dataset import load_rgb
from .explain import MeronymModel
from .kb import HolMeMap, resolve_parts
from .netcore.backend import FeatureExtractor
from .netcore.head import vgg_template
from .netcore.train import TrainConfig, TrainingError, TrainResult, evaluate_head, train_head


@dataclass
class HeadSpec:
    hidden: int = 4096
    dropout: float = 0.5

    def template(self) -> list:
        return vgg_template(hidden=self.hidden, dropout=self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)


def part_samples(root: str | Path, holonym: str, kb: HolMeMap | None) -> list[ImageSample]:
    parts = resolve_parts(holonym, kb) if kb is not None else None
    return ingest(root, holonym, parts)


def make_part_dataset(samples, fe: FeatureExtractor | None, cfg: BuildConfig, seed: int) -> PartDataset:
    features = pooled_features(fe) if fe is not None else None
    return build_dataset(samples, features, cfg, seed)


def scoring_fold(ds: PartDataset) -> list[ImageSample]:
    test = ds.fold("test")
    return test if test else ds.fold("val")


def fit_meronyms(fe, ds: PartDataset, holonym: str, cfg: TrainConfig, spec: HeadSpec):
    """Train a part head and score it with calibrated F1 on the test fold."""
    result = train_head(fe, spec.template(), ds, cfg)
    held_out = scoring_fold(ds)
    if not held_out:
        raise TrainingError("no held-out samples to score the part model")
    cm, f1 = evaluate_head(fe, result.head, held_out)
    model = MeronymModel(holonym, result.head, {n: float(v) for n, v in zip(result.head.class_names, f1)})
    return model, result, cm


def folder_samples(root: str | Path) -> list[ImageSample]:
    """Whole images laid out as ``<root>/<class>/<files>``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"image folder not found: {root}")
    out = []
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                out.append(ImageSample(load_rgb(f), cdir.name, "crop", f"{cdir.name}/{f.name}"))
    if not out:
        raise DatasetError(f"no images under {root}")
    return out


def fit_classifier(fe, samples, cfg: TrainConfig, spec: HeadSpec, seed: int = 0) -> tuple:
    """Holonym classifier head on whole images (for toy worlds where no
    pretrained classifier exists)."""
    ds = split(PartDataset(tuple(samples)), rng_seed=seed)
    result: TrainResult = train_head(fe, spec.template(), ds, cfg)
    held_out = scoring_fold(ds)
    cm, f1 = evaluate_head(fe, result.head, held_out)
    return result, cm, np.asarray(f1)
