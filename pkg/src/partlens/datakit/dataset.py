"""Core dataset records and the JSON manifest format."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

SOURCES = ("crop", "scrape", "augment")
FOLDS = ("train", "val", "test")
FLAGS = ("kept", "duplicate", "outlier")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DatasetError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def inside(self, h: int, w: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= w and self.y_max <= h

    def intersects(self, x0: int, y0: int, x1: int, y1: int) -> bool:
        return self.x_min < x1 and x0 < self.x_max and self.y_min < y1 and y0 < self.y_max

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        m[max(self.y_min, 0) : self.y_max, max(self.x_min, 0) : self.x_max] = True
        return m


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    label: str
    source: str
    origin_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DatasetError(f"{self.origin_id}: expected h x w x 3 pixels, got {px.shape}")
        if px.dtype != np.uint8:
            raise DatasetError(f"{self.origin_id}: pixels must be uint8")
        if self.source not in SOURCES:
            raise DatasetError(f"{self.origin_id}: unknown source {self.source!r}")

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.source == other.source
            and self.origin_id == other.origin_id
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None


@dataclass(frozen=True)
class PartDataset:
    samples: tuple[ImageSample, ...]
    folds: dict[str, str] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.origin_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("origin ids must be unique")

    def flag(self, origin_id: str) -> str:
        return self.flags.get(origin_id, "kept")

    def kept(self) -> list[ImageSample]:
        return [s for s in self.samples if self.flag(s.origin_id) == "kept"]

    def classes(self) -> list[str]:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.label, None)
        return list(seen)

    def fold(self, name: str) -> list[ImageSample]:
        return [s for s in self.samples if self.folds.get(s.origin_id) == name]

    def counts(self, samples: Iterable[ImageSample] | None = None) -> dict[str, int]:
        out = {c: 0 for c in self.classes()}
        for s in self.kept() if samples is None else samples:
            out[s.label] += 1
        return out

    def by_id(self) -> dict[str, ImageSample]:
        return {s.origin_id: s for s in self.samples}

    def with_(self, **changes) -> "PartDataset":
        return replace(self, **changes)


def safe_name(origin_id: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]+", "_", origin_id).strip("_")[:60]
    digest = hashlib.sha1(origin_id.encode("utf-8")).hexdigest()[:10]
    return f"{stem}-{digest}"


def save_png(path: Path, pixels: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed encoder settings keep output bytes stable across runs.
    Image.fromarray(np.asarray(pixels)).save(path, format="PNG", compress_level=6, optimize=False)


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_manifest(ds: PartDataset, out_dir: str | Path, seed: int, config: dict) -> Path:
    """Write images as PNG under ``images/`` plus ``manifest.json``."""
    out_dir = Path(out_dir)
    records = []
    for s in ds.samples:
        rel = Path("images") / safe_name(s.label) / f"{safe_name(s.origin_id)}.png"
        save_png(out_dir / rel, s.pixels)
        records.append(
            {
                "origin_id": s.origin_id,
                "label": s.label,
                "source": s.source,
                "file": rel.as_posix(),
                "sha1": hashlib.sha1(np.ascontiguousarray(s.pixels).tobytes()).hexdigest(),
                "flag": ds.flag(s.origin_id),
                "fold": ds.folds.get(s.origin_id),
            }
        )
    manifest = {
        "format": "partlens-dataset/1",
        "seed": seed,
        "classes": ds.classes(),
        "config": config,
        "samples": records,
        "flags": {k: ds.flags[k] for k in sorted(ds.flags)},
        "folds": {k: ds.folds[k] for k in sorted(ds.folds)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> tuple[PartDataset, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    samples = [
        ImageSample(load_rgb(path.parent / r["file"]), r["label"], r["source"], r["origin_id"])
        for r in manifest["samples"]
    ]
    ds = PartDataset(tuple(samples), dict(manifest["folds"]), dict(manifest["flags"]))
    return ds, manifest
