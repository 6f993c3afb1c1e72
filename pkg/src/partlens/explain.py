"""Part-based explanations for one image and per-class summaries."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datakit.crop import FILL
from .datakit.dataset import safe_name, save_png
from .kb import HolMeMap, resolve_parts
from .netcore.head import Head, ShapeError, load_head, save_head
from .netcore.model import SplitModel
from .saliency import (
    ablate,
    binarize,
    gradcam,
    load_heatmap,
    load_mask,
    overlay,
    percent_drop,
    save_heatmap,
    save_mask,
)

REPORT_FORMAT = "partlens-report/1"


class MissingModelError(LookupError):
    pass


@dataclass(frozen=True)
class ExplainConfig:
    percentile: float = 83
    t_score: float = 10.0
    t_f1: float = 0.7
    fill: tuple = FILL

    def __post_init__(self):
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must be in [0, 100]")

    def to_dict(self) -> dict:
        return {
            "percentile": self.percentile,
            "t_score": self.t_score,
            "t_f1": self.t_f1,
            "fill": list(self.fill),
            "score": "softmax",
            "insertion_baseline": "gray",
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExplainConfig":
        return cls(
            percentile=d.get("percentile", 83),
            t_score=d.get("t_score", 10.0),
            t_f1=d.get("t_f1", 0.7),
            fill=tuple(d.get("fill", FILL)),
        )


@dataclass
class MeronymModel:
    """Part classifier for one holonym, sharing the holonym's extractor."""

    holonym: str
    head: Head
    f1: dict[str, float]

    def __post_init__(self):
        missing = [p for p in self.head.class_names if p not in self.f1]
        if missing:
            raise ValueError(f"meronym model for {self.holonym!r} lacks F1 scores for {missing}")

    def save(self, directory: str | Path) -> Path:
        return save_head(self.head, directory, {"holonym": self.holonym, "f1": self.f1})

    @classmethod
    def load(cls, directory: str | Path) -> "MeronymModel":
        directory = Path(directory)
        index = json.loads((directory / "head.json").read_text(encoding="utf-8"))
        extra = index.get("extra", {})
        return cls(extra["holonym"], load_head(directory), dict(extra["f1"]))


@dataclass(eq=False)
class PartResult:
    name: str
    f1: float
    drop: float
    selected: bool
    heatmap: np.ndarray
    mask: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PartResult):
            return NotImplemented
        return (
            (self.name, self.f1, self.drop, self.selected) == (other.name, other.f1, other.drop, other.selected)
            and np.array_equal(self.heatmap, other.heatmap)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class ExplanationReport:
    image: str
    holonym: str
    class_index: int
    score: float
    parts: list[PartResult]
    global_heatmap: np.ndarray
    global_raw: np.ndarray
    weights: list[float]
    config: dict = field(default_factory=dict)

    @property
    def selected(self) -> list[str]:
        return [p.name for p in self.parts if p.selected]

    @property
    def drops(self) -> list[float]:
        return [p.drop for p in self.parts]

    def __eq__(self, other):
        if not isinstance(other, ExplanationReport):
            return NotImplemented
        return (
            (self.image, self.holonym, self.class_index, self.score, self.weights, self.config)
            == (other.image, other.holonym, other.class_index, other.score, other.weights, other.config)
            and self.parts == other.parts
            and np.array_equal(self.global_heatmap, other.global_heatmap)
            and np.array_equal(self.global_raw, other.global_raw)
        )


def part_weights(drops: Sequence[float]) -> list[float]:
    """Drops clamped at zero, then L1-normalized; all zeros if none is positive."""
    clamped = [max(0.0, float(d)) for d in drops]
    total = math.fsum(clamped)
    if total <= 0.0:
        return [0.0] * len(clamped)
    return [c / total for c in clamped]


def global_heatmap(heatmaps: Sequence[np.ndarray], drops: Sequence[float]):
    """Weighted sum of part heatmaps.

    Returns (normalized G, raw G, weights). The raw map is a convex
    combination whenever some drop is positive; the normalized map is
    stretched to [0, 1] for display.
    """
    if len(heatmaps) != len(drops):
        raise ValueError("one drop per heatmap required")
    if not heatmaps:
        raise ValueError("no heatmaps to combine")
    shape = np.shape(heatmaps[0])
    if any(np.shape(h) != shape for h in heatmaps):
        raise ShapeError("part heatmaps differ in geometry")
    weights = part_weights(drops)
    raw = np.zeros(shape, dtype=np.float64)
    for w, h in zip(weights, heatmaps):
        if w:
            raw += w * np.asarray(h, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    return norm.astype(np.float32), raw.astype(np.float32), weights


@dataclass
class Prepared:
    """Threshold-independent part of an explanation."""

    image: np.ndarray
    image_id: str
    class_index: int
    holonym: str
    score: float
    model: MeronymModel
    heatmaps: list[np.ndarray]


class Explainer:
    def __init__(
        self,
        holonym_model: SplitModel,
        meronyms: Mapping[str, MeronymModel],
        kb: HolMeMap | None = None,
        config: ExplainConfig | None = None,
    ):
        self.model = holonym_model
        self.meronyms = dict(meronyms)
        self.kb = kb
        self.config = config or ExplainConfig()
        for name, m in self.meronyms.items():
            if tuple(m.head.input_shape) != tuple(holonym_model.extractor.output_shape):
                raise ShapeError(f"meronym head for {name!r} does not fit the shared extractor")

    def prepare(self, image, image_id: str = "image") -> Prepared:
        img = np.asarray(image)
        feats = self.model.features(img)
        probs = self.model.probs_from_features(feats)
        c = int(np.argmax(probs))
        holonym = self.model.class_names[c]
        if self.kb is not None:
            resolve_parts(holonym, self.kb)
        model = self.meronyms.get(holonym)
        if model is None:
            raise MissingModelError(
                f"no meronym model for predicted class {holonym!r}; train one with `partlens train --holonym {holonym}`"
            )
        fe = self.model.extractor
        heatmaps = [gradcam(fe, model.head, img, j, features=feats) for j in range(model.head.n_classes)]
        return Prepared(img, image_id, c, holonym, float(probs[c]), model, heatmaps)

    def finish(self, prep: Prepared, percentile: float | None = None) -> ExplanationReport:
        cfg = self.config
        q = cfg.percentile if percentile is None else percentile
        masks = []
        for hm in prep.heatmaps:
            # A part Grad-CAM does not find at all highlights nothing.
            masks.append(binarize(hm, q) if hm.any() else np.zeros(hm.shape, dtype=bool))
        todo = [i for i, m in enumerate(masks) if m.any()]
        drops = [0.0] * len(masks)
        if todo:
            ablated = [ablate(prep.image, masks[i], cfg.fill) for i in todo]
            probs = self.model.predict_batch(ablated)[:, prep.class_index]
            for i, p in zip(todo, probs):
                drops[i] = percent_drop(prep.score, float(p))
        parts = []
        for j, name in enumerate(prep.model.head.class_names):
            f1 = float(prep.model.f1[name])
            selected = drops[j] > cfg.t_score and f1 > cfg.t_f1
            parts.append(PartResult(name, f1, float(drops[j]), bool(selected), prep.heatmaps[j], masks[j]))
        g, raw, weights = global_heatmap(prep.heatmaps, drops)
        snapshot = cfg.to_dict()
        snapshot["percentile"] = q
        return ExplanationReport(prep.image_id, prep.holonym, prep.class_index, prep.score, parts, g, raw, weights, snapshot)

    def explain(self, image, image_id: str = "image") -> ExplanationReport:
        return self.finish(self.prepare(image, image_id))


def explain_image(image, holonym_model, meronyms, kb=None, config=None, image_id: str = "image") -> ExplanationReport:
    return Explainer(holonym_model, meronyms, kb, config).explain(image, image_id)


def reselect(report: ExplanationReport, t_score: float, t_f1: float) -> ExplanationReport:
    """Same report under other thresholds; only the selected flags change."""
    parts = [
        PartResult(p.name, p.f1, p.drop, p.drop > t_score and p.f1 > t_f1, p.heatmap, p.mask) for p in report.parts
    ]
    cfg = dict(report.config, t_score=t_score, t_f1=t_f1)
    return ExplanationReport(
        report.image, report.holonym, report.class_index, report.score, parts,
        report.global_heatmap, report.global_raw, list(report.weights), cfg,
    )


# ---------------------------------------------------------------- files

REPORT_SCHEMA = {
    "type": "object",
    "required": ["image", "holonym", "score", "parts", "global_heatmap", "weights", "config"],
    "properties": {
        "image": {"type": "string"},
        "holonym": {"type": "string"},
        "score": {"type": "number"},
        "parts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "f1", "drop", "selected", "heatmap", "mask"],
                "properties": {
                    "name": {"type": "string"},
                    "f1": {"type": "number"},
                    "drop": {"type": "number"},
                    "selected": {"type": "boolean"},
                    "heatmap": {"type": "string"},
                    "mask": {"type": "string"},
                },
            },
        },
        "global_heatmap": {"type": "string"},
        "weights": {"type": "array", "items": {"type": "number"}},
        "config": {"type": "object"},
    },
}


def save_report(report: ExplanationReport, directory: str | Path, image=None) -> Path:
    """Write report.json with heatmaps (HTF + PNG), masks and, when the input
    image is given, overlay PNGs. Paths in the JSON are relative to it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parts = []
    for p in report.parts:
        stem = safe_name(p.name)
        save_heatmap(directory / "heatmaps" / stem, p.heatmap)
        save_mask(directory / "masks" / stem, p.mask)
        entry = {
            "name": p.name,
            "f1": p.f1,
            "drop": p.drop,
            "selected": p.selected,
            "heatmap": f"heatmaps/{stem}.htf",
            "heatmap_png": f"heatmaps/{stem}.png",
            "mask": f"masks/{stem}.png",
        }
        if image is not None:
            save_png(directory / "overlays" / f"{stem}.png", overlay(image, p.heatmap))
            entry["overlay"] = f"overlays/{stem}.png"
        parts.append(entry)
    save_heatmap(directory / "global", report.global_heatmap)
    save_heatmap(directory / "global_raw", report.global_raw)
    doc = {
        "format": REPORT_FORMAT,
        "image": report.image,
        "holonym": report.holonym,
        "class_index": report.class_index,
        "score": report.score,
        "parts": parts,
        "selected": report.selected,
        "global_heatmap": "global.htf",
        "global_heatmap_png": "global.png",
        "global_raw": "global_raw.htf",
        "weights": report.weights,
        "config": report.config,
    }
    if image is not None:
        save_png(directory / "overlays" / "global.png", overlay(image, report.global_heatmap))
        doc["global_overlay"] = "overlays/global.png"
    path = directory / "report.json"
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def load_report(path: str | Path) -> ExplanationReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    parts = [
        PartResult(
            p["name"], p["f1"], p["drop"], p["selected"], load_heatmap(base / p["heatmap"]), load_mask(base / p["mask"])
        )
        for p in doc["parts"]
    ]
    return ExplanationReport(
        doc["image"],
        doc["holonym"],
        doc.get("class_index", -1),
        doc["score"],
        parts,
        load_heatmap(base / doc["global_heatmap"]),
        load_heatmap(base / doc.get("global_raw", doc["global_heatmap"])),
        list(doc["weights"]),
        doc["config"],
    )


# ---------------------------------------------------------------- summaries


def summarize_class(reports: Sequence[ExplanationReport], top: int = 5) -> dict:
    """Average and maximum drop per image, their class means, the parts
    with the highest mean drop and selected-part counts."""
    if not reports:
        raise ValueError("at least one report is required")
    avg, mx, n_sel = [], [], []
    per_part: dict[str, list[float]] = {}
    for r in reports:
        drops = r.drops
        avg.append(float(np.mean(drops)) if drops else 0.0)
        mx.append(float(np.max(drops)) if drops else 0.0)
        n_sel.append(len(r.selected))
        for p in r.parts:
            per_part.setdefault(p.name, []).append(p.drop)
    ranking = sorted(((name, float(np.mean(v))) for name, v in per_part.items()), key=lambda t: -t[1])
    holonyms = sorted({r.holonym for r in reports})
    return {
        "holonym": holonyms[0] if len(holonyms) == 1 else holonyms,
        "images": len(reports),
        "avg_drop": avg,
        "max_drop": mx,
        "mean_avg_drop": float(np.mean(avg)),
        "mean_max_drop": float(np.mean(mx)),
        "top_parts": ranking[:top],
        "selected_mean": float(np.mean(n_sel)),
        "selected_std": float(np.std(n_sel)),
    }
