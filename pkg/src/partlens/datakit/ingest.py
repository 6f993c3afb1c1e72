"""Reading raw part images from disk.

Two layouts are understood under ``<root>/<holonym>/``:

* box annotations: ``*.json`` sidecars of the form
  ``{"image": "a.jpg", "parts": [{"name": "head", "bbox": [x0, y0, x1, y1]}]}``
  with the image path relative to the sidecar;
* pre-cropped folders: ``<part>/<image files>``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .crop import crop_part
from .dataset import BBox, DatasetError, ImageSample, load_rgb
from .scrape import IMAGE_SUFFIXES


def _parse_sidecar(path: Path) -> tuple[Path, list[tuple[str, BBox]]]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("image"), str):
        raise DatasetError(f"{path}: missing string field 'image'")
    parts = doc.get("parts")
    if not isinstance(parts, list):
        raise DatasetError(f"{path}: missing list field 'parts'")
    boxes = []
    for i, p in enumerate(parts):
        bbox = p.get("bbox") if isinstance(p, dict) else None
        if not isinstance(p, dict) or not isinstance(p.get("name"), str):
            raise DatasetError(f"{path}: parts[{i}].name must be a string")
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, int) for v in bbox)):
            raise DatasetError(f"{path}: parts[{i}].bbox must be four integers")
        try:
            boxes.append((p["name"], BBox(*bbox)))
        except DatasetError as exc:
            raise DatasetError(f"{path}: parts[{i}]: {exc}") from None
    return path.parent / doc["image"], boxes


def crops_from_annotations(root: str | Path, holonym: str, parts: Iterable[str] | None = None) -> list[ImageSample]:
    """Square crops for every annotated box whose part name is wanted.

    Boxes of all other annotated parts in the same image act as siblings
    that block extension.
    """
    folder = Path(root) / holonym
    wanted = None if parts is None else set(parts)
    out = []
    for sidecar in sorted(folder.glob("*.json")):
        image_path, boxes = _parse_sidecar(sidecar)
        if not image_path.exists():
            raise DatasetError(f"{sidecar}: image {image_path.name} not found")
        pixels = load_rgb(image_path)
        h, w = pixels.shape[:2]
        whole = ImageSample(pixels, holonym, "crop", f"{holonym}/{sidecar.stem}")
        for k, (name, box) in enumerate(boxes):
            if wanted is not None and name not in wanted:
                continue
            if not box.inside(h, w):
                raise DatasetError(f"{sidecar}: box {box.as_list()} for {name!r} outside {w}x{h} image")
            siblings = [b for j, (_, b) in enumerate(boxes) if j != k]
            out.append(crop_part(whole, box, siblings, label=name, origin_id=f"{holonym}/{sidecar.stem}#{k}"))
    return out


def samples_from_folders(root: str | Path, holonym: str, parts: Iterable[str] | None = None) -> list[ImageSample]:
    folder = Path(root) / holonym
    names = sorted(p.name for p in folder.iterdir() if p.is_dir()) if folder.is_dir() else []
    if parts is not None:
        names = [n for n in parts if (folder / n).is_dir()]
    out = []
    for name in names:
        for f in sorted((folder / name).iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                out.append(ImageSample(load_rgb(f), name, "scrape", f"{holonym}/{name}/{f.name}"))
    return out


def ingest(root: str | Path, holonym: str, parts: Iterable[str] | None = None) -> list[ImageSample]:
    """Annotation crops plus pre-cropped folder images, in that order."""
    parts = None if parts is None else list(parts)
    folder = Path(root) / holonym
    if not folder.is_dir():
        raise DatasetError(f"no data folder for {holonym!r} under {root}")
    samples = crops_from_annotations(root, holonym, parts) + samples_from_folders(root, holonym, parts)
    if not samples:
        raise DatasetError(f"no images found for {holonym!r} under {root}")
    return samples
