"""Image collection through search-engine clients.

Any object with ``name`` and ``query(term, limit) -> list[bytes]`` is an
engine; engines that also offer ``similar(payload, limit)`` are asked for
visually similar images of every downloaded result.
"""
from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .dataset import DatasetError, ImageSample

log = logging.getLogger(__name__)

DEFAULT_LIMITS = {"google": 40, "bing": 60}
DEFAULT_SIMILAR_LIMIT = 5
MAX_PER_ENGINE = 100
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class ScrapeError(DatasetError):
    pass


class EngineClient(Protocol):
    name: str

    def query(self, term: str, limit: int) -> list[bytes]: ...


def _slug(term: str) -> str:
    return "_".join(term.lower().split())


class LocalFolderEngine:
    """Offline engine serving image files from a directory.

    ``query`` returns files from ``<root>/<slug of term>/`` when that exists
    and from ``<root>`` otherwise; ``similar`` serves ``<root>/similar/``.
    """

    def __init__(self, name: str, root: str | Path, with_similar: bool = True):
        self.name = name
        self.root = Path(root)
        if not with_similar:
            self.similar = None

    @staticmethod
    def _files(directory: Path) -> list[Path]:
        if not directory.is_dir():
            return []
        return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def query(self, term: str, limit: int) -> list[bytes]:
        sub = self.root / _slug(term)
        files = self._files(sub if sub.is_dir() else self.root)
        return [p.read_bytes() for p in files[:limit]]

    def similar(self, payload: bytes, limit: int) -> list[bytes]:
        return [p.read_bytes() for p in self._files(self.root / "similar")[:limit]]


def _decode(payload: bytes) -> np.ndarray | None:
    try:
        with Image.open(io.BytesIO(payload)) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError):
        return None


def scrape_part(
    holonym: str,
    part: str,
    engines: Sequence[EngineClient],
    limits: Mapping[str, int] | Sequence[int] | None = None,
    similar_limit: int = DEFAULT_SIMILAR_LIMIT,
) -> list[ImageSample]:
    """Download images for "<holonym> <part>" from every engine.

    Per-engine download counts come from ``limits`` (by engine name or by
    position) and are capped at 100. Engine failures are logged and skipped.
    """
    term = f"{holonym} {part}"
    if limits is None:
        limits = DEFAULT_LIMITS
    samples: list[ImageSample] = []
    for pos, engine in enumerate(engines):
        if isinstance(limits, Mapping):
            limit = int(limits.get(engine.name, 40))
        else:
            limit = int(limits[pos])
        limit = max(0, min(limit, MAX_PER_ENGINE))
        if limit == 0:
            continue
        try:
            payloads = list(engine.query(term, limit))[:limit]
        except Exception as exc:
            log.warning("engine %s failed for %r: %s", engine.name, term, exc)
            continue
        similar = getattr(engine, "similar", None)
        for i, payload in enumerate(payloads):
            pixels = _decode(payload)
            if pixels is None:
                log.warning("engine %s returned an undecodable image for %r", engine.name, term)
                continue
            base = f"{engine.name}:{_slug(term)}:{i:03d}"
            samples.append(ImageSample(pixels, part, "scrape", base))
            if similar is None or similar_limit <= 0:
                continue
            try:
                extra = list(similar(payload, similar_limit))[:similar_limit]
            except Exception as exc:
                log.warning("engine %s similar-image lookup failed: %s", engine.name, exc)
                continue
            for j, sp in enumerate(extra):
                px = _decode(sp)
                if px is not None:
                    samples.append(ImageSample(px, part, "scrape", f"{base}:sim{j}"))
    if not samples:
        raise ScrapeError(f"no images collected for {term!r}")
    return samples
