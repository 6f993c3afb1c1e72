"""Procedural toy world of colored-block creatures on noise backgrounds.

Every creature has a head, a torso and two legs. Creatures of different
classes share torso and leg colors and differ only in head color, so the
head is the one part that decides the class. The headless "nub" class
gives a classifier somewhere to go when no head is visible. Part placement
is known exactly, which makes localization and ablation effects checkable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datakit.dataset import BBox, save_png

SIZE = 224
HEAD = 48
TORSO_W, TORSO_H = 96, 56
LEG_W, LEG_H = 16, 56

TORSO_COLOR = (40, 170, 70)
LEG_COLOR = (230, 200, 30)
HEAD_COLORS = {
    "dax": (220, 40, 40),
    "wug": (40, 70, 230),
    "blick": (240, 240, 240),
    "fep": (15, 15, 15),
    "nub": None,
}
TARGETS = ("dax", "wug")
PARTS = ("head", "torso", "leg")


@dataclass
class Creature:
    pixels: np.ndarray
    label: str
    parts: dict[str, list[BBox]] = field(default_factory=dict)

    def part_mask(self, part: str) -> np.ndarray:
        m = np.zeros(self.pixels.shape[:2], dtype=bool)
        for b in self.parts[part]:
            m |= b.mask(*self.pixels.shape[:2])
        return m


def noise_background(rng: np.random.Generator, size: int = SIZE, sigma: float = 40.0) -> np.ndarray:
    base = rng.normal(128.0, sigma, (size, size, 3))
    return np.clip(base, 0, 255).astype(np.uint8)


def render(label: str, rng: np.random.Generator, size: int = SIZE) -> Creature:
    """Draw one creature of class ``label`` at a random position."""
    img = noise_background(rng, size)
    width, height = HEAD + TORSO_W, HEAD // 2 + TORSO_H + LEG_H
    x = int(rng.integers(4, size - width - 4 + 1))
    y = int(rng.integers(4, size - height - 4 + 1))
    facing_left = bool(rng.integers(0, 2))
    ty = y + HEAD // 2
    if facing_left:
        head = BBox(x, y, x + HEAD, y + HEAD)
        tx = x + HEAD
    else:
        tx = x
        head = BBox(x + TORSO_W, y, x + TORSO_W + HEAD, y + HEAD)
    torso = BBox(tx, ty, tx + TORSO_W, ty + TORSO_H)
    legs = [
        BBox(tx + 8, ty + TORSO_H, tx + 8 + LEG_W, ty + TORSO_H + LEG_H),
        BBox(tx + TORSO_W - 8 - LEG_W, ty + TORSO_H, tx + TORSO_W - 8, ty + TORSO_H + LEG_H),
    ]
    for box, color in [(torso, TORSO_COLOR), (head, HEAD_COLORS[label])] + [(b, LEG_COLOR) for b in legs]:
        if color is None:
            continue
        patch = np.asarray(color, dtype=np.float64) + rng.normal(0.0, 8.0, (box.height, box.width, 3))
        img[box.y_min : box.y_max, box.x_min : box.x_max] = np.clip(patch, 0, 255).astype(np.uint8)
    return Creature(img, label, {"head": [head], "torso": [torso], "leg": legs})


def creatures(classes, n_per_class: int, seed: int) -> list[Creature]:
    out = []
    for ci, c in enumerate(classes):
        for i in range(n_per_class):
            out.append(render(c, np.random.default_rng([seed, ci, i])))
    return out


def annotation(creature: Creature, image_name: str) -> dict:
    return {
        "image": image_name,
        "parts": [{"name": p, "bbox": b.as_list()} for p in PARTS for b in creature.parts[p]],
    }


def write_world(root: str | Path, n_per_class: int = 30, n_test: int = 10, seed: int = 0) -> dict:
    """Lay out a toy world on disk.

    ``parts/<holonym>/`` holds annotated images (PNG + JSON sidecar) for the
    part datasets, ``holonyms/<class>/`` whole images for training the
    holonym classifier, and ``test/`` images with their part boxes.
    """
    root = Path(root)
    classes = list(HEAD_COLORS)
    for c in TARGETS:
        for i, cr in enumerate(creatures([c], n_per_class, seed * 7919 + 1 + TARGETS.index(c))):
            name = f"{c}_{i:03d}.png"
            save_png(root / "parts" / c / name, cr.pixels)
            (root / "parts" / c / f"{c}_{i:03d}.json").write_text(json.dumps(annotation(cr, name)) + "\n")
    for cr_i, cr in enumerate(creatures(classes, n_per_class, seed * 7919 + 3)):
        save_png(root / "holonyms" / cr.label / f"{cr.label}_{cr_i:04d}.png", cr.pixels)
    test_index = []
    for i, cr in enumerate(creatures(list(TARGETS), n_test, seed * 7919 + 5)):
        name = f"{cr.label}_{i:03d}.png"
        save_png(root / "test" / name, cr.pixels)
        test_index.append(annotation(cr, name) | {"label": cr.label})
    (root / "test" / "index.json").write_text(json.dumps(test_index, indent=1) + "\n")
    kb = {
        "concepts": [
            {
                "id": c,
                "hypernyms": [],
                "parts": [
                    {"name": p, "visible": True, "within": []}
                    for p in PARTS
                    if HEAD_COLORS[c] is not None or p != "head"
                ],
            }
            for c in classes
        ]
    }
    (root / "world.kb.json").write_text(json.dumps(kb, indent=1) + "\n")
    return {"root": str(root), "classes": classes, "targets": list(TARGETS), "seed": seed}
