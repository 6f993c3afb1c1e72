from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import FeatureExtractor, preprocess
from .head import Head, ShapeError, head_forward, softmax


@dataclass
class SplitModel:
    """Frozen extractor followed by a head; calling it on raw RGB images
    returns class probabilities."""

    extractor: FeatureExtractor
    head: Head
    chunk: int = 32

    def __post_init__(self):
        if tuple(self.extractor.output_shape) != tuple(self.head.input_shape):
            raise ShapeError(
                f"extractor yields {tuple(self.extractor.output_shape)} but head expects {self.head.input_shape}"
            )

    @property
    def class_names(self) -> list[str]:
        return list(self.head.class_names)

    def features(self, image) -> np.ndarray:
        return self.extractor.extract(preprocess(image))

    def probs_from_features(self, feats: np.ndarray) -> np.ndarray:
        logits, _ = head_forward(self.head, feats)
        return softmax(logits)

    def __call__(self, image) -> np.ndarray:
        return self.probs_from_features(self.features(image))

    def predict_batch(self, images) -> np.ndarray:
        out = []
        for i in range(0, len(images), self.chunk):
            x = np.stack([preprocess(im) for im in images[i : i + self.chunk]])
            out.append(self.probs_from_features(self.extractor.extract(x)))
        return np.concatenate(out) if out else np.zeros((0, self.head.n_classes))
