from __future__ import annotations

import math
from typing import Sequence

import numpy as np

EIGEN_FLOOR = 1e-12


def pca_scores(features, n_components: int | None = None) -> np.ndarray:
    """Variance-normalized projection energy of each centred vector,
    sum_j (x . v_j)^2 / lambda_j over the principal axes v_j."""
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if n_components is not None:
        evals, evecs = evals[:n_components], evecs[:, :n_components]
    proj = xc @ evecs
    return (proj**2 / np.maximum(evals, EIGEN_FLOOR)).sum(axis=1)


def remove_outliers(features: Sequence, contamination: float = 0.15, n_components: int | None = None):
    """Flag the floor(contamination * N) highest-scoring vectors.

    Returns (kept, flagged) as sorted index lists. Ties go to the lower index.
    """
    if not 0.0 <= contamination < 0.5:
        raise ValueError("contamination must be in [0, 0.5)")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two feature vectors of equal dimension")
    n_flag = math.floor(contamination * len(x) + 1e-9)
    if n_flag == 0:
        return list(range(len(x))), []
    scores = pca_scores(x, n_components)
    order = sorted(range(len(x)), key=lambda i: (-scores[i], i))
    flagged = sorted(order[:n_flag])
    kept = sorted(order[n_flag:])
    return kept, flagged
