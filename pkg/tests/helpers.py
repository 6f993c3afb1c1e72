"""Independent oracles shared by the unit and acceptance suites."""
from __future__ import annotations

import itertools

import numpy as np

from partlens.netcore.head import (
    Dropout,
    Flatten,
    Head,
    Linear,
    MaxPool2d,
    ReLU,
    dropout_rng,
    head_backward,
    head_forward,
    softmax_xent,
)


def loop_forward(head: Head, f: np.ndarray, dropout_masks=None) -> np.ndarray:
    """Plain-loop forward pass for a single feature map (no numpy vectorization)."""
    x = np.array(f, dtype=np.float64)
    for i, layer in enumerate(head.layers):
        if isinstance(layer, MaxPool2d):
            c, h, w = x.shape
            ho = (h - layer.k) // layer.s + 1
            wo = (w - layer.k) // layer.s + 1
            y = np.empty((c, ho, wo))
            for ch, r, q in itertools.product(range(c), range(ho), range(wo)):
                best = -np.inf
                for a, b in itertools.product(range(layer.k), range(layer.k)):
                    best = max(best, x[ch, r * layer.s + a, q * layer.s + b])
                y[ch, r, q] = best
            x = y
        elif isinstance(layer, Flatten):
            x = np.array([v for v in x.flat])
        elif isinstance(layer, Linear):
            y = np.empty(layer.n_out)
            for o in range(layer.n_out):
                acc = layer.bias[o]
                for j in range(layer.n_in):
                    acc += layer.weight[o, j] * x[j]
                y[o] = acc
            x = y
        elif isinstance(layer, ReLU):
            x = np.array([v if v > 0 else 0.0 for v in x.flat]).reshape(x.shape)
        elif isinstance(layer, Dropout):
            if dropout_masks is not None and i in dropout_masks:
                x = x * dropout_masks[i]
        else:  # pragma: no cover
            raise TypeError(layer)
    return x


def random_head(rng: np.random.Generator, max_units: int = 64) -> Head:
    """Random head with at most 3 linear layers and at most ``max_units`` units each."""
    k = int(rng.integers(1, 4))
    side = int(rng.integers(2, 7))
    layers: list = []
    shape = (k, side, side)
    if rng.random() < 0.6:
        pk = int(rng.integers(1, min(3, side) + 1))
        layers.append(MaxPool2d(pk, int(rng.integers(1, pk + 1))))
        shape = layers[-1].out_shape(shape)
    layers.append(Flatten())
    width = int(np.prod(shape))
    n_linear = int(rng.integers(1, 4))
    n_classes = int(rng.integers(2, 6))
    for li in range(n_linear):
        out = n_classes if li == n_linear - 1 else int(rng.integers(2, max_units + 1))
        layers.append(Linear(rng.normal(0, 1.0, (out, width)), rng.normal(0, 1.0, out)))
        width = out
        if li < n_linear - 1:
            layers.append(ReLU())
            if rng.random() < 0.3:
                layers.append(Dropout(float(rng.uniform(0.1, 0.5))))
    return Head(layers, [f"c{i}" for i in range(n_classes)], (k, side, side))


def _kink_margin(head: Head, f: np.ndarray, mode: str, seed: int) -> float:
    """Smallest distance of any ReLU input from 0 or any max-pool runner-up
    from its window maximum; finite differences are exact only away from these."""
    x = np.asarray(f, np.float64)[None]
    margin = np.inf
    for i, layer in enumerate(head.layers):
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(x).min()))
        if isinstance(layer, MaxPool2d) and layer.k > 1:
            win = np.lib.stride_tricks.sliding_window_view(x, (layer.k, layer.k), axis=(2, 3))
            win = np.sort(win[:, :, :: layer.s, :: layer.s].reshape(*win.shape[:2], -1, layer.k**2), axis=-1)
            margin = min(margin, float((win[..., -1] - win[..., -2]).min()))
        rng = dropout_rng(seed, 0, i) if mode == "train" and isinstance(layer, Dropout) else None
        x, _ = layer.forward(x, mode == "train", rng)
    return margin


def sample_well_posed(rng: np.random.Generator, margin: float = 0.05, mode: str = "eval"):
    """A random head and input with every ReLU/max-pool decision at least
    ``margin`` away from switching (redraws otherwise)."""
    while True:
        head = random_head(rng)
        for _ in range(200):
            f = rng.normal(0, 1.0, head.input_shape)
            if _kink_margin(head, f, mode, 7) > margin:
                return head, f, int(rng.integers(0, head.n_classes))


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(head: Head, f: np.ndarray, label: int, mode: str = "eval", step: float = 1e-3):
    """Max relative error of analytic vs central-difference gradients for
    every parameter and every input element of the cross-entropy loss."""
    seed = 7

    def loss_at(x):
        logits, _ = head_forward(head, x, mode, seed=seed, step=0)
        return softmax_xent(logits, label)[0]

    logits, cache = head_forward(head, f, mode, seed=seed, step=0)
    _, d = softmax_xent(logits, label)
    grads, d_input = head_backward(head, cache, d)

    worst = 0.0
    for (_, p), g in zip(head.parameters(), grads):
        num = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            head.touch()
            up = loss_at(f)
            p[idx] = old - step
            head.touch()
            down = loss_at(f)
            p[idx] = old
            head.touch()
            num[idx] = (up - down) / (2 * step)
        worst = max(worst, float(rel_err(g, num).max()))

    x = np.array(f, dtype=np.float64)
    num = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = loss_at(x)
        x[idx] = old - step
        down = loss_at(x)
        x[idx] = old
        num[idx] = (up - down) / (2 * step)
    worst = max(worst, float(rel_err(d_input, num).max()))
    return worst


def brute_force_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Pair counting: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, np.float64).ravel()
    pos = np.asarray(positives, bool).ravel()
    wins = 0.0
    pairs = 0
    for a in s[pos]:
        for b in s[~pos]:
            pairs += 1
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / pairs


class BoxCountStub:
    """Model whose single class score is the fraction of pixels inside a
    box that are not the gray fill."""

    def __init__(self, box, fill=(124, 116, 104)):
        self.box = box
        self.fill = np.asarray(fill, dtype=np.uint8)

    def __call__(self, image):
        x0, y0, x1, y1 = self.box
        region = np.asarray(image)[y0:y1, x0:x1]
        return np.array([float((region != self.fill).any(axis=2).mean())])


class ConstantStub:
    def __init__(self, value):
        self.value = value

    def __call__(self, image):
        return np.array([self.value, 1.0 - self.value])


def box_indicator(h, w, box):
    x0, y0, x1, y1 = box
    hm = np.zeros((h, w))
    hm[y0:y1, x0:x1] = 1.0
    return hm


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE: list[str] = []
