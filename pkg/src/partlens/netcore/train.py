"""Head training on frozen features, and prior-invariant (calibrated) F1."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image, ImageEnhance

from ..datakit.dataset import ImageSample, PartDataset
from .backend import FeatureExtractor, preprocess
from .head import Head, build_head, head_backward, head_forward, softmax_xent

log = logging.getLogger(__name__)

FILL = (124, 116, 104)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 64
    lr: float = 0.001
    patience: int = 5
    momentum: float = 0.9
    seed: int = 0
    hflip: bool = True
    rotation: bool = True
    crop: bool = True
    color_jitter: bool = True
    grayscale: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @property
    def augments(self) -> bool:
        return any((self.hflip, self.rotation, self.crop, self.color_jitter, self.grayscale))

    def to_dict(self) -> dict:
        return asdict(self)


def train_augment(pixels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, rotate, crop, jitter colours and occasionally drop to gray."""
    im = Image.fromarray(pixels)
    w, h = im.size
    if cfg.hflip and rng.random() < 0.5:
        im = im.transpose(Image.FLIP_LEFT_RIGHT)
    if cfg.rotation:
        im = im.rotate(float(rng.uniform(-10, 10)), resample=Image.BILINEAR, fillcolor=FILL)
    if cfg.crop:
        scale = float(rng.uniform(0.8, 1.0))
        cw, ch = max(1, round(w * scale)), max(1, round(h * scale))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        im = im.crop((x0, y0, x0 + cw, y0 + ch)).resize((w, h), Image.BILINEAR)
    if cfg.color_jitter:
        for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast, ImageEnhance.Color):
            im = enhancer(im).enhance(float(rng.uniform(0.8, 1.2)))
    if cfg.grayscale and rng.random() < 0.1:
        im = im.convert("L").convert("RGB")
    return np.asarray(im)


def sample_features(fe: FeatureExtractor, samples: Sequence[ImageSample], chunk: int = 64) -> np.ndarray:
    """Feature maps for samples, from a store by origin id when the backend
    supports it, otherwise by running the extractor on the pixels."""
    lookup = getattr(fe, "lookup", None)
    if lookup is not None:
        return np.stack([lookup(s.origin_id) for s in samples])
    out = []
    for i in range(0, len(samples), chunk):
        x = np.stack([preprocess(s.pixels) for s in samples[i : i + chunk]])
        out.append(fe.extract(x))
    return np.concatenate(out) if out else np.zeros((0, *fe.output_shape), np.float32)


@dataclass
class TrainResult:
    head: Head
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _eval_loss(head: Head, feats: np.ndarray, labels: np.ndarray, batch: int):
    total, correct = 0.0, 0
    for i in range(0, len(labels), batch):
        logits, _ = head_forward(head, feats[i : i + batch], "eval")
        loss, _ = softmax_xent(logits, labels[i : i + batch])
        total += loss * len(logits)
        correct += int((logits.argmax(axis=1) == labels[i : i + batch]).sum())
    return total / len(labels), correct / len(labels)


def train_head(
    fe: FeatureExtractor,
    head_template,
    ds: PartDataset,
    cfg: TrainConfig,
    class_names: Sequence[str] | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum on the head only.

    ``head_template`` is either a layer template (list of dicts) or an
    existing Head whose parameters are used as the starting point. Stops
    once validation loss has not improved for ``patience`` epochs and
    returns the parameters from the best validation epoch.
    """
    class_names = list(class_names or ds.classes())
    index = {c: i for i, c in enumerate(class_names)}
    train = [s for s in ds.fold("train") if s.label in index]
    val = [s for s in ds.fold("val") if s.label in index]
    if not train:
        raise TrainingError("training fold is empty")
    if not val:
        raise TrainingError("validation fold is empty")

    if isinstance(head_template, Head):
        head = head_template.copy()
        if head.class_names != class_names:
            raise TrainingError("head classes do not match dataset classes")
    else:
        head = build_head(head_template, fe.output_shape, class_names, seed=cfg.seed)

    y_train = np.array([index[s.label] for s in train])
    y_val = np.array([index[s.label] for s in val])
    f_val = sample_features(fe, val)
    can_augment = cfg.augments and getattr(fe, "lookup", None) is None
    f_train = None if can_augment else sample_features(fe, train)

    velocity = [np.zeros_like(p) for _, p in head.parameters()]
    best_loss, best_state, best_epoch = math.inf, head.get_state(), 0
    wait = 0
    history = []
    step = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        if can_augment:
            aug = []
            for idx in order:
                rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
                aug.append(ImageSample(train_augment(train[idx].pixels, cfg, rng), train[idx].label,
                                       train[idx].source, train[idx].origin_id))
            epoch_feats = sample_features(fe, aug)
        else:
            epoch_feats = f_train[order]
        labels = y_train[order]

        running = 0.0
        for i in range(0, len(order), cfg.batch):
            fb, yb = epoch_feats[i : i + cfg.batch], labels[i : i + cfg.batch]
            logits, cache = head_forward(head, fb, "train", seed=cfg.seed, step=step)
            loss, d = softmax_xent(logits, yb)
            grads, _ = head_backward(head, cache, d)
            for v, (_, p), g in zip(velocity, head.parameters(), grads):
                v *= cfg.momentum
                v += g
                p -= cfg.lr * v
            head.touch()
            running += loss * len(yb)
            step += 1

        val_loss, val_acc = _eval_loss(head, f_val, y_val, cfg.batch)
        history.append(
            {"epoch": epoch, "train_loss": running / len(order), "val_loss": val_loss, "val_acc": val_acc}
        )
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, running / len(order), val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_state, best_epoch = val_loss, head.get_state(), epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break

    head.set_state(best_state)
    return TrainResult(head, history, best_epoch, epoch)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def calibrated_f1(confusion) -> np.ndarray:
    """Per-class F1 after rescaling each true-class row to unit mass.

    With a uniform class prior the scores no longer depend on how many test
    samples each class happened to have.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError("confusion must be a square matrix with at least 2 classes")
    rows = cm.sum(axis=1)
    if np.any(rows <= 0):
        empty = np.flatnonzero(rows <= 0).tolist()
        raise ValueError(f"true class(es) {empty} have no samples")
    w = cm / rows[:, None]
    tp = np.diag(w)
    fp = w.sum(axis=0) - tp
    fn = 1.0 - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)


def evaluate_head(fe: FeatureExtractor, head: Head, samples: Sequence[ImageSample]):
    """Confusion matrix and calibrated F1 of ``head`` on labelled samples."""
    index = {c: i for i, c in enumerate(head.class_names)}
    feats = sample_features(fe, samples)
    logits, _ = head_forward(head, feats, "eval")
    y_true = [index[s.label] for s in samples]
    cm = confusion_matrix(y_true, logits.argmax(axis=1), head.n_classes)
    return cm, calibrated_f1(cm)
