"""Feed-forward head applied on top of a frozen convolutional feature map.

Layers operate on batches: maxpool takes (N, K, H, W), linear takes (N, D).
All arithmetic is float64; parameters are stored as float32 HTF1 files.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, k: int = 2, s: int | None = None):
        self.k = int(k)
        self.s = int(s if s is not None else k)
        if self.k < 1 or self.s < 1:
            raise ValueError("maxpool kernel and stride must be positive")

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (K, H, W), got {shape}")
        c, h, w = shape
        if h < self.k or w < self.k:
            raise ShapeError(f"maxpool window {self.k} larger than input {h}x{w}")
        return (c, (h - self.k) // self.s + 1, (w - self.k) // self.s + 1)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        _, ho, wo = self.out_shape((c, h, w))
        win = np.lib.stride_tricks.sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        win = win[:, :, :: self.s, :: self.s][:, :, :ho, :wo].reshape(n, c, ho, wo, self.k * self.k)
        arg = np.argmax(win, axis=-1)  # first maximal element on ties
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, cache, dy):
        shape, arg = cache
        n, c, h, w = shape
        ho, wo = arg.shape[2:]
        dx = np.zeros(shape, dtype=dy.dtype)
        oy = np.arange(ho)[:, None] * self.s + arg // self.k
        ox = np.arange(wo)[None, :] * self.s + arg % self.k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, oy, ox), dy)
        return dx, {}

    def spec(self):
        return {"kind": self.kind, "k": self.k, "s": self.s}


class Flatten:
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}

    def spec(self):
        return {"kind": self.kind}


class ReLU:
    kind = "relu"

    def out_shape(self, shape):
        return shape

    def forward(self, x, train, rng):
        keep = x > 0
        return np.where(keep, x, 0.0), keep

    def backward(self, cache, dy):
        return np.where(cache, dy, 0.0), {}

    def spec(self):
        return {"kind": self.kind}


class Dropout:
    kind = "dropout"

    def __init__(self, p: float = 0.5):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = float(p)

    def out_shape(self, shape):
        return shape

    def forward(self, x, train, rng):
        if not train or self.p == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, mask

    def backward(self, cache, dy):
        return (dy if cache is None else dy * cache), {}

    def spec(self):
        return {"kind": self.kind, "p": self.p}


class Linear:
    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("linear weight must be (out, in) and bias (out,)")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Linear":
        bound = 1.0 / math.sqrt(n_in)
        return cls(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out))

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"linear expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x, train, rng):
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, dy):
        return dy @ self.weight, {"weight": dy.T @ cache, "bias": dy.sum(axis=0)}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


@dataclass
class ForwardCache:
    head_version: int
    caches: list
    input_shape: tuple


@dataclass
class Head:
    layers: list
    class_names: list[str]
    input_shape: tuple[int, ...]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        last = [l for l in self.layers if isinstance(l, Linear)]
        if not last or shape != (len(self.class_names),) or last[-1].n_out != len(self.class_names):
            raise ShapeError(
                f"head output {shape} does not match {len(self.class_names)} class names"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in a fixed order; arrays are live views."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                out.append((f"layer{i}.weight", layer.weight))
                out.append((f"layer{i}.bias", layer.bias))
        return out

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for _, p in self.parameters()]

    def set_state(self, state: Sequence[np.ndarray]):
        for (_, dst), src in zip(self.parameters(), state, strict=True):
            dst[...] = src
        self.touch()

    def touch(self):
        """Mark parameters as changed; forward caches taken earlier become stale."""
        self.version += 1

    def copy(self) -> "Head":
        layers = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                layers.append(Linear(layer.weight.copy(), layer.bias.copy()))
            else:
                layers.append(layer)
        return Head(layers, list(self.class_names), self.input_shape)


def _layer_from_spec(spec: dict, shape, rng):
    kind = spec["kind"]
    if kind == "maxpool":
        return MaxPool2d(spec.get("k", 2), spec.get("s"))
    if kind == "flatten":
        return Flatten()
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(spec.get("p", 0.5))
    if kind == "linear":
        if len(shape) != 1:
            raise ShapeError(f"linear needs a flat input, got {shape}; add a flatten layer")
        return Linear.init(shape[0], int(spec["out"]), rng)
    raise ValueError(f"unknown layer kind {kind!r}")


def build_head(template: Sequence[dict], input_shape, class_names: Sequence[str], seed: int = 0) -> Head:
    """Instantiate a head from a layer template.

    A linear layer whose ``out`` is ``"classes"`` (or the last linear layer if
    none says so) gets one output per class name.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for spec in template:
        spec = dict(spec)
        if spec.get("kind") == "linear" and spec.get("out") == "classes":
            spec["out"] = len(class_names)
        layer = _layer_from_spec(spec, shape, rng)
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Head(layers, list(class_names), input_shape)


def vgg_template(hidden: int = 4096, dropout: float = 0.5) -> list[dict]:
    """maxpool -> flatten -> FC -> relu -> dropout -> FC -> relu -> dropout -> FC(classes)."""
    return [
        {"kind": "maxpool", "k": 2, "s": 2},
        {"kind": "flatten"},
        {"kind": "linear", "out": hidden},
        {"kind": "relu"},
        {"kind": "dropout", "p": dropout},
        {"kind": "linear", "out": hidden},
        {"kind": "relu"},
        {"kind": "dropout", "p": dropout},
        {"kind": "linear", "out": "classes"},
    ]


def dropout_rng(seed: int, step: int, layer: int) -> np.random.Generator:
    # Counter-based stream per (seed, step, layer): reproducible without carried state.
    counter = np.array([0, 0, layer, step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def head_forward(h: Head, f: np.ndarray, mode: str = "eval", seed: int = 0, step: int = 0):
    """Run the head. ``f`` is one feature map (K, H, W) or a batch (N, K, H, W).

    Returns (logits, cache); logits are (C,) or (N, C) matching the input.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(f, dtype=np.float64)
    single = x.shape == h.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != h.input_shape:
        raise ShapeError(f"head expects feature maps of shape {h.input_shape}, got {np.shape(f)}")
    train = mode == "train"
    caches = []
    for i, layer in enumerate(h.layers):
        rng = dropout_rng(seed, step, i) if train and isinstance(layer, Dropout) else None
        x, c = layer.forward(x, train, rng)
        caches.append(c)
    cache = ForwardCache(h.version, caches, (single, np.shape(f)))
    return (x[0] if single else x), cache


def head_backward(h: Head, cache: ForwardCache, d_logits: np.ndarray):
    """Reverse-mode pass. Returns (grads, d_input) where grads aligns with
    ``h.parameters()`` and d_input has the shape of the forward input."""
    if cache.head_version != h.version:
        raise StaleCacheError("head parameters changed since this forward pass")
    single, in_shape = cache.input_shape
    dy = np.asarray(d_logits, dtype=np.float64)
    if single:
        dy = dy[None]
    grads_rev = []
    for layer, c in zip(reversed(h.layers), reversed(cache.caches)):
        dy, g = layer.backward(c, dy)
        if g:
            grads_rev.append(g["bias"])
            grads_rev.append(g["weight"])
    grads = grads_rev[::-1]
    return grads, dy.reshape(in_shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, label):
    """Cross entropy with log-sum-exp stabilisation.

    Works on one logit vector with an int label, or on a batch with an int
    array; the batch loss is the mean and d_logits is scaled accordingly.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ShapeError("one label per logit row required")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, labels]
    probs = np.exp(shifted - lse[:, None])
    d = probs.copy()
    d[rows, labels] -= 1.0
    if single:
        return float(losses[0]), d[0]
    return float(losses.mean()), d / z.shape[0]


def save_head(h: Head, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(h.layers):
        spec = layer.spec()
        if isinstance(layer, Linear):
            for name in ("weight", "bias"):
                fname = f"layer{i}.{name}.htf"
                tensorio.save(directory / fname, getattr(layer, name))
                spec[name] = fname
        layers.append(spec)
    index = {
        "format": "partlens-head/1",
        "input_shape": list(h.input_shape),
        "class_names": list(h.class_names),
        "layers": layers,
    }
    if extra:
        index["extra"] = extra
    path = directory / "head.json"
    path.write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return path


def load_head(path: str | Path) -> Head:
    path = Path(path)
    if path.is_dir():
        path = path / "head.json"
    index = json.loads(path.read_text(encoding="utf-8"))
    layers = []
    for spec in index["layers"]:
        if spec["kind"] == "linear":
            w = tensorio.load(path.parent / spec["weight"])
            b = tensorio.load(path.parent / spec["bias"])
            layers.append(Linear(w, b))
        else:
            layers.append(_layer_from_spec(spec, None, None))
    return Head(layers, index["class_names"], tuple(index["input_shape"]))
