"""Frozen feature extractors and the image preprocessing they expect."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensorio

INPUT_SIZE = 224
RESIZE_TO = 256
MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])


class BackendError(RuntimeError):
    pass


def _as_float_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image of shape (h, w, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    raise ValueError(f"unsupported pixel dtype {arr.dtype}")


def input_geometry(h: int, w: int):
    """(resized_h, resized_w, top, left) of the 224 crop for an h x w image."""
    if (h, w) == (INPUT_SIZE, INPUT_SIZE):
        return h, w, 0, 0
    if h <= w:
        rh, rw = RESIZE_TO, int(RESIZE_TO * w / h)
    else:
        rh, rw = int(RESIZE_TO * h / w), RESIZE_TO
    top = int(round((rh - INPUT_SIZE) / 2.0))
    left = int(round((rw - INPUT_SIZE) / 2.0))
    return rh, rw, top, left


def _resize_channels(arr: np.ndarray, size_hw) -> np.ndarray:
    h, w = size_hw
    chans = [
        np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in range(arr.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(np.float64)


def preprocess(image) -> np.ndarray:
    """RGB image (uint8, or float in [0, 1]) -> standardized (3, 224, 224) float32.

    Shorter side is resized to 256 (bilinear) and the centre 224 x 224 is
    kept; an image that is already 224 x 224 passes through unchanged.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image of shape (h, w, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    rh, rw, top, left = input_geometry(h, w)
    if (rh, rw) != (h, w):
        if arr.dtype == np.uint8:
            arr = np.asarray(Image.fromarray(arr, mode="RGB").resize((rw, rh), Image.BILINEAR))
        else:
            arr = _resize_channels(np.asarray(arr, dtype=np.float64), (rh, rw))
    arr = arr[top : top + INPUT_SIZE, left : left + INPUT_SIZE]
    x = (_as_float_rgb(arr) - MEAN) / STD
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def map_to_image(map224: np.ndarray, h: int, w: int) -> np.ndarray:
    """Place a map defined on the 224 crop back onto the original h x w image.
    Pixels outside the crop get 0."""
    rh, rw, top, left = input_geometry(h, w)
    if (h, w) == (INPUT_SIZE, INPUT_SIZE):
        return np.asarray(map224, dtype=np.float32)
    canvas = np.zeros((rh, rw), dtype=np.float32)
    canvas[top : top + INPUT_SIZE, left : left + INPUT_SIZE] = map224
    if (rh, rw) == (h, w):
        return canvas
    return np.asarray(Image.fromarray(canvas, mode="F").resize((w, h), Image.BILINEAR))


class FeatureExtractor:
    """Maps preprocessed images (3, 224, 224) to feature maps (K, H', W')."""

    output_shape: tuple[int, int, int]

    def fingerprint(self) -> str:
        raise NotImplementedError

    def _extract_batch(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def extract(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 3
        batch = x[None] if single else x
        if batch.ndim != 4 or batch.shape[1:] != (3, INPUT_SIZE, INPUT_SIZE):
            raise BackendError(f"expected preprocessed input (3, 224, 224), got {x.shape}")
        out = self._extract_batch(batch)
        if out.shape[1:] != tuple(self.output_shape):
            raise BackendError(
                f"backend produced {out.shape[1:]}, declared {tuple(self.output_shape)}"
            )
        out = np.ascontiguousarray(out, dtype=np.float32)
        return out[0] if single else out

    def spec(self) -> dict:
        raise NotImplementedError


def extract_features(fe: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    return fe.extract(x)


def _patch_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, k: int) -> np.ndarray:
    # Non-overlapping k x k convolution (stride k) followed by ReLU.
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    patches = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(n, ho, wo, c * k * k)
    y = patches @ weight + bias
    return np.maximum(y, 0.0).transpose(0, 3, 1, 2)


class RandomConvExtractor(FeatureExtractor):
    """Seeded random two-stage convolutional stack, frozen at construction.

    Stage 1: 8x8 stride-8 conv, 3 -> c1 channels, ReLU (224 -> 28).
    Stage 2: 2x2 stride-2 conv, c1 -> c2 channels, ReLU (28 -> 14).
    """

    def __init__(self, seed: int = 0, channels=(16, 32)):
        self.seed = int(seed)
        self.channels = tuple(int(c) for c in channels)
        c1, c2 = self.channels
        rng = np.random.default_rng(self.seed)
        fan1, fan2 = 3 * 64, c1 * 4
        self._w1 = rng.normal(0.0, np.sqrt(2.0 / fan1), (fan1, c1))
        self._b1 = rng.normal(0.0, 0.1, c1)
        self._w2 = rng.normal(0.0, np.sqrt(2.0 / fan2), (fan2, c2))
        self._b2 = rng.normal(0.0, 0.1, c2)
        self.output_shape = (c2, 14, 14)

    def _extract_batch(self, x):
        h = _patch_conv(x.astype(np.float64), self._w1, self._b1, 8)
        return _patch_conv(h, self._w2, self._b2, 2)

    def fingerprint(self):
        return f"random-conv:{self.seed}:{self.channels}"

    def spec(self):
        return {"kind": "random-conv", "seed": self.seed, "channels": list(self.channels)}


class PooledPixelExtractor(FeatureExtractor):
    """Standardized pixels average-pooled over cell x cell blocks."""

    def __init__(self, cell: int = 16):
        if INPUT_SIZE % cell:
            raise ValueError("cell must divide 224")
        self.cell = int(cell)
        g = INPUT_SIZE // self.cell
        self.output_shape = (3, g, g)

    def _extract_batch(self, x):
        n = x.shape[0]
        g, k = self.output_shape[1], self.cell
        return x.astype(np.float64).reshape(n, 3, g, k, g, k).mean(axis=(3, 5))

    def fingerprint(self):
        return f"pooled-pixels:{self.cell}"

    def spec(self):
        return {"kind": "pooled-pixels", "cell": self.cell}


class OnnxExtractor(FeatureExtractor):
    """Runs an interchange-format model whose output is the last conv activation."""

    def __init__(self, path: str | Path, output_shape=None, output_name: str | None = None):
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise BackendError("onnxruntime is not installed (pip install partlens[onnx])") from exc
        self.path = Path(path)
        if not self.path.exists():
            raise BackendError(f"model file not found: {self.path}")
        opts = ort.SessionOptions()
        opts.intra_op_num_threads = 1
        opts.inter_op_num_threads = 1
        self._session = ort.InferenceSession(
            str(self.path), sess_options=opts, providers=["CPUExecutionProvider"]
        )
        self._input = self._session.get_inputs()[0].name
        outputs = self._session.get_outputs()
        self._output = output_name or outputs[0].name
        if output_shape is None:
            probe = self._session.run([self._output], {self._input: np.zeros((1, 3, 224, 224), np.float32)})[0]
            output_shape = probe.shape[1:]
        self.output_shape = tuple(int(d) for d in output_shape)
        self._digest = hashlib.sha1(self.path.read_bytes()).hexdigest()[:16]

    def _extract_batch(self, x):
        return self._session.run([self._output], {self._input: np.asarray(x, np.float32)})[0]

    def fingerprint(self):
        return f"onnx:{self._digest}"

    def spec(self):
        return {"kind": "onnx", "path": str(self.path), "output_shape": list(self.output_shape)}


class FeatureStore:
    """Directory of HTF1 feature maps keyed by origin id, with a JSON index."""

    INDEX = "index.json"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._index: dict[str, str] = {}
        index_path = self.directory / self.INDEX
        if index_path.exists():
            self._index = json.loads(index_path.read_text(encoding="utf-8"))["entries"]

    def __contains__(self, origin_id: str) -> bool:
        return origin_id in self._index

    def __len__(self):
        return len(self._index)

    def keys(self):
        return list(self._index)

    def put(self, origin_id: str, features: np.ndarray):
        self.directory.mkdir(parents=True, exist_ok=True)
        fname = hashlib.sha1(origin_id.encode("utf-8")).hexdigest() + ".htf"
        tensorio.save(self.directory / fname, features)
        self._index[origin_id] = fname

    def get(self, origin_id: str) -> np.ndarray:
        try:
            fname = self._index[origin_id]
        except KeyError:
            raise BackendError(f"no stored features for {origin_id!r}") from None
        return tensorio.load(self.directory / fname)

    def flush(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        payload = {"format": "partlens-features/1", "entries": dict(sorted(self._index.items()))}
        (self.directory / self.INDEX).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


class StoreExtractor(FeatureExtractor):
    """Precomputed-feature backend: features are looked up by origin id only."""

    def __init__(self, directory: str | Path):
        self.store = FeatureStore(directory)
        if not len(self.store):
            raise BackendError(f"feature store {directory} is empty or missing")
        self.output_shape = tuple(self.store.get(self.store.keys()[0]).shape)

    def lookup(self, origin_id: str) -> np.ndarray:
        out = self.store.get(origin_id)
        if out.shape != self.output_shape:
            raise BackendError(f"stored features for {origin_id!r} have shape {out.shape}")
        return out

    def _extract_batch(self, x):
        raise BackendError("a feature store cannot run on pixels; query it by origin id")

    def fingerprint(self):
        return f"store:{self.store.directory}"

    def spec(self):
        return {"kind": "store", "path": str(self.store.directory)}


class CachedExtractor(FeatureExtractor):
    """Memoizes another extractor on disk, keyed by input content."""

    def __init__(self, inner: FeatureExtractor, directory: str | Path):
        self.inner = inner
        self.output_shape = inner.output_shape
        self.directory = Path(directory) / hashlib.sha1(inner.fingerprint().encode()).hexdigest()[:16]

    def _extract_batch(self, x):
        out = []
        for item in x:
            key = hashlib.sha1(np.ascontiguousarray(item, np.float32).tobytes()).hexdigest()
            path = self.directory / f"{key}.htf"
            if path.exists():
                out.append(tensorio.load(path))
            else:
                f = self.inner.extract(item)
                self.directory.mkdir(parents=True, exist_ok=True)
                tensorio.save(path, f)
                out.append(f)
        return np.stack(out)

    def fingerprint(self):
        return self.inner.fingerprint()

    def spec(self):
        return self.inner.spec()


def make_extractor(spec: dict, base_dir: str | Path = ".", cache_dir: str | Path | None = None) -> FeatureExtractor:
    """Build a backend from its config dict. ``cache_dir`` (or the
    ``PARTLENS_CACHE`` environment variable) enables on-disk memoization."""
    kind = spec.get("kind")
    base = Path(base_dir)
    if kind == "random-conv":
        fe = RandomConvExtractor(spec.get("seed", 0), spec.get("channels", (16, 32)))
    elif kind == "pooled-pixels":
        fe = PooledPixelExtractor(spec.get("cell", 16))
    elif kind == "onnx":
        fe = OnnxExtractor(base / spec["path"], spec.get("output_shape"), spec.get("output_name"))
    elif kind == "store":
        return StoreExtractor(base / spec["path"])
    else:
        raise BackendError(f"unknown backend kind {kind!r}")
    cache_dir = cache_dir or os.environ.get("PARTLENS_CACHE")
    if cache_dir:
        fe = CachedExtractor(fe, cache_dir)
    return fe
