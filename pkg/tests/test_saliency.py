import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partlens.datakit.crop import FILL
from partlens.netcore.backend import FeatureExtractor, RandomConvExtractor
from partlens.netcore.head import Flatten, Head, Linear, ReLU, ShapeError, build_head, vgg_template
from partlens.saliency import (
    SaliencyConfig,
    ablate,
    binarize,
    coverage,
    gradcam,
    gradcam_raw,
    load_heatmap,
    load_mask,
    overlay,
    percent_drop,
    percentile_threshold,
    save_heatmap,
    save_mask,
    score_drop,
    upsample_bilinear,
)


class FixedFeatures(FeatureExtractor):
    """Returns the same feature map for every input."""

    def __init__(self, feats):
        self.feats = np.asarray(feats, dtype=np.float32)
        self.output_shape = self.feats.shape

    def _extract_batch(self, x):
        return np.repeat(self.feats[None], len(x), axis=0)

    def fingerprint(self):
        return "fixed"

    def spec(self):
        return {"kind": "fixed"}


class MeanColor(FeatureExtractor):
    """Per-channel mean of the preprocessed input, shape (3, 1, 1)."""

    output_shape = (3, 1, 1)

    def _extract_batch(self, x):
        return x.mean(axis=(2, 3))[:, :, None, None]

    def fingerprint(self):
        return "mean"

    def spec(self):
        return {"kind": "mean"}


def linear_head(weight, shape, names=None):
    weight = np.asarray(weight, dtype=np.float64)
    names = names or [f"c{i}" for i in range(weight.shape[0])]
    return Head([Flatten(), Linear(weight, np.zeros(weight.shape[0]))], names, shape)


IMG = np.zeros((224, 224, 3), np.uint8)


# ---------------------------------------------------------------- gradcam


def test_gradcam_hand_2x2():
    feats = np.array([[[1.0, 0.0], [2.0, 4.0]]])
    head = linear_head([[1, 2, 3, 4], [0, 0, 0, 0]], (1, 2, 2))
    # alpha = mean(1, 2, 3, 4) = 2.5, so the raw map is 2.5 * A.
    np.testing.assert_allclose(gradcam_raw(head, feats, 0), [[2.5, 0.0], [5.0, 10.0]])
    hm = gradcam(FixedFeatures(feats), head, IMG, 0)
    assert hm.shape == (224, 224) and hm.dtype == np.float32
    # Half-pixel bilinear: rows/cols 0..55 copy the first source row/col.
    assert hm[0, 0] == pytest.approx(0.25) and hm[55, 55] == pytest.approx(0.25)
    assert hm[0, 223] == 0.0 and hm[223, 223] == 1.0 and hm[223, 0] == pytest.approx(0.5)
    ref = torch.nn.functional.interpolate(
        torch.tensor([[[[2.5, 0.0], [5.0, 10.0]]]], dtype=torch.float64), size=(224, 224), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    np.testing.assert_allclose(hm, ref / 10.0, atol=1e-6)


def test_gradcam_zero_weights_zero_map():
    feats = np.random.default_rng(0).random((3, 4, 4))
    head = linear_head(np.vstack([np.zeros(48), np.ones(48)]), (3, 4, 4))
    assert not gradcam(FixedFeatures(feats), head, IMG, 0).any()


def test_gradcam_single_channel_closed_form():
    feats = np.random.default_rng(1).random((1, 7, 7))
    head = linear_head(np.full((2, 49), 0.3), (1, 7, 7))
    hm = gradcam(FixedFeatures(feats), head, IMG, 1)
    up = upsample_bilinear(feats[0], 224, 224)
    np.testing.assert_allclose(hm, (up - up.min()) / (up.max() - up.min()), atol=1e-6)


def test_gradcam_negative_alpha_relu():
    feats = np.random.default_rng(2).random((1, 3, 3)) + 0.1
    head = linear_head(np.full((1, 9), -1.0), (1, 3, 3))
    # All contributions negative: relu clears everything.
    assert not gradcam(FixedFeatures(feats), head, IMG, 0).any()


def test_gradcam_other_resolution():
    feats = np.random.default_rng(3).random((2, 5, 5))
    head = linear_head(np.random.default_rng(4).normal(size=(3, 50)), (2, 5, 5))
    hm = gradcam(FixedFeatures(feats), head, np.zeros((300, 400, 3), np.uint8), 2)
    assert hm.shape == (300, 400)
    assert hm.min() >= 0 and hm.max() <= 1


def test_gradcam_shape_mismatch():
    head = linear_head(np.ones((2, 8)), (2, 2, 2))
    with pytest.raises(ShapeError):
        gradcam(FixedFeatures(np.ones((1, 2, 2))), head, IMG, 0)
    with pytest.raises(IndexError):
        gradcam(FixedFeatures(np.ones((2, 2, 2))), head, IMG, 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_gradcam_seed_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    head = build_head(vgg_template(hidden=8), (3, 4, 4), ["a", "b", "c"], seed=seed)
    feats = rng.random((3, 4, 4))
    fe = FixedFeatures(feats)
    base = gradcam(fe, head, IMG, 1)
    scaled = gradcam(fe, head, IMG, 1, seed_scale=scale)
    np.testing.assert_allclose(base, scaled, atol=1e-5)
    assert base.min() >= 0 and base.max() <= 1
    if base.any():
        assert base.max() == pytest.approx(1.0) and base.min() == 0.0
        assert np.argmax(base) == np.argmax(scaled)


def test_gradcam_through_real_backend(fixture_photo):
    fe = RandomConvExtractor(seed=0)
    head = build_head(vgg_template(hidden=16), fe.output_shape, ["x", "y"], seed=0)
    hm = gradcam(fe, head, fixture_photo, 0)
    assert hm.shape == fixture_photo.shape[:2]
    assert 0.0 <= hm.min() and hm.max() <= 1.0


# ---------------------------------------------------------------- binarize


def test_binarize_nearest_rank_example():
    hm = np.arange(1, 11, dtype=np.float64).reshape(2, 5) / 10.0
    assert percentile_threshold(hm, 80) == pytest.approx(0.8)
    assert binarize(hm, 80).sum() == 3


def test_binarize_constant_all_set():
    assert binarize(np.full((5, 5), 0.3), 83).all()
    assert binarize(np.zeros((5, 5)), 50).all()


def test_binarize_random_224_coverage():
    hm = np.random.default_rng(0).permutation(224 * 224).reshape(224, 224) / (224 * 224)
    m = binarize(hm, 83)
    # Sort-based oracle: keep everything from the ceil(0.83 n)-th smallest up.
    n = hm.size
    k = int(np.ceil(0.83 * n))
    assert m.sum() == n - k + 1
    assert abs(coverage(m) - 0.17) <= 1 / n + 1e-3


def test_binarize_q_extremes():
    hm = np.random.default_rng(1).random((6, 6))
    assert binarize(hm, 0).all()
    assert binarize(hm, 100).sum() == 1


def test_binarize_rejects_q():
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2)), 101)
    with pytest.raises(ValueError):
        SaliencyConfig(percentile=-1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), q1=st.integers(0, 100), q2=st.integers(0, 100))
def test_binarize_coverage_monotone(seed, q1, q2):
    hm = np.random.default_rng(seed).permutation(150).reshape(10, 15).astype(float)
    lo, hi = sorted((q1, q2))
    assert coverage(binarize(hm, lo)) >= coverage(binarize(hm, hi))


# ---------------------------------------------------------------- ablate / drop


def test_ablate_cases():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert np.array_equal(ablate(img, np.zeros((8, 8), bool)), img)
    full = ablate(img, np.ones((8, 8), bool))
    assert (full == FILL).all()
    checker = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(bool)
    out = ablate(img, checker)
    assert (out != img).any(axis=2).sum() <= 32
    assert (out[checker] == FILL).all() and np.array_equal(out[~checker], img[~checker])
    with pytest.raises(ShapeError):
        ablate(img, np.zeros((4, 4), bool))


def test_ablate_checkerboard_half():
    img = np.zeros((10, 10, 3), np.uint8)
    checker = (np.add.outer(np.arange(10), np.arange(10)) % 2).astype(bool)
    assert (ablate(img, checker) != img).any(axis=2).mean() == 0.5


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6))
def test_ablate_idempotent(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    mask = rng.random((6, 7)) < 0.4
    once = ablate(img, mask)
    assert np.array_equal(ablate(once, mask), once)


def test_percent_drop_arithmetic():
    assert percent_drop(0.8, 0.4) == pytest.approx(50.0)
    assert percent_drop(0.4, 0.6) == pytest.approx(-50.0)
    with pytest.raises(ValueError):
        percent_drop(0.0, 0.1)


def mean_color_head():
    # Class 0 prefers bright images.
    w = np.array([[4.0, 4.0, 4.0], [-4.0, -4.0, -4.0]])
    return Head([Flatten(), Linear(w, np.zeros(2))], ["bright", "dark"], (3, 1, 1))


def test_score_drop_empty_mask_zero():
    img = np.full((224, 224, 3), 230, np.uint8)
    assert score_drop(MeanColor(), mean_color_head(), img, np.zeros((224, 224), bool), 0) == 0.0


def test_score_drop_matches_probabilities():
    from partlens.saliency import class_probability

    fe, head = MeanColor(), mean_color_head()
    img = np.full((224, 224, 3), 230, np.uint8)
    mask = np.zeros((224, 224), bool)
    mask[:112] = True
    p0 = class_probability(fe, head, img, 0)
    p1 = class_probability(fe, head, ablate(img, mask), 0)
    assert p1 < p0
    assert score_drop(fe, head, img, mask, 0) == pytest.approx(100 * (p0 - p1) / p0)
    # Graying out a dark image makes it brighter: the "dark" class loses.
    dark = np.zeros((224, 224, 3), np.uint8)
    assert score_drop(fe, head, dark, mask, 0) < 0


def test_score_drop_zero_probability():
    w = np.array([[-1e6, -1e6, -1e6], [1e6, 1e6, 1e6]])
    head = Head([Flatten(), Linear(w, np.zeros(2))], ["a", "b"], (3, 1, 1))
    img = np.full((224, 224, 3), 255, np.uint8)
    with pytest.raises(ValueError):
        score_drop(MeanColor(), head, img, np.zeros((224, 224), bool), 0)


# ---------------------------------------------------------------- export


def test_heatmap_and_mask_files(tmp_path):
    hm = np.random.default_rng(0).random((20, 30)).astype(np.float32)
    png, htf = save_heatmap(tmp_path / "part", hm)
    assert png.exists() and htf.exists()
    assert np.array_equal(load_heatmap(htf), hm)
    mask = binarize(hm, 83)
    path = save_mask(tmp_path / "mask", mask)
    assert np.array_equal(load_mask(path), mask)


def test_overlay_blend():
    img = np.zeros((4, 4, 3), np.uint8)
    hm = np.zeros((4, 4))
    hm[0, 0] = 1.0
    out = overlay(img, hm, alpha=0.5)
    assert tuple(out[0, 0]) == (128, 0, 0) and not out[1:].any()
