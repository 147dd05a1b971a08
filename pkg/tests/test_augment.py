import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphobench.augment import (
    HALF_CROP_SIDE,
    MULTI_CROP,
    ONE_CROP,
    QUARTER_CROP_SIDE,
    AugmentationPolicy,
    CropStrategy,
    apply_augmentations,
    byol_view_pair,
    gaussian_blur,
    make_views,
    resize_bilinear,
    sample_resized_crop_box,
)
from morphobench.errors import ConfigError


def _img(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (64, 64)).astype(np.float32)


class TestPolicy:
    @pytest.mark.parametrize("kwargs", [
        {"resized_crop_scale": (0.0, 1.0)},
        {"resized_crop_scale": (0.8, 0.5)},
        {"hflip_probability": 1.5},
        {"blur_probability": -0.1},
        {"blur_sigma": (0.0, 1.0)},
        {"blur_kernel_px": 4},
    ])
    def test_degenerate_policies_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentationPolicy(**kwargs)

    def test_unknown_crop_strategy(self):
        with pytest.raises(ConfigError):
            CropStrategy("three_crop")


class TestApplyAugmentations:
    def test_identity_policy(self):
        img = _img()
        out = apply_augmentations(img, AugmentationPolicy.identity(), np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_forced_flip(self):
        img = _img()
        pol = AugmentationPolicy(resized_crop_scale=(1.0, 1.0), hflip_probability=1.0, blur_probability=0.0)
        out = apply_augmentations(img, pol, np.random.default_rng(0))
        assert np.array_equal(out, img[:, ::-1])

    def test_deterministic(self):
        img = _img()
        a = apply_augmentations(img, AugmentationPolicy(), np.random.default_rng(9))
        b = apply_augmentations(img, AugmentationPolicy(), np.random.default_rng(9))
        assert np.array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_output_is_crop(self, seed):
        out = apply_augmentations(_img(seed % 7), AugmentationPolicy(), np.random.default_rng(seed))
        assert out.shape == (64, 64) and out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), lo=st.floats(0.05, 1.0))
    def test_crop_box_respects_scale_and_aspect(self, seed, lo):
        top, left, h, w = sample_resized_crop_box(np.random.default_rng(seed), (lo, 1.0))
        assert 0 <= top and top + h <= 64 and 0 <= left and left + w <= 64
        if (h, w) != (64, 64):
            # integer rounding of each side moves area and aspect by at most one pixel per side
            assert (h - 1) * (w - 1) <= 64 * 64 and (h + 1) * (w + 1) >= lo * 64 * 64
            assert (w - 0.5) / (h + 0.5) <= 4 / 3 + 1e-9 and (w + 0.5) / (h - 0.5) >= 3 / 4 - 1e-9


class TestPrimitives:
    def test_resize_constant_field(self):
        img = np.full((17, 23), 0.37)
        assert np.all(resize_bilinear(img) == 0.37)

    def test_resize_matches_half_pixel_oracle(self):
        # 2x upsampling of [0, 1]: output centres at 0.25/0.75 steps, edges clamped
        out = resize_bilinear(np.array([[0.0, 1.0]]), 1, 4)
        assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_blur_preserves_interior_mean(self):
        yy, xx = np.mgrid[0:64, 0:64] / 63.0
        img = 0.5 + 0.2 * np.cos(2 * np.pi * xx) * np.sin(np.pi * yy) + 0.1 * xx
        out = gaussian_blur(img, 1.5)
        inner = (slice(8, 56), slice(8, 56))
        assert abs(out[inner].mean() - img[inner].mean()) < 1e-3

    def test_blur_kernel_normalized(self):
        assert np.allclose(gaussian_blur(np.full((64, 64), 0.6), 2.0), 0.6)


class TestViews:
    def test_one_crop_no_policy(self):
        img = _img()
        vs = make_views(img, CropStrategy(ONE_CROP), None, np.random.default_rng(0))
        assert len(vs.views) == 1 and np.array_equal(vs.views[0], img)

    def test_multi_crop_constant_image(self):
        img = np.full((64, 64), 0.42, dtype=np.float32)
        vs = make_views(img, CropStrategy(MULTI_CROP), None, np.random.default_rng(0))
        assert len(vs.views) == 5
        for v in vs.views:
            assert v.shape == (64, 64) and np.all(v == np.float32(0.42))

    def test_multi_crop_source_sides(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            vs = make_views(_img(), CropStrategy(MULTI_CROP), AugmentationPolicy(), rng)
            boxes = vs.boxes[1:]
            for box, side_range in zip(boxes, (HALF_CROP_SIDE,) * 2 + (QUARTER_CROP_SIDE,) * 2):
                top, left, h, w = box
                assert h == w and side_range[0] <= h <= side_range[1]
                assert top + h <= 64 and left + w <= 64
                frac = h * w / 64 ** 2
                assert (0.14 <= frac <= 0.40) if side_range == HALF_CROP_SIDE else (0.035 <= frac <= 0.10)

    def test_byol_pair_identity(self):
        img = _img()
        ident = AugmentationPolicy.identity()
        for double in (False, True):
            a, b = byol_view_pair(img, ident, double, np.random.default_rng(0))
            assert np.array_equal(a, img) and np.array_equal(b, img)

    def test_byol_pair_reproducible(self):
        img = _img()
        p1 = byol_view_pair(img, AugmentationPolicy(), True, np.random.default_rng(4))
        p2 = byol_view_pair(img, AugmentationPolicy(), True, np.random.default_rng(4))
        assert all(np.array_equal(a, b) for a, b in zip(p1, p2))

    def test_byol_views_differ(self):
        a, b = byol_view_pair(_img(), AugmentationPolicy(), False, np.random.default_rng(4))
        assert not np.array_equal(a, b)
