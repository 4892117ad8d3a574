import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tailforge.exceptions import ConfigError
from tailforge.imageops import (
    AugmentConfig,
    TtaConfig,
    augment,
    augment_batch,
    crop,
    fixres_tta_predict,
    hflip,
    resize_bilinear,
    ten_crop,
    tta_predict_proba,
    vflip,
)
from tailforge.nnkernel import predict_proba

from conftest import make_params


class TestResize:
    def test_two_by_two_to_one(self):
        out = resize_bilinear(np.array([[0.0, 2.0], [4.0, 6.0]]), 1, 1)
        assert out.shape == (1, 1) and out[0, 0] == 3.0

    def test_identity_bit_exact(self):
        img = np.random.default_rng(0).random((7, 5))
        assert resize_bilinear(img, 7, 5).tobytes() == img.tobytes()

    def test_constant(self):
        out = resize_bilinear(np.full((6, 6), 0.37), 11, 4)
        np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-15)

    def test_half_pixel_upsample(self):
        # 1-D: 2 -> 4 samples at source coords -0.25, 0.25, 0.75, 1.25 (clamped)
        out = resize_bilinear(np.array([[0.0, 1.0]]), 1, 4)
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])

    def test_batched(self):
        imgs = np.random.default_rng(1).random((3, 8, 8))
        out = resize_bilinear(imgs, 5, 5)
        for i in range(3):
            np.testing.assert_array_equal(out[i], resize_bilinear(imgs[i], 5, 5))

    def test_bad_size(self):
        with pytest.raises(ConfigError):
            resize_bilinear(np.zeros((4, 4)), 0, 3)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(-5, 5)),
           st.integers(1, 12), st.integers(1, 12))
    def test_range_preserved(self, img, oh, ow):
        out = resize_bilinear(img, oh, ow)
        assert out.min() >= img.min() - 1e-6
        assert out.max() <= img.max() + 1e-6


class TestCropFlip:
    img = np.arange(16.0).reshape(4, 4)

    def test_full_crop_identity(self):
        np.testing.assert_array_equal(crop(self.img, 0, 0, 4), self.img)

    def test_bottom_right(self):
        np.testing.assert_array_equal(crop(self.img, 2, 2, 2), [[10, 11], [14, 15]])

    def test_out_of_bounds(self):
        with pytest.raises(ConfigError):
            crop(self.img, 3, 0, 2)
        with pytest.raises(ConfigError):
            crop(self.img, -1, 0, 2)

    def test_vflip_example(self):
        np.testing.assert_array_equal(vflip(np.array([[1, 2], [3, 4]])), [[3, 4], [1, 2]])

    def test_involutions(self):
        img = np.random.default_rng(0).random((5, 6))
        np.testing.assert_array_equal(hflip(hflip(img)), img)
        np.testing.assert_array_equal(vflip(vflip(img)), img)

    def test_symmetric_fixed_point(self):
        img = np.array([[1.0, 2.0, 1.0], [3.0, 0.0, 3.0]])
        np.testing.assert_array_equal(hflip(img), img)


class TestTenCrop:
    def test_count_and_shape(self):
        crops = ten_crop(np.random.default_rng(0).random((9, 9)), 5)
        assert len(crops) == 10 and all(c.shape == (5, 5) for c in crops)

    def test_origins(self):
        img = np.arange(16.0).reshape(4, 4)
        crops = ten_crop(img, 2)
        origins = [(0, 0), (0, 2), (2, 0), (2, 2), (1, 1)]
        for c, (t, l) in zip(crops[:5], origins):
            np.testing.assert_array_equal(c, img[t:t + 2, l:l + 2])
        for a, b in zip(crops[:5], crops[5:]):
            np.testing.assert_array_equal(b, a[:, ::-1])

    def test_uniform_image(self):
        crops = ten_crop(np.full((6, 6), 0.5), 3)
        assert all(np.array_equal(c, crops[0]) for c in crops)

    def test_symmetric_image_pairs(self):
        half = np.random.default_rng(2).random((6, 3))
        img = np.concatenate([half, half[:, ::-1]], axis=1)
        crops = ten_crop(img, 4)
        keys = [c.tobytes() for c in crops]
        assert len(set(keys)) == 5
        assert all(keys.count(k) == 2 for k in keys)

    def test_too_large(self):
        with pytest.raises(ConfigError):
            ten_crop(np.zeros((4, 4)), 5)


class TestAugment:
    def test_all_off_identity(self):
        imgs = np.random.default_rng(0).random((4, 10, 10)).astype(np.float32)
        out = augment_batch(imgs, AugmentConfig.off(), np.random.default_rng(1))
        np.testing.assert_array_equal(out, imgs)

    def test_range(self):
        imgs = np.random.default_rng(0).random((8, 10, 10)).astype(np.float32)
        cfg = AugmentConfig(brightness_delta=0.8, contrast_range=(0.2, 3.0), zoom_range=(0.7, 1.0))
        out = augment_batch(imgs, cfg, np.random.default_rng(1))
        assert out.shape == imgs.shape
        assert out.min() >= 0 and out.max() <= 1

    def test_deterministic(self):
        img = np.random.default_rng(0).random((10, 10))
        a = augment(img, AugmentConfig(), np.random.default_rng(3))
        b = augment(img, AugmentConfig(), np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_input_not_modified(self):
        imgs = np.random.default_rng(0).random((2, 8, 8))
        copy = imgs.copy()
        augment_batch(imgs, AugmentConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(imgs, copy)

    def test_flip_only(self):
        img = np.random.default_rng(0).random((1, 6, 6))
        cfg = AugmentConfig(0, 1.0, 0.0, 0.0, (1.0, 1.0), 0, 0)
        np.testing.assert_array_equal(augment_batch(img, cfg, np.random.default_rng(0)),
                                      img[..., ::-1])

    @pytest.mark.parametrize("kwargs", [{"hflip_prob": 1.5}, {"zoom_range": (0.0, 1.0)},
                                        {"contrast_range": (1.2, 0.8)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentConfig(**kwargs).validate()


class TestFixresTta:
    def test_collapse_identity(self):
        p = make_params()
        imgs = np.random.default_rng(0).random((5, 12, 12))
        cfg = TtaConfig(train_res=12, enlarge_factor=1.0, crops="center_only")
        np.testing.assert_allclose(tta_predict_proba(p, imgs, cfg), predict_proba(p, imgs),
                                   rtol=0, atol=1e-12)

    @pytest.mark.parametrize("crops", ["center_only", "ten_crop"])
    @pytest.mark.parametrize("space", ["probability", "logit"])
    def test_probability_vector(self, crops, space):
        p = make_params()
        img = np.random.default_rng(1).random((12, 12))
        out = fixres_tta_predict(p, img, TtaConfig(12, 1.25, crops, space))
        assert np.all(out >= 0)
        assert out.sum() == pytest.approx(1.0, abs=1e-9)

    def test_resizes_other_resolutions(self):
        p = make_params()
        imgs = np.random.default_rng(2).random((2, 20, 20))
        assert tta_predict_proba(p, imgs, TtaConfig(train_res=12)).shape == (2, 4)

    def test_enlarged_res(self):
        assert TtaConfig(train_res=24).enlarged_res == 30
        assert TtaConfig(train_res=24, enlarge_factor=1.5).enlarged_res == 36

    @pytest.mark.parametrize("kwargs", [{"enlarge_factor": 0.9}, {"crops": "five"},
                                        {"average_space": "rank"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TtaConfig(**kwargs).validate()
