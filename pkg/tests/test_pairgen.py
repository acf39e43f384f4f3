"""Tests for support/query pair generation and augmentation steps."""

import numpy as np
import pytest

from cpie import pairgen as P
from cpie.fixtures import make_distractors, make_fixture


@pytest.fixture(scope="module")
def raw():
    img, mask, _ = make_fixture(64, 64, "line", seed=0)
    return P.RawSample(img, mask)


@pytest.fixture(scope="module")
def distractors():
    return make_distractors(64, 64, seed=99, n=3)


class TestMixup:
    def test_gamma_zero_is_identity(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        assert np.allclose(P.mixup(a, b, 0.0), a)

    def test_gamma_one_is_other(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        assert np.allclose(P.mixup(a, b, 1.0), b)

    def test_blend_is_convex(self):
        a = np.zeros((4, 4, 3), np.float32)
        b = np.ones((4, 4, 3), np.float32)
        assert np.allclose(P.mixup(a, b, 0.25), 0.25)

    def test_shape_mismatch(self):
        with pytest.raises(P.PairGenError):
            P.mixup(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), 0.1)


class TestCutoutPatch:
    def test_patch_never_touches_contour(self):
        rng = np.random.default_rng(2)
        base = np.zeros((64, 64, 3), np.float32)
        contour = np.zeros((64, 64), np.uint8)
        contour[30:34, :] = 1
        other = np.ones((64, 64, 3), np.float32)
        for _ in range(20):
            out, skipped = P.cutout_patch(base, contour, other, rng)
            if not skipped:
                assert out[contour > 0].sum() == 0

    def test_skip_when_no_room(self):
        rng = np.random.default_rng(3)
        base = np.zeros((32, 32, 3), np.float32)
        contour = np.ones((32, 32), np.uint8)  # everything is foreground
        other = np.ones((32, 32, 3), np.float32)
        out, skipped = P.cutout_patch(base, contour, other, rng)
        assert skipped
        assert np.array_equal(out, base)  # input untouched on skip


class TestPadSurround:
    def test_padded_dims_and_center_placement(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (50, 40, 3)).astype(np.float32)
        mask = np.zeros((50, 40), np.uint8)
        mask[25, 20] = 1
        backdrop = rng.uniform(0, 1, (50, 40, 3)).astype(np.float32)
        padded, pmask = P.pad_surround(img, mask, backdrop, 1.4)
        assert padded.shape == (70, 56, 3)
        assert pmask.shape == (70, 56)
        y0, x0 = (70 - 50) // 2, (56 - 40) // 2
        assert np.allclose(padded[y0:y0 + 50, x0:x0 + 40], img)
        assert pmask.sum() == 1 and pmask[y0 + 25, x0 + 20] == 1


class TestAugmentAndCrop:
    def test_identity_affine_is_noop(self, raw):
        cfg = P.AugmentConfig.identity()
        rng = np.random.default_rng(5)
        img, mask = P.augment(raw.image, raw.contour, cfg, rng)
        assert np.allclose(img, raw.image, atol=1e-6)
        assert np.array_equal(mask, raw.contour)

    def test_mask_stays_binary(self, raw):
        cfg = P.AugmentConfig()
        rng = np.random.default_rng(6)
        for _ in range(10):
            _, mask = P.augment(raw.image, raw.contour, cfg, rng)
            assert set(np.unique(mask)) <= {0, 1}
            assert mask.sum() > 0

    def test_crop_back_keeps_foreground(self):
        rng = np.random.default_rng(7)
        img = np.zeros((90, 90, 3), np.float32)
        mask = np.zeros((90, 90), np.uint8)
        mask[40:45, 38:52] = 1
        total = mask.sum()
        for _ in range(10):
            _, m = P.crop_back(img, mask, 64, 64, rng)
            assert m.shape == (64, 64)
            assert m.sum() == total

    def test_crop_back_oversized_box_raises(self):
        rng = np.random.default_rng(8)
        mask = np.zeros((90, 90), np.uint8)
        mask[0, 0] = mask[89, 89] = 1
        with pytest.raises(P.PairGenError):
            P.crop_back(np.zeros((90, 90, 3)), mask, 64, 64, rng)


class TestDilateMask:
    def test_width_three(self):
        m = np.zeros((9, 9), np.uint8)
        m[4, 2:7] = 1
        d = P.dilate_mask(m, 3)
        assert d[3:6, 2:7].all()
        assert d.sum() == 3 * 7  # 3 rows, columns grown by one each side

    def test_width_one_is_identity(self):
        m = np.zeros((5, 5), np.uint8)
        m[2, 2] = 1
        assert np.array_equal(P.dilate_mask(m, 1), m)


class TestGeneratePair:
    def test_contract(self, raw, distractors):
        pair = P.generate_pair(raw, distractors, seed=0, train=True)
        for img, mask in (pair.support, pair.query):
            assert img.shape == raw.image.shape
            assert mask.shape == raw.contour.shape
            assert img.dtype == np.float32
            assert mask.sum() > 0
            assert 0.0 <= img.min() and img.max() <= 1.0

    def test_seeded_determinism(self, raw, distractors):
        a = P.generate_pair(raw, distractors, seed=123)
        b = P.generate_pair(raw, distractors, seed=123)
        assert np.array_equal(a.support[0], b.support[0])
        assert np.array_equal(a.support[1], b.support[1])
        assert np.array_equal(a.query[0], b.query[0])
        assert np.array_equal(a.query[1], b.query[1])

    def test_seeds_differ(self, raw, distractors):
        a = P.generate_pair(raw, distractors, seed=1)
        b = P.generate_pair(raw, distractors, seed=2)
        assert not np.array_equal(a.query[0], b.query[0])

    def test_support_and_query_independent(self, raw, distractors):
        pair = P.generate_pair(raw, distractors, seed=3)
        assert not np.array_equal(pair.support[0], pair.query[0])

    def test_train_mode_dilates_masks(self, raw, distractors):
        tr = P.generate_pair(raw, distractors, seed=4, train=True)
        te = P.generate_pair(raw, distractors, seed=4, train=False)
        assert tr.support[1].sum() > te.support[1].sum()
        # the thin mask is contained in the dilated one
        assert np.all(tr.query[1] >= te.query[1])

    def test_identity_config_reproduces_raw(self, raw, distractors):
        pair = P.generate_pair(raw, distractors, P.AugmentConfig.identity(),
                               seed=5, train=False)
        assert np.allclose(pair.support[0], raw.image, atol=1e-6)
        assert np.array_equal(pair.support[1], raw.contour)
        assert np.array_equal(pair.query[1], raw.contour)

    def test_requires_three_distractors(self, raw, distractors):
        with pytest.raises(P.PairGenError):
            P.generate_pair(raw, distractors[:2], seed=0)

    def test_empty_contour_rejected(self, distractors):
        bad = P.RawSample(np.zeros((64, 64, 3), np.float32),
                          np.zeros((64, 64), np.uint8))
        with pytest.raises(P.PairGenError):
            P.generate_pair(bad, distractors, seed=0)
