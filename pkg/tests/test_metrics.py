"""Tests for tolerance-based contour scoring and illumination normalization."""

import numpy as np
import pytest

from cpie import eval_metrics as E


def mask_with(points, shape=(32, 32)):
    m = np.zeros(shape, np.float32)
    for y, x in points:
        m[y, x] = 1.0
    return m


class TestTolerance:
    def test_fraction_of_diagonal(self):
        assert E.tolerance_px((300, 400)) == pytest.approx(0.015 * 500)

    def test_square_image(self):
        assert E.tolerance_px((100, 100)) == pytest.approx(1.5 * np.sqrt(2))


class TestMatchContours:
    def test_identical_masks_all_tp(self):
        m = mask_with([(3, 3), (10, 20), (30, 5)])
        c = E.match_contours(m, m, tol_px=2.0)
        assert (c.tp, c.fp, c.fn) == (3, 0, 0)
        assert E.f_measure(c) == 1.0

    def test_empty_prediction_all_fn(self):
        gt = mask_with([(5, 5), (6, 6)])
        c = E.match_contours(np.zeros_like(gt), gt, tol_px=2.0)
        assert (c.tp, c.fp, c.fn) == (0, 0, 2)

    def test_empty_gt_all_fp(self):
        p = mask_with([(5, 5)])
        c = E.match_contours(p, np.zeros_like(p), tol_px=2.0)
        assert (c.tp, c.fp, c.fn) == (0, 1, 0)

    def test_within_tolerance_matches(self):
        p = mask_with([(10, 10)])
        g = mask_with([(10, 11)])
        assert E.match_contours(p, g, tol_px=1.5).tp == 1
        assert E.match_contours(p, g, tol_px=0.5).tp == 0

    def test_one_to_one_not_many_to_one(self):
        # two predictions near a single gt pixel: only one may match
        p = mask_with([(10, 10), (10, 11)])
        g = mask_with([(10, 10)])
        c = E.match_contours(p, g, tol_px=3.0)
        assert (c.tp, c.fp, c.fn) == (1, 1, 0)

    def test_greedy_prefers_nearest(self):
        # pred A sits on gt X; pred B within tol of X only. Greedy must give
        # X to A (distance 0) and leave B unmatched.
        p = mask_with([(10, 10), (10, 12)])
        g = mask_with([(10, 10)])
        c = E.match_contours(p, g, tol_px=2.5)
        assert c.tp == 1

    def test_optimal_beats_naive_on_crossing_pairs(self):
        # A at distance 1 from both X and Y; B within tol of X only.
        # optimal pairing: A-Y, B-X -> 2 matches
        p = mask_with([(10, 11), (10, 14)])
        g = mask_with([(10, 10), (10, 12)])
        greedy = E.match_contours(p, g, tol_px=2.0, matcher="greedy")
        optimal = E.match_contours(p, g, tol_px=2.0, matcher="optimal")
        assert optimal.tp == 2
        assert greedy.tp == 2  # greedy also solves this one via distance order

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.match_contours(np.zeros((4, 4)), np.zeros((5, 5)), 1.0)

    def test_unknown_matcher(self):
        m = mask_with([(1, 1)])
        with pytest.raises(ValueError):
            E.match_contours(m, m, 1.0, matcher="banana")


class TestSweepAndOds:
    def test_perfect_prediction_scores_one(self):
        gt = mask_with([(8, 8), (8, 9), (8, 10)])
        t, f = E.mf_ods([gt.copy()], [gt])
        assert f == pytest.approx(1.0)

    def test_empty_prediction_scores_zero(self):
        gt = mask_with([(8, 8)])
        t, f = E.mf_ods([np.zeros_like(gt)], [gt])
        assert f == 0.0

    def test_threshold_grid(self):
        cfg = E.EvalConfig()
        assert cfg.thresholds[0] == pytest.approx(0.01)
        assert cfg.thresholds[-1] == pytest.approx(0.99)
        assert len(cfg.thresholds) == 99
        assert np.allclose(np.diff(cfg.thresholds), 0.01)

    def test_soft_map_best_threshold(self):
        # gt pixel predicted at 0.6, a false alarm at 0.3: thresholds in
        # (0.3, 0.6] isolate the true pixel
        gt = mask_with([(8, 8)])
        pred = np.zeros_like(gt)
        pred[8, 8] = 0.6
        pred[20, 20] = 0.3
        t, f = E.mf_ods([pred], [gt])
        assert f == pytest.approx(1.0)
        assert 0.3 < t <= 0.6

    def test_dataset_aggregation(self):
        # counts pool over images before F, not mean-of-F
        gt1 = mask_with([(8, 8)])
        gt2 = mask_with([(8, 8), (20, 20)])
        pred1 = gt1.copy()
        pred2 = np.zeros_like(gt2)
        rows = E.sweep_thresholds([pred1, pred2], [gt1, gt2])
        t, counts = rows[0]
        assert (counts.tp, counts.fp, counts.fn) == (1, 0, 2)

    def test_misaligned_lists_rejected(self):
        with pytest.raises(ValueError):
            E.sweep_thresholds([np.zeros((4, 4))], [])

    def test_report_format(self, tmp_path):
        gt = mask_with([(8, 8)])
        rows = E.sweep_thresholds([gt.copy()], [gt])
        t, f = E.mf_ods([gt.copy()], [gt])
        path = tmp_path / "metrics.tsv"
        E.write_report(path, rows, t, f)
        lines = path.read_text().strip().splitlines()
        assert lines[0].split("\t") == ["threshold", "tp", "fp", "fn",
                                        "precision", "recall", "f"]
        assert len(lines) == 1 + 99 + 1
        assert lines[-1].startswith("ODS\t")


class TestIlluminationNormalize:
    def test_uniform_maps_to_127(self):
        v = np.full((64, 64), 200.0)
        out = E.illumination_normalize(v)
        assert np.allclose(out, 127.0, atol=1e-6)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(60, 190, (64, 64))
        a = E.illumination_normalize(v)
        b = E.illumination_normalize(v + 30.0)
        assert np.allclose(a, b, atol=1e-6)

    def test_smooth_ramp_flattens(self):
        ramp = np.tile(np.linspace(40, 215, 64), (64, 1))
        out = E.illumination_normalize(ramp)
        # interior becomes nearly flat around 127
        assert np.abs(out[:, 16:48] - 127.0).max() < 20.0
        assert np.abs(out[:, 16:48] - 127.0).mean() < np.abs(
            ramp[:, 16:48] - ramp.mean()).mean()

    def test_output_range_clamped(self):
        v = np.zeros((32, 32))
        v[16, 16] = 255.0
        out = E.illumination_normalize(v)
        assert out.min() >= 0.0 and out.max() <= 255.0

    def test_rgb_wrapper_contract(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        out = E.illumination_normalize_rgb(img)
        assert out.shape == img.shape
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0
