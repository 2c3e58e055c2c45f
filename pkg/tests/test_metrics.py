"""Metrics: IoU, box fitting, assignment, dataset evaluation."""

import itertools

import numpy as np
import pytest

from denseground import metrics as mx
from denseground.metrics import AxisAlignedBox, box_iou, fit_aabb, hungarian, mask_iou


class TestMaskIoU:
    def test_identical(self):
        m = np.array([True, False, True])
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        assert mask_iou([True, False], [False, True]) == 0.0

    def test_partial_overlap(self):
        a = np.zeros(10, dtype=bool); a[:4] = True
        b = np.zeros(10, dtype=bool); b[2:6] = True
        assert mask_iou(a, b) == pytest.approx(2 / 6)

    def test_both_empty_is_zero(self):
        assert mask_iou(np.zeros(4, bool), np.zeros(4, bool)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros(3, bool), np.zeros(4, bool))

    def test_size_ratio_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.random(20) < 0.5
            b = rng.random(20) < 0.5
            if a.any() and b.any():
                na, nb = a.sum(), b.sum()
                assert mask_iou(a, b) <= min(na, nb) / max(na, nb) + 1e-12


class TestFitAabb:
    def test_single_point(self):
        box = fit_aabb(np.array([[1.0, 2.0, 3.0], [9, 9, 9]]), [True, False])
        assert np.array_equal(box.min, [1, 2, 3]) and np.array_equal(box.max, [1, 2, 3])
        assert box.volume() == 0.0

    def test_unit_cube_corners(self):
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
        box = fit_aabb(corners, np.ones(8, bool))
        assert np.array_equal(box.min, [0, 0, 0]) and np.array_equal(box.max, [1, 1, 1])

    def test_matches_exhaustive_minmax(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(40, 3))
        mask = rng.random(40) < 0.6
        box = fit_aabb(pts, mask)
        sel = [p for p, m in zip(pts, mask) if m]
        assert np.array_equal(box.min, np.min(sel, axis=0))
        assert np.array_equal(box.max, np.max(sel, axis=0))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            fit_aabb(np.zeros((3, 3)), np.zeros(3, bool))


class TestBoxIoU:
    def test_identical_unit_cubes(self):
        a = AxisAlignedBox(np.zeros(3), np.ones(3))
        assert box_iou(a, AxisAlignedBox(np.zeros(3), np.ones(3))) == 1.0

    def test_half_offset_is_one_third(self):
        a = AxisAlignedBox(np.zeros(3), np.ones(3))
        b = AxisAlignedBox(np.array([0.5, 0.0, 0.0]), np.array([1.5, 1.0, 1.0]))
        assert abs(box_iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_touching_faces(self):
        a = AxisAlignedBox(np.zeros(3), np.ones(3))
        b = AxisAlignedBox(np.array([1.0, 0.0, 0.0]), np.array([2.0, 1.0, 1.0]))
        assert box_iou(a, b) == 0.0

    def test_zero_volume_only_matches_exact(self):
        p = AxisAlignedBox(np.ones(3), np.ones(3))
        assert box_iou(p, AxisAlignedBox(np.ones(3), np.ones(3))) == 1.0
        assert box_iou(p, AxisAlignedBox(np.zeros(3), np.full(3, 0.999))) == 0.0

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            lo1, lo2 = rng.uniform(0, 2, (2, 3))
            a = AxisAlignedBox(lo1, lo1 + rng.uniform(0.1, 2, 3))
            b = AxisAlignedBox(lo2, lo2 + rng.uniform(0.1, 2, 3))
            v1, v2 = box_iou(a, b), box_iou(b, a)
            assert v1 == v2 and 0.0 <= v1 <= 1.0


class TestHungarian:
    def test_diagonal_dominant(self):
        cost = np.array([[1.0, 9, 9], [9, 1, 9], [9, 9, 1]])
        assert hungarian(cost) == [(0, 0), (1, 1), (2, 2)]

    def test_all_equal_costs_canonical(self):
        assert hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]

    def test_rectangular(self):
        cost = np.array([[5.0, 1.0, 8.0]])
        assert hungarian(cost) == [(0, 1)]
        assert hungarian(cost.T) == [(1, 0)]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[1.0, np.inf], [0.0, 2.0]]))

    def test_vs_exhaustive_permutations(self):
        rng = np.random.default_rng(4)
        for trial in range(40):
            n = int(rng.integers(2, 7))
            cost = rng.uniform(-3, 3, size=(n, n))
            pairs = hungarian(cost)
            got = sum(cost[r, c] for r, c in pairs)
            best = min(sum(cost[i, p[i]] for i in range(n))
                       for p in itertools.permutations(range(n)))
            assert got == pytest.approx(best, abs=1e-10), f"trial {trial}"

    def test_beats_greedy(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(2, 6))
            cost = rng.uniform(0, 1, size=(n, n))
            pairs = hungarian(cost)
            total = sum(cost[r, c] for r, c in pairs)
            used = set()
            greedy = 0.0
            for i in range(n):
                j = min((c for c in range(n) if c not in used), key=lambda c: cost[i, c])
                used.add(j)
                greedy += cost[i, j]
            assert total <= greedy + 1e-12


def _toy_scene(box_ious):
    """Scenes with one target instance each, engineered so that a prediction
    mask at index parity yields the requested box IoU via interval overlap."""
    from denseground.scenes import InstanceRecord, Scene

    scenes = []
    predictions = {}
    for i, iou in enumerate(box_ious):
        # gt box [0, 1]^3 as two corner points; prediction shifted along x
        # so that intersection/union is exactly `iou`
        shift = (1.0 - iou) / (1.0 + iou)
        pts = np.array([
            [0.0, 0.0, 0.0], [1.0, 1.0, 1.0],
            [shift, 0.0, 0.0], [1.0 + shift, 1.0, 1.0],
        ])
        gt = np.array([True, True, False, False])
        pred = np.array([False, False, True, True])
        inst = InstanceRecord(0, 2, pts[:2].mean(axis=0), pts[0], pts[1], np.array([0, 1]))
        scene = Scene(pts, np.full((4, 3), 0.5), np.where(gt, 0, -1).astype(np.int64),
                      np.full(4, 2, dtype=np.int64), [inst], np.array([0.5, 0.5, 0.5]))
        from denseground.scenes import Referral
        scene.referrals = [Referral([2, 6], "the chair", 0, "unique", scene.camera)]
        name = f"s{i}"
        scenes.append((name, scene))
        predictions[(name, 0)] = pred
    return scenes, predictions


class TestEvaluate:
    def test_fixture_accuracies(self):
        scenes, predictions = _toy_scene([0.3, 0.6, 0.2, 0.9])
        report = mx.evaluate(predictions, scenes)
        assert [round(r.box_iou, 6) for r in report.records] == [0.3, 0.6, 0.2, 0.9]
        assert report.box_acc["overall"][0.25] == 0.75
        assert report.box_acc["overall"][0.5] == 0.5

    def test_perfect_predictions(self):
        scenes, _ = _toy_scene([0.5])
        name, scene = scenes[0]
        predictions = {(name, 0): scene.gt_mask(0)}
        report = mx.evaluate(predictions, scenes[:1])
        assert report.box_acc["overall"][0.5] == 1.0
        assert report.mask_acc["overall"][0.5] == 1.0

    def test_empty_predictions_are_degenerate_misses(self):
        scenes, _ = _toy_scene([0.5])
        name, scene = scenes[0]
        report = mx.evaluate({(name, 0): np.zeros(4, bool)}, scenes[:1])
        assert report.records[0].degenerate
        assert report.box_acc["overall"][0.25] == 0.0

    def test_referral_order_invariance_and_counts(self):
        scenes, predictions = _toy_scene([0.3, 0.6, 0.9])
        fwd = mx.evaluate(predictions, scenes)
        rev = mx.evaluate(predictions, list(reversed(scenes)))
        assert fwd.box_acc == rev.box_acc
        assert fwd.counts["overall"] == sum(fwd.counts[s] for s in ("unique", "multiple"))

    def test_missing_prediction_rejected(self):
        scenes, predictions = _toy_scene([0.3])
        with pytest.raises(KeyError):
            mx.evaluate({}, scenes)

    def test_subset_split(self):
        from denseground.scenes import SceneConfig, gen_scene, gen_referral, KIND_UNIQUE, KIND_VIEW
        scene = gen_scene(SceneConfig(family="mixed"), 50)
        scene.referrals = [gen_referral(scene, KIND_UNIQUE, 0), gen_referral(scene, KIND_VIEW, 0)]
        preds = {("m", 0): scene.gt_mask(scene.referrals[0].target_id),
                 ("m", 1): scene.gt_mask(scene.referrals[1].target_id)}
        report = mx.evaluate(preds, [("m", scene)])
        assert report.counts["unique"] == 1 and report.counts["multiple"] == 1


class TestRle:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            mask = rng.random(rng.integers(1, 50)) < 0.4
            runs = mx.rle_encode(mask)
            assert np.array_equal(mx.rle_decode(runs, mask.size), mask)

    def test_file_round_trip(self, tmp_path):
        preds = {("a", 0): np.array([True, False, True]), ("a", 1): np.zeros(3, bool)}
        path = tmp_path / "pred.jsonl"
        mx.save_predictions(str(path), preds, {"a": 3})
        loaded = mx.load_predictions(str(path))
        assert set(loaded) == set(preds)
        for k in preds:
            assert np.array_equal(loaded[k], preds[k])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mx.rle_decode([2, 1], 5)
