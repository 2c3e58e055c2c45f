"""Backbone: heads, heatmap targets, candidate generation, mask head, losses."""

import numpy as np
import pytest

from denseground import autodiff as ad
from denseground.autodiff import Tensor
from denseground import backbone as bb
from denseground.backbone import (Backbone, BackboneFeatures, backbone_loss,
                                  dynamic_mask_head, dynamic_mask_heads,
                                  generate_candidates, heatmap_target, kernel_param_count,
                                  local_maxima_seeds, scene_inputs)
from denseground.scenes import InstanceRecord, Scene


def grid_scene(centers, half=0.25, pts_per=27, camera=(1.0, 1.0, 1.5)):
    """Box instances on a regular sub-grid so geometry is exactly known."""
    points, inst_ids, instances = [], [], []
    side = round(pts_per ** (1 / 3))
    axis = np.linspace(-half, half, side)
    cube = np.array([[x, y, z] for x in axis for y in axis for z in axis])
    for i, c in enumerate(centers):
        pts = cube + np.asarray(c)
        points.append(pts)
        inst_ids.append(np.full(len(pts), i))
        instances.append(InstanceRecord(i, 2 + (i % 3), pts.mean(axis=0),
                                        pts.min(axis=0), pts.max(axis=0),
                                        np.arange(i * len(pts), (i + 1) * len(pts))))
    floor = np.column_stack([np.linspace(0, 4, 30), np.linspace(0, 4, 30), np.zeros(30)])
    points.append(floor)
    inst_ids.append(np.full(30, -1))
    points = np.concatenate(points)
    inst_ids = np.concatenate(inst_ids).astype(np.int64)
    sem = np.zeros(len(points), dtype=np.int64)
    for inst in instances:
        sem[inst.point_indices] = inst.semantic
    colors = np.full((len(points), 3), 0.5)
    return Scene(points, colors, inst_ids, sem, instances, np.array(camera))


class TestExtractFeatures:
    def test_finite_on_degenerate_input(self):
        rng = np.random.default_rng(0)
        net = Backbone(rng, num_classes=10)
        feats = net.extract_features(np.zeros((5, 9)))
        for t in (feats.f3d, feats.s_logits, feats.offsets, feats.heat, feats.g):
            assert np.isfinite(t.data).all()
        assert np.all((feats.heat.data >= 0) & (feats.heat.data <= 1))

    def test_pointwise_equivariance(self):
        rng = np.random.default_rng(1)
        net = Backbone(rng, num_classes=10)
        x = rng.normal(size=(12, 9))
        perm = rng.permutation(12)
        a = net.extract_features(x)
        b = net.extract_features(x[perm])
        assert np.allclose(a.f3d.data[perm], b.f3d.data)
        assert np.allclose(a.heat.data[perm], b.heat.data)

    def test_gradient_through_heads(self):
        rng = np.random.default_rng(2)
        net = Backbone(rng, num_classes=4, feature_dim=8, instance_dim=6, mask_hidden=4)
        x = rng.normal(size=(6, 9))
        targets = rng.integers(0, 4, size=6)
        w1 = Tensor(net.params["mlp.fc1.w"].data.copy(), requires_grad=True)

        def fn(w):
            net.params["mlp.fc1.w"] = w
            feats = net.extract_features(x)
            return ad.add(ad.cross_entropy(feats.s_logits, targets),
                          ad.mean_all(feats.heat))

        assert ad.grad_check(fn, [w1]) < 1e-4


class TestHeatmapTarget:
    def test_centroid_point_is_one(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])  # odd grid includes the center
        target = heatmap_target(scene, gamma=25.0)
        center_idx = scene.instances[0].point_indices[13]
        assert target[center_idx] == pytest.approx(1.0)

    def test_distance_fifth_of_diagonal(self):
        scene = grid_scene([(2.0, 2.0, 0.5)])
        inst = scene.instances[0]
        b = float(np.linalg.norm(inst.aabb_max - inst.aabb_min))
        d = np.linalg.norm(scene.points[inst.point_indices] - inst.centroid, axis=1)
        target = heatmap_target(scene, gamma=25.0)[inst.point_indices]
        k = int(np.argmin(np.abs(d - b / 5)))
        assert target[k] == pytest.approx(np.exp(-25.0 * d[k] ** 2 / b ** 2), rel=1e-12)
        assert abs(np.exp(-25.0 * (b / 5) ** 2 / b ** 2) - np.exp(-1.0)) < 1e-12

    def test_background_zero(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])
        target = heatmap_target(scene)
        assert np.all(target[scene.instance_id < 0] == 0.0)

    def test_degenerate_box_rejected(self):
        pts = np.tile([1.0, 1.0, 1.0], (25, 1))
        inst = InstanceRecord(0, 2, pts[0], pts[0], pts[0], np.arange(25))
        scene = Scene(pts, np.full((25, 3), 0.5), np.zeros(25, dtype=np.int64),
                      np.full(25, 2, dtype=np.int64), [inst], np.array([1.0, 1, 1]))
        with pytest.raises(ValueError, match="degenerate"):
            heatmap_target(scene)

    def test_gamma_to_infinity_limit(self):
        scene = grid_scene([(1.0, 1.0, 0.5), (3.0, 3.0, 0.5)])
        target = heatmap_target(scene, gamma=1e4)
        for inst in scene.instances:
            b = float(np.linalg.norm(inst.aabb_max - inst.aabb_min))
            d = np.linalg.norm(scene.points[inst.point_indices] - inst.centroid, axis=1)
            far = d > b / 10
            assert np.all(target[inst.point_indices][far] < 1e-3)

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            heatmap_target(grid_scene([(1, 1, 0.5)]), gamma=0.0)


def stub_features(scene, heat, offsets=None, feature_dim=8, instance_dim=6):
    n = scene.n_points
    rng = np.random.default_rng(99)
    if offsets is None:
        offsets = np.zeros((n, 3))
        for inst in scene.instances:
            offsets[inst.point_indices] = inst.centroid - scene.points[inst.point_indices]
    return BackboneFeatures(
        f3d=Tensor(rng.normal(size=(n, feature_dim))),
        s_logits=Tensor(np.zeros((n, 10))),
        offsets=Tensor(offsets),
        heat=Tensor(heat),
        g=Tensor(rng.normal(size=(n, instance_dim))))


class TestCandidateGeneration:
    def test_two_clean_instances_two_candidates(self):
        scene = grid_scene([(1.0, 1.0, 0.5), (3.0, 3.0, 0.5)])
        heat = heatmap_target(scene, gamma=25.0)
        feats = stub_features(scene, heat)
        net = Backbone(np.random.default_rng(3), num_classes=10, feature_dim=8,
                       instance_dim=6, mask_hidden=4)
        cands, info = generate_candidates(net, feats, scene.points, min_heat=0.25,
                                          instance_id=scene.instance_id)
        # brute-force peaks: one per instance (the grid centers), far apart
        peaks = [i for i in range(scene.n_points)
                 if heat[i] >= 0.25 and all(
                     heat[j] < heat[i] or (heat[j] == heat[i] and i <= j)
                     for j in range(scene.n_points)
                     if i != j and np.linalg.norm(scene.points[i] - scene.points[j]) < 0.3)]
        assert len(peaks) == 2
        assert len(cands) == 2

    def test_zero_heatmap_zero_candidates(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])
        feats = stub_features(scene, np.zeros(scene.n_points))
        net = Backbone(np.random.default_rng(4), num_classes=10, feature_dim=8,
                       instance_dim=6, mask_hidden=4)
        cands, info = generate_candidates(net, feats, scene.points, instance_id=scene.instance_id)
        assert cands == []
        assert info.scores is None

    def test_close_seeds_merge_on_high_score(self):
        scene = grid_scene([(1.0, 1.0, 0.5)], pts_per=125)
        heat = np.zeros(scene.n_points)
        inst = scene.instances[0]
        # two artificial peaks ~0.125 m apart inside one instance
        d = np.linalg.norm(scene.points[inst.point_indices] - inst.centroid, axis=1)
        a = inst.point_indices[int(np.argmin(d))]
        near = np.flatnonzero(
            (np.linalg.norm(scene.points - scene.points[a], axis=1) > 0.09)
            & (np.linalg.norm(scene.points - scene.points[a], axis=1) < 0.2)
            & (scene.instance_id == 0))
        b = near[0]
        heat[a] = 1.0
        heat[b] = 0.9
        feats = stub_features(scene, heat, offsets=np.zeros((scene.n_points, 3)))
        net = Backbone(np.random.default_rng(5), num_classes=10, feature_dim=8,
                       instance_dim=6, mask_hidden=4)
        # window smaller than the peak distance so both survive seeding
        cands, info = generate_candidates(net, feats, scene.points, window=0.05,
                                          merge_radius=0.3, merge_threshold=0.5,
                                          instance_id=scene.instance_id)
        got_pair = (a, b) if a < b else (b, a)
        assert got_pair in info.pairs
        score = float(info.scores.data[info.pairs.index(got_pair)])
        n_merged = len([c for c in cands if {a, b} <= set(c.seed_indices.tolist())])
        if score > 0.5:
            assert n_merged == 1
        else:
            assert n_merged == 0
        assert info.labels[info.pairs.index(got_pair)] == 1.0

    def test_candidate_cap(self):
        scene = grid_scene([(1.0 + 0.8 * i, 1.0, 0.5) for i in range(4)])
        heat = heatmap_target(scene, gamma=25.0)
        feats = stub_features(scene, heat)
        net = Backbone(np.random.default_rng(6), num_classes=10, feature_dim=8,
                       instance_dim=6, mask_hidden=4)
        cands, _ = generate_candidates(net, feats, scene.points, cap=2, min_heat=0.2,
                                       instance_id=scene.instance_id)
        assert len(cands) <= 2

    def test_pooled_embedding_is_masked_mean(self):
        scene = grid_scene([(1.0, 1.0, 0.5), (3.0, 3.0, 0.5)])
        feats = stub_features(scene, heatmap_target(scene))
        net = Backbone(np.random.default_rng(7), num_classes=10, feature_dim=8,
                       instance_dim=6, mask_hidden=4)
        cands, _ = generate_candidates(net, feats, scene.points, min_heat=0.25)
        for cand in cands:
            assert cand.mask.any()
            want = feats.g.data[cand.mask].mean(axis=0)
            assert np.abs(cand.embedding.data - want).max() < 1e-6


class TestDynamicMaskHead:
    def test_zero_kernel_constant_half(self):
        rng = np.random.default_rng(8)
        f3d = Tensor(rng.normal(size=(10, 8)))
        kernel = Tensor(np.zeros(kernel_param_count(8, 4)))
        soft = dynamic_mask_head(kernel, f3d, rng.normal(size=(10, 3)), np.zeros(3), hidden=4)
        assert np.allclose(soft.data, 0.5)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        n, d, hidden, k = 12, 6, 4, 3
        f3d = Tensor(rng.normal(size=(n, d)))
        kernels = Tensor(rng.normal(size=(k, kernel_param_count(d, hidden))) * 0.3)
        positions = rng.normal(size=(n, 3))
        centroids = rng.normal(size=(k, 3))
        batched = dynamic_mask_heads(kernels, f3d, positions, centroids, hidden=hidden)
        for i in range(k):
            single = dynamic_mask_head(Tensor(kernels.data[i]), f3d, positions,
                                       centroids[i], hidden=hidden)
            assert np.abs(batched.data[i] - single.data).max() < 1e-12

    def test_batched_gradient(self):
        rng = np.random.default_rng(10)
        n, d, hidden, k = 6, 4, 3, 2
        f3d = Tensor(rng.normal(size=(n, d)), requires_grad=True)
        kernels = Tensor(rng.normal(size=(k, kernel_param_count(d, hidden))) * 0.5,
                         requires_grad=True)
        positions = rng.normal(size=(n, 3))
        centroids = rng.normal(size=(k, 3))
        weight = rng.normal(size=(k, n))

        def fn(kk, ff):
            return ad.sum_all(ad.mul(dynamic_mask_heads(kk, ff, positions, centroids,
                                                        hidden=hidden), weight))

        assert ad.grad_check(fn, [kernels, f3d]) < 1e-4

    def test_single_gradient(self):
        rng = np.random.default_rng(11)
        f3d = Tensor(rng.normal(size=(5, 4)))
        kernel = Tensor(rng.normal(size=kernel_param_count(4, 3)) * 0.5, requires_grad=True)
        positions = rng.normal(size=(5, 3))
        gt = (rng.random(5) < 0.5).astype(float)

        def fn(kk):
            soft = dynamic_mask_head(kk, f3d, positions, np.zeros(3), hidden=3)
            return ad.binary_cross_entropy(soft, gt)

        assert ad.grad_check(fn, [kernel]) < 1e-4

    def test_wrong_kernel_size_rejected(self):
        f3d = Tensor(np.zeros((4, 8)))
        with pytest.raises(ValueError, match="parameters"):
            dynamic_mask_head(Tensor(np.zeros(10)), f3d, np.zeros((4, 3)), np.zeros(3))


def perfect_setup(scene, net_seed=12):
    """Features and candidates that exactly reproduce the ground truth."""
    n = scene.n_points
    logits = np.full((n, 10), -10.0)
    logits[np.arange(n), scene.semantic_id] = 10.0
    heat = heatmap_target(scene)
    feats = stub_features(scene, heat)
    feats = BackboneFeatures(f3d=feats.f3d, s_logits=Tensor(logits),
                             offsets=feats.offsets, heat=feats.heat, g=feats.g)
    candidates = []
    for inst in scene.instances:
        gt = scene.gt_mask(inst.id)
        candidates.append(bb.InstanceCandidate(
            id=inst.id, seed_indices=inst.point_indices[:1], rep_index=int(inst.point_indices[0]),
            centroid=inst.centroid, kernel=Tensor(np.zeros(3)),
            soft_mask=Tensor(gt.astype(float)), mask=gt,
            embedding=Tensor(np.zeros(6)), merge_score=1.0))
    return feats, candidates


class TestBackboneLoss:
    def test_perfect_predictions(self):
        scene = grid_scene([(1.0, 1.0, 0.5), (3.0, 3.0, 0.5)])
        feats, candidates = perfect_setup(scene)
        info = bb.MergeInfo(pairs=[], scores=None, labels=None)
        total, parts = backbone_loss(feats, candidates, info, scene)
        assert parts["off"].item() == 0.0
        assert parts["sem"].item() < 1e-6
        assert parts["cen"].item() < 1e-9
        assert parts["mask"].item() < 2e-6  # bce residual from clamping only

    def test_low_iou_candidate_excluded(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])
        feats, candidates = perfect_setup(scene)
        inst = scene.instances[0]
        bad = np.zeros(scene.n_points, dtype=bool)
        bad[inst.point_indices[:int(0.2 * inst.point_indices.size)]] = True
        lone = candidates[0]
        lone.soft_mask = Tensor(bad.astype(float))
        lone.mask = bad
        info = bb.MergeInfo(pairs=[], scores=None, labels=None)
        total, parts = backbone_loss(feats, [lone], info, scene)
        assert parts["mask"].item() == 0.0

    def test_offset_loss_ignores_background(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])
        feats, candidates = perfect_setup(scene)
        info = bb.MergeInfo(pairs=[], scores=None, labels=None)
        base, _ = backbone_loss(feats, candidates, info, scene)
        noised = feats.offsets.data.copy()
        noised[scene.instance_id < 0] += 123.0
        feats2 = BackboneFeatures(f3d=feats.f3d, s_logits=feats.s_logits,
                                  offsets=Tensor(noised), heat=feats.heat, g=feats.g)
        bumped, _ = backbone_loss(feats2, candidates, info, scene)
        assert bumped.item() == base.item()

    def test_merge_supervision(self):
        scene = grid_scene([(1.0, 1.0, 0.5)])
        feats, candidates = perfect_setup(scene)
        scores = Tensor(np.array([0.9, 0.1]))
        labels = np.array([1.0, 0.0])
        info = bb.MergeInfo(pairs=[(0, 1), (0, 2)], scores=scores, labels=labels)
        _, parts = backbone_loss(feats, candidates, info, scene)
        want = -(np.log(0.9) + np.log(0.9)) / 2
        assert parts["agg"].item() == pytest.approx(want, rel=1e-9)


class TestOverfitSmoke:
    def test_backbone_loss_decreases_monotonically_first_steps(self):
        # fixed seed: candidate restructuring can bump the loss on other
        # seeds, but the optimization trend itself is what this checks
        from denseground.config import RunConfig
        from denseground.model import GroundingModel
        from denseground.scenes import SceneConfig, gen_scene
        from denseground.backbone import neighbor_matrix
        from denseground.autodiff import AdamW

        cfg = RunConfig()
        scene = gen_scene(SceneConfig(family="mixed", floor_points=60, wall_points=40,
                                      points_per_instance=(30, 40)), 3)
        model = GroundingModel(cfg)
        opt = AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        near = neighbor_matrix(scene.points, cfg.model.seed_window)
        losses = []
        for _ in range(11):
            feats, cands, info = model.forward_scene(
                scene.points, scene.colors, instance_id=scene.instance_id, near=near)
            total, _ = backbone_loss(feats, cands, info, scene)
            losses.append(total.item())
            total.backward()
            opt.step()
            opt.zero_grad()
        assert all(a > b for a, b in zip(losses, losses[1:])), losses

    def test_full_objective_improves_over_short_overfit(self):
        from denseground.config import RunConfig
        from denseground.model import GroundingModel
        from denseground.scenes import SceneConfig, gen_scene, gen_referral, KIND_UNIQUE
        from denseground.train import train_scene_step, _referral_pack
        from denseground.backbone import neighbor_matrix
        from denseground.autodiff import AdamW

        cfg = RunConfig()
        cfg.loss.noun_mask_prob = 0.0
        scene = gen_scene(SceneConfig(family="mixed", floor_points=60, wall_points=40,
                                      points_per_instance=(30, 40)), 2)
        scene.referrals = [gen_referral(scene, KIND_UNIQUE, 0)]
        model = GroundingModel(cfg)
        opt = AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        rng = np.random.default_rng(0)
        pack = _referral_pack("s", scene)
        near = neighbor_matrix(scene.points, cfg.model.seed_window)
        losses = []
        for _ in range(30):
            total, log = train_scene_step(model, scene, pack, rng, near=near)
            losses.append(log["total"])
            total.backward()
            opt.step()
            opt.zero_grad()
        assert np.mean(losses[-5:]) < 0.6 * losses[0], losses[:3] + losses[-3:]
