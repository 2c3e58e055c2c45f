"""Kernel-based instance candidate generation.

A per-point MLP produces features and four heads: semantics, centroid
offsets, a centroid heatmap, and pointwise instance features. Heatmap peaks
seed candidates, a learned pairwise score merges duplicates, and each
candidate predicts its own mask by applying regressed kernel parameters to
every point (a two-layer dynamic convolution). Candidate embeddings are the
mean of the instance features over the binarized mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import apply_linear, make_linear
from .metrics import mask_iou


def kernel_param_count(feature_dim: int, hidden: int) -> int:
    in_dim = feature_dim + 3
    return in_dim * hidden + hidden + hidden + 1


@dataclass
class BackboneFeatures:
    f3d: Tensor       # (N, D) per-point features
    s_logits: Tensor  # (N, C) semantic logits
    offsets: Tensor   # (N, 3) predicted point-to-centroid offsets
    heat: Tensor      # (N,) centroid heatmap in [0, 1]
    g: Tensor         # (N, L) instance features


@dataclass
class InstanceCandidate:
    id: int
    seed_indices: np.ndarray
    rep_index: int
    centroid: np.ndarray        # (3,) estimate from shifted seed positions
    kernel: Tensor              # flattened dynamic-conv parameters
    soft_mask: Tensor           # (N,) in (0, 1)
    mask: np.ndarray            # (N,) bool, soft mask binarized at 0.5
    embedding: Tensor           # (L,) mean of g over the mask
    merge_score: float          # mean pairwise score inside the merged group


@dataclass
class MergeInfo:
    pairs: list                 # (seed_a, seed_b) point indices
    scores: Tensor | None       # (P,) sigmoid merge scores
    labels: np.ndarray | None   # (P,) ground-truth merge map, when labels exist


class Backbone:
    def __init__(self, rng, num_classes: int, feature_dim: int = 32,
                 instance_dim: int = 128, mask_hidden: int = 16):
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.instance_dim = instance_dim
        self.mask_hidden = mask_hidden
        self.kernel_params = kernel_param_count(feature_dim, mask_hidden)
        d = feature_dim
        p: dict = {}
        make_linear(p, "mlp.fc1", 9, d, rng)
        make_linear(p, "mlp.fc2", d, d, rng)
        make_linear(p, "mlp.fc3", d, d, rng)
        make_linear(p, "sem", d, num_classes, rng)
        make_linear(p, "off", d, 3, rng)
        make_linear(p, "heat.fc1", d + 3, 16, rng)
        make_linear(p, "heat.fc2", 16, 1, rng)
        # bias the heatmap low at init so untrained background stays below
        # the seeding threshold
        p["heat.fc2.b"].data[:] = -1.5
        make_linear(p, "inst.fc1", d, 64, rng)
        make_linear(p, "inst.fc2", 64, instance_dim, rng)
        make_linear(p, "merge.fc1", 2 * d, 32, rng)
        make_linear(p, "merge.fc2", 32, 1, rng)
        make_linear(p, "kern.fc1", d, 64, rng)
        make_linear(p, "kern.fc2", 64, self.kernel_params, rng)
        self.params = p

    def extract_features(self, inputs: np.ndarray) -> BackboneFeatures:
        """All heads in one pass over (N, 9) inputs: xyz, rgb, centered xyz."""
        x = ad.as_tensor(np.asarray(inputs, dtype=np.float64))
        p = self.params
        h = ad.relu(apply_linear(p, "mlp.fc1", x))
        h = ad.relu(apply_linear(p, "mlp.fc2", h))
        f3d = apply_linear(p, "mlp.fc3", h)
        s_logits = apply_linear(p, "sem", f3d)
        offsets = apply_linear(p, "off", f3d)
        heat_in = ad.concat([f3d, offsets], axis=1)
        heat = ad.sigmoid(ad.reshape(
            apply_linear(p, "heat.fc2", ad.relu(apply_linear(p, "heat.fc1", heat_in))), (-1,)))
        g = apply_linear(p, "inst.fc2", ad.relu(apply_linear(p, "inst.fc1", f3d)))
        return BackboneFeatures(f3d=f3d, s_logits=s_logits, offsets=offsets, heat=heat, g=g)


def scene_inputs(points: np.ndarray, colors: np.ndarray) -> np.ndarray:
    xyz = np.asarray(points, dtype=np.float64)
    rgb = np.asarray(colors, dtype=np.float64)
    return np.concatenate([xyz, rgb, xyz - xyz.mean(axis=0)], axis=1)


def heatmap_target(scene, gamma: float = 25.0) -> np.ndarray:
    """Gaussian centroid targets exp(-gamma * d^2 / b^2) on instance points.

    b is the instance box diagonal; background points stay 0 and are excluded
    from the heatmap loss by the instance indicator.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    target = np.zeros(scene.n_points)
    for inst in scene.instances:
        b = float(np.linalg.norm(inst.aabb_max - inst.aabb_min))
        if b < 1e-6:
            raise ValueError(f"instance {inst.id} has a degenerate box")
        d2 = np.sum((scene.points[inst.point_indices] - inst.centroid) ** 2, axis=1)
        target[inst.point_indices] = np.exp(-gamma * d2 / b**2)
    return target


def neighbor_matrix(positions: np.ndarray, window: float) -> np.ndarray:
    """Boolean (N, N) adjacency under the seeding window, diagonal excluded.

    Distances are rotation-invariant, so one matrix serves every yaw view of
    the same scene.
    """
    pos = np.asarray(positions, dtype=np.float64)
    sq = np.sum(pos * pos, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pos @ pos.T)
    near = d2 < window * window
    np.fill_diagonal(near, False)
    return near


def local_maxima_seeds(heat: np.ndarray, positions: np.ndarray, window: float,
                       min_heat: float, cap: int, near: np.ndarray | None = None) -> np.ndarray:
    """Points whose heat dominates their spatial window (ties to lower index)."""
    h = np.asarray(heat, dtype=np.float64)
    if near is None:
        near = neighbor_matrix(positions, window)
    n = h.size
    idx = np.arange(n)
    beats_me = (h[None, :] > h[:, None]) | ((h[None, :] == h[:, None]) & (idx[None, :] < idx[:, None]))
    dominated = np.any(near & beats_me, axis=1)
    seeds = np.flatnonzero((h >= min_heat) & ~dominated)
    if seeds.size > cap:
        order = np.lexsort((seeds, -h[seeds]))
        seeds = np.sort(seeds[order[:cap]])
    return seeds


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def dynamic_mask_head(kernel: Tensor, f3d: Tensor, positions: np.ndarray,
                      centroid: np.ndarray, hidden: int = 16) -> Tensor:
    """Apply candidate-specific parameters over (features, relative position)."""
    n, d = f3d.data.shape
    in_dim = d + 3
    expected = kernel_param_count(d, hidden)
    if kernel.data.shape != (expected,):
        raise ValueError(f"kernel must hold {expected} parameters, got {kernel.data.shape}")
    rel = np.asarray(positions, dtype=np.float64) - np.asarray(centroid, dtype=np.float64)
    inp = ad.concat([f3d, ad.as_tensor(rel)], axis=1)
    o = 0
    w1 = ad.reshape(ad.narrow(kernel, o, in_dim * hidden), (in_dim, hidden))
    o += in_dim * hidden
    b1 = ad.narrow(kernel, o, hidden)
    o += hidden
    w2 = ad.reshape(ad.narrow(kernel, o, hidden), (hidden, 1))
    o += hidden
    b2 = ad.narrow(kernel, o, 1)
    h = ad.relu(ad.add(ad.matmul(inp, w1), b1))
    logits = ad.reshape(ad.add(ad.matmul(h, w2), b2), (n,))
    return ad.sigmoid(logits)


def dynamic_mask_heads(kernels: Tensor, f3d: Tensor, positions: np.ndarray,
                       centroids: np.ndarray, hidden: int = 16) -> Tensor:
    """All candidates' mask heads as one fused tape node; returns (I, N) soft masks.

    Row i equals dynamic_mask_head(kernels[i], ...) exactly; the batched form
    exists because early training runs at the candidate cap.
    """
    n, d = f3d.data.shape
    n_cand = kernels.data.shape[0]
    in_dim = d + 3
    expected = kernel_param_count(d, hidden)
    if kernels.data.shape != (n_cand, expected):
        raise ValueError(f"kernels must be (I, {expected}), got {kernels.data.shape}")
    cent = np.asarray(centroids, dtype=np.float64)
    x = np.concatenate([f3d.data, np.asarray(positions, dtype=np.float64)], axis=1)

    kv = kernels.data
    w1 = kv[:, :in_dim * hidden].reshape(n_cand, in_dim, hidden)
    b1 = kv[:, in_dim * hidden:in_dim * hidden + hidden]
    w2 = kv[:, in_dim * hidden + hidden:in_dim * hidden + 2 * hidden]
    b2 = kv[:, -1]
    # relative positions enter through a rank-1 correction of the shared input
    corr = np.einsum("ic,ich->ih", cent, w1[:, d:, :])
    pre = np.matmul(x, w1) - corr[:, None, :] + b1[:, None, :]
    hid = np.maximum(pre, 0.0)
    logits = (hid * w2[:, None, :]).sum(axis=-1) + b2[:, None]
    soft = 1.0 / (1.0 + np.exp(-np.abs(logits)))
    soft = np.where(logits >= 0, soft, 1.0 - soft)

    out = ad._make(soft, (kernels, f3d), "dynamic_mask_heads")
    if out.requires_grad:
        def _bw():
            dlogit = out.grad * soft * (1.0 - soft)
            db2 = dlogit.sum(axis=1)
            dw2 = (hid * dlogit[:, :, None]).sum(axis=1)
            dpre = dlogit[:, :, None] * w2[:, None, :] * (pre > 0.0)
            db1 = dpre.sum(axis=1)
            dw1 = np.matmul(x.T, dpre)
            dw1[:, d:, :] -= cent[:, :, None] * db1[:, None, :]
            dk = np.concatenate([dw1.reshape(n_cand, -1), db1, dw2, db2[:, None]], axis=1)
            ad._acc(kernels, dk)
            dx = np.matmul(dpre, w1.transpose(0, 2, 1)).sum(axis=0)
            ad._acc(f3d, dx[:, :d])
        out._backward = _bw
    return out


def generate_candidates(backbone: Backbone, feats: BackboneFeatures, positions: np.ndarray,
                        window: float = 0.3, merge_radius: float = 0.3,
                        merge_threshold: float = 0.5, min_heat: float = 0.4,
                        cap: int = 32, instance_id: np.ndarray | None = None,
                        near: np.ndarray | None = None):
    """Seed, merge, and materialize instance candidates.

    Returns (candidates, MergeInfo); an empty candidate list means the scene
    produced no usable heatmap peak and grounding is skipped downstream.
    """
    p = backbone.params
    heat = feats.heat.data
    seeds = local_maxima_seeds(heat, positions, window, min_heat, cap, near=near)
    if seeds.size == 0:
        return [], MergeInfo(pairs=[], scores=None, labels=None)

    shifted = positions + feats.offsets.data
    pairs = []
    for a in range(seeds.size):
        for b in range(a + 1, seeds.size):
            if np.linalg.norm(shifted[seeds[a]] - shifted[seeds[b]]) < merge_radius:
                pairs.append((int(seeds[a]), int(seeds[b])))

    scores = None
    labels = None
    uf = _UnionFind(seeds.size)
    seed_slot = {int(s): i for i, s in enumerate(seeds)}
    if pairs:
        fa = ad.gather_rows(feats.f3d, [a for a, _ in pairs])
        fb = ad.gather_rows(feats.f3d, [b for _, b in pairs])
        pair_in = ad.concat([fa, fb], axis=1)
        scores = ad.reshape(ad.sigmoid(apply_linear(
            p, "merge.fc2", ad.relu(apply_linear(p, "merge.fc1", pair_in)))), (-1,))
        if instance_id is not None:
            labels = np.array([
                1.0 if instance_id[a] >= 0 and instance_id[a] == instance_id[b] else 0.0
                for a, b in pairs])
        for (a, b), s in zip(pairs, scores.data):
            if s > merge_threshold:
                uf.union(seed_slot[a], seed_slot[b])

    groups = {}
    for i, s in enumerate(seeds):
        groups.setdefault(uf.find(i), []).append(int(s))
    ordered = sorted(groups.values(), key=lambda members: (-heat[members].max(), min(members)))

    member_masks = []
    centroids = []
    reps = []
    for members in ordered:
        members.sort()
        reps.append(members[int(np.lexsort((members, -heat[members]))[0])])
        centroids.append(shifted[members].mean(axis=0))
        mm = np.zeros(positions.shape[0], dtype=bool)
        mm[members] = True
        member_masks.append(mm)
    centroids = np.stack(centroids, axis=0)

    kfeat = ad.concat([ad.reshape(ad.masked_mean_pool(feats.f3d, mm), (1, backbone.feature_dim))
                       for mm in member_masks], axis=0)
    kernels = apply_linear(p, "kern.fc2", ad.relu(apply_linear(p, "kern.fc1", kfeat)))
    softs = dynamic_mask_heads(kernels, feats.f3d, positions, centroids, backbone.mask_hidden)

    candidates = []
    for cid, members in enumerate(ordered):
        soft = ad.reshape(ad.gather_rows(softs, [cid]), (-1,))
        mask = soft.data >= 0.5
        if not mask.any():
            mask = mask.copy()
            mask[reps[cid]] = True
        emb = ad.masked_mean_pool(feats.g, mask)
        inside = [float(s) for (a, b), s in zip(pairs, scores.data)
                  if a in members and b in members] if pairs else []
        candidates.append(InstanceCandidate(
            id=cid, seed_indices=np.array(members), rep_index=reps[cid],
            centroid=centroids[cid],
            kernel=ad.reshape(ad.gather_rows(kernels, [cid]), (-1,)),
            soft_mask=soft, mask=mask, embedding=emb,
            merge_score=float(np.mean(inside)) if inside else 1.0))
    return candidates, MergeInfo(pairs=pairs, scores=scores, labels=labels)


def backbone_loss(feats: BackboneFeatures, candidates, merge_info: MergeInfo, scene,
                  gamma: float = 25.0, iou_match: float = 0.25):
    """Candidate-generation losses plus mask supervision.

    Semantic CE over all points, L1 offsets and heatmap on instance points
    only, BCE on the merge map, and BCE+Dice on masks whose best ground-truth
    IoU reaches the match threshold. Returns (total, components dict).
    """
    parts = {}
    parts["sem"] = ad.cross_entropy(feats.s_logits, scene.semantic_id)

    inst_idx = np.flatnonzero(scene.instance_id >= 0)
    centroid_of = {inst.id: inst.centroid for inst in scene.instances}
    gt_off = np.stack([centroid_of[i] for i in scene.instance_id[inst_idx]], axis=0) \
        - scene.points[inst_idx]
    parts["off"] = ad.l1_loss(ad.gather_rows(feats.offsets, inst_idx), gt_off)

    cen_target = heatmap_target(scene, gamma)
    parts["cen"] = ad.l1_loss(ad.gather_rows(feats.heat, inst_idx), cen_target[inst_idx])

    if merge_info.scores is not None and merge_info.labels is not None:
        parts["agg"] = ad.binary_cross_entropy(merge_info.scores, merge_info.labels)
    else:
        parts["agg"] = ad.as_tensor(0.0)

    matched = []
    for cand in candidates:
        best_iou, best_inst = 0.0, None
        for inst in scene.instances:
            iou = mask_iou(cand.mask, scene.gt_mask(inst.id))
            if iou > best_iou:
                best_iou, best_inst = iou, inst
        if best_inst is not None and best_iou >= iou_match:
            gt = scene.gt_mask(best_inst.id).astype(np.float64)
            matched.append(ad.add(ad.binary_cross_entropy(cand.soft_mask, gt),
                                  ad.dice_loss(cand.soft_mask, gt)))
    if matched:
        total_mask = matched[0]
        for m in matched[1:]:
            total_mask = ad.add(total_mask, m)
        parts["mask"] = ad.mul(total_mask, 1.0 / len(matched))
    else:
        parts["mask"] = ad.as_tensor(0.0)

    total = parts["sem"]
    for key in ("off", "cen", "agg", "mask"):
        total = ad.add(total, parts[key])
    return total, parts
