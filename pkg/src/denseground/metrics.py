"""Evaluation harness: IoU metrics, box fitting, assignment, accuracy report.

Grounding accuracy follows the usual protocol: fit an axis-aligned box to the
predicted point mask, compare against the ground-truth box at IoU 0.25/0.50,
and split referrals into unique/multiple by whether the target's semantic
class repeats in its scene. Mask-level IoU accuracies are tracked alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def mask_iou(a, b) -> float:
    """|a & b| / |a | b| for boolean masks; 0.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask length mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


@dataclass
class AxisAlignedBox:
    min: np.ndarray
    max: np.ndarray

    def volume(self) -> float:
        return float(np.prod(np.maximum(self.max - self.min, 0.0)))


def fit_aabb(points: np.ndarray, mask) -> AxisAlignedBox:
    """Componentwise min/max of the masked points."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot fit a box to an empty mask")
    sel = np.asarray(points, dtype=np.float64)[mask]
    return AxisAlignedBox(sel.min(axis=0), sel.max(axis=0))


def box_iou(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Intersection volume over union volume of closed boxes.

    Zero-volume boxes score 0 against everything except an exactly equal box.
    """
    if np.array_equal(a.min, b.min) and np.array_equal(a.max, b.max):
        return 1.0
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def hungarian(cost) -> list:
    """Minimum-cost one-to-one assignment; returns min(n, m) (row, col) pairs.

    Deterministic: equal-cost alternatives resolve to the lowest index, so an
    all-equal matrix yields the identity assignment.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.isfinite(a).all():
        raise ValueError("cost matrix contains non-finite entries")
    transposed = a.shape[0] > a.shape[1]
    if transposed:
        a = a.T
    n, m = a.shape
    INF = np.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)        # p[j] = row matched to column j (1-based, 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(p[j] - 1, j - 1) for j in range(1, m + 1) if p[j] > 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class ReferralResult:
    scene: str
    referral: int
    kind: str
    subset: str               # unique | multiple
    box_iou: float
    mask_iou: float
    degenerate: bool          # empty prediction
    box_hits: dict
    mask_hits: dict


@dataclass
class MetricsReport:
    thresholds: tuple
    counts: dict
    box_acc: dict             # subset -> {threshold -> accuracy}
    mask_acc: dict
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "counts": self.counts,
            "box_acc": {s: {str(t): v for t, v in d.items()} for s, d in self.box_acc.items()},
            "mask_acc": {s: {str(t): v for t, v in d.items()} for s, d in self.mask_acc.items()},
            "referrals": [
                {
                    "scene": r.scene,
                    "referral": r.referral,
                    "kind": r.kind,
                    "subset": r.subset,
                    "box_iou": r.box_iou,
                    "mask_iou": r.mask_iou,
                    "degenerate": r.degenerate,
                    "box_hits": {str(t): bool(v) for t, v in r.box_hits.items()},
                    "mask_hits": {str(t): bool(v) for t, v in r.mask_hits.items()},
                }
                for r in self.records
            ],
        }


def evaluate(predictions: dict, scenes: list, thresholds=(0.25, 0.5)) -> MetricsReport:
    """Score predicted masks against ground truth.

    predictions maps (scene_name, referral_index) -> boolean mask over the
    scene's points. Every referral must have an entry; an empty mask counts
    as a degenerate miss.
    """
    records = []
    for name, scene in scenes:
        for ridx, ref in enumerate(scene.referrals):
            key = (name, ridx)
            if key not in predictions:
                raise KeyError(f"missing prediction for {key}")
            pred = np.asarray(predictions[key], dtype=bool)
            gt = scene.gt_mask(ref.target_id)
            if pred.shape != gt.shape:
                raise ValueError(f"prediction length mismatch for {key}: {pred.shape} vs {gt.shape}")
            subset = "unique" if scene.class_count(scene.instance_by_id(ref.target_id).semantic) == 1 else "multiple"
            degenerate = not pred.any()
            if degenerate:
                biou = 0.0
            else:
                biou = box_iou(fit_aabb(scene.points, pred), fit_aabb(scene.points, gt))
            miou = mask_iou(pred, gt)
            records.append(ReferralResult(
                scene=name, referral=ridx, kind=ref.kind, subset=subset,
                box_iou=biou, mask_iou=miou, degenerate=degenerate,
                box_hits={t: biou >= t for t in thresholds},
                mask_hits={t: miou >= t for t in thresholds}))

    counts = {s: sum(1 for r in records if r.subset == s) for s in ("unique", "multiple")}
    counts["overall"] = len(records)

    def _acc(hit_of):
        out = {}
        for s in ("unique", "multiple", "overall"):
            sel = [r for r in records if s == "overall" or r.subset == s]
            out[s] = {t: (sum(1 for r in sel if hit_of(r)[t]) / len(sel) if sel else 0.0)
                      for t in thresholds}
        return out

    return MetricsReport(
        thresholds=tuple(thresholds), counts=counts,
        box_acc=_acc(lambda r: r.box_hits), mask_acc=_acc(lambda r: r.mask_hits),
        records=records)


# ---------------------------------------------------------------------------
# predictions file: one record per referral, masks run-length encoded


def rle_encode(mask) -> list:
    """Run lengths of a boolean mask, alternating values starting with False."""
    mask = np.asarray(mask, dtype=bool)
    runs = []
    value = False
    i = 0
    while i < mask.size:
        j = i
        while j < mask.size and mask[j] == value:
            j += 1
        runs.append(j - i)
        value = not value
        i = j
    if not runs:
        runs = [0]
    return runs


def rle_decode(runs, length: int) -> np.ndarray:
    if sum(runs) != length:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {length}")
    mask = np.zeros(length, dtype=bool)
    value = False
    pos = 0
    for run in runs:
        if value:
            mask[pos:pos + run] = True
        pos += run
        value = not value
    return mask


def save_predictions(path: str, predictions: dict, lengths: dict):
    """Write one JSON record per referral: scene id, referral index, RLE mask."""
    keys = sorted(predictions)
    with open(path, "w", encoding="utf-8") as fh:
        for key in keys:
            scene, ridx = key
            rec = {"scene": scene, "referral": ridx,
                   "length": lengths[scene], "rle": rle_encode(predictions[key])}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_predictions(path: str) -> dict:
    predictions = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            predictions[(rec["scene"], int(rec["referral"]))] = rle_decode(rec["rle"], int(rec["length"]))
    return predictions
