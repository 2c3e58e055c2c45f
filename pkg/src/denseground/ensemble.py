"""Multi-view ensembling over yaw-rotated copies of a scene.

Point clouds keep their point order under rotation, so per-view masks stay
index-aligned: aggregate by pairwise-IoU seeding, threshold filtering, and
pointwise majority vote.
"""

from __future__ import annotations

import numpy as np


def rotate_point_cloud(points6: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate xyz about the vertical axis through the scene centroid; rgb kept."""
    pc = np.asarray(points6, dtype=np.float64)
    if pc.ndim != 2 or pc.shape[1] != 6:
        raise ValueError(f"expected (N, 6) point cloud, got {pc.shape}")
    xyz = pc[:, :3]
    center = xyz.mean(axis=0)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = pc.copy()
    out[:, :3] = (xyz - center) @ rot.T + center
    return out


def pairwise_iou(masks: np.ndarray) -> np.ndarray:
    """K x K energy matrix of mask IoUs.

    Diagonal is defined as 1 even for empty masks; off-diagonal entries with
    an empty union are 0.
    """
    m = np.asarray(masks, dtype=bool)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"expected (K, N) masks with K >= 1, got {m.shape}")
    mi = m.astype(np.int64)
    inter = mi @ mi.T
    sizes = mi.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore"):
        e = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    np.fill_diagonal(e, 1.0)
    return e


def select_seed(energy: np.ndarray) -> int:
    """Index of the view agreeing most with the others (ties: lowest index)."""
    e = np.asarray(energy, dtype=np.float64)
    return int(np.argmax(e.sum(axis=1)))


def filter_valid(masks: np.ndarray, energy: np.ndarray, seed: int, threshold: float) -> np.ndarray:
    """Keep mask i iff energy[seed, i] > threshold."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError("mve threshold must lie in [0, 1); 1 would drop even the seed")
    keep = energy[seed] > threshold
    return np.asarray(masks, dtype=bool)[keep]


def majority_vote(valid_masks: np.ndarray) -> np.ndarray:
    """Point kept iff its count strictly exceeds half the valid views."""
    m = np.asarray(valid_masks, dtype=bool)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("majority_vote needs at least one mask")
    counts = m.sum(axis=0)
    return 2 * counts > m.shape[0]


def view_angles(views: int) -> np.ndarray:
    if views < 1:
        raise ValueError("need at least one view")
    return 2.0 * np.pi * np.arange(views) / views


def mve(points6: np.ndarray, predict, views: int = 5, threshold: float = 0.9) -> np.ndarray:
    """Full ensembling pass: rotate, predict per view, seed, filter, vote.

    `predict` maps an (N, 6) point cloud to a boolean mask over its points.
    Empty per-view predictions participate with their empty mask.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("mve threshold must lie in [0, 1); 1 would drop even the seed")
    preds = []
    for yaw in view_angles(views):
        rotated = rotate_point_cloud(points6, yaw)
        preds.append(np.asarray(predict(rotated), dtype=bool))
    preds = np.stack(preds, axis=0)
    energy = pairwise_iou(preds)
    seed = select_seed(energy)
    valid = filter_valid(preds, energy, seed, threshold)
    return majority_vote(valid)
