"""Bottom-up attentive fusion of instance candidates with word embeddings.

Candidate tokens self-attend under spherical locality masks whose radius
grows every other layer, cross-attend to words, and pass through a
feed-forward block, all pre-normalized with residuals. A learned camera
token rides along as a globally attended extra slot and is regressed onto
the annotation camera position. Per-layer outputs are fused by an MLP into
final embeddings that drive the selection head and the contrastive loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .layers import apply_ffn, apply_layer_norm, attend, make_ffn, make_layer_norm, make_linear, make_weight
from .metrics import hungarian, mask_iou


def build_spherical_mask(centroids: np.ndarray, radius: float, camera_slot: bool = True) -> np.ndarray:
    """Additive mask: 0 where centroids lie strictly within `radius`, else NEG_INF.

    The camera slot, when present, is the last row/column and is fully
    unmasked in both directions. radius=inf yields an all-zero mask.
    """
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (I, 3) centroids, got {c.shape}")
    if not (radius > 0.0):
        raise ValueError("masking radius must be positive (or infinite)")
    n = c.shape[0]
    size = n + 1 if camera_slot else n
    mask = np.zeros((size, size))
    if not math.isinf(radius):
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        mask[:n, :n] = np.where(d < radius, 0.0, NEG_INF)
        np.fill_diagonal(mask[:n, :n], 0.0)
    return mask


class FusionDecoder:
    def __init__(self, rng, dim: int = 128, heads: int = 4, layers: int = 6,
                 ffn_dim: int = 256, radii=(1.0, 2.5, math.inf), use_gct: bool = True):
        if layers != 2 * len(radii):
            raise ValueError("radii schedule must cover the layers in pairs")
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.radii = tuple(float(r) for r in radii)
        self.use_gct = use_gct
        p: dict = {}
        if use_gct:
            p["camera_token"] = Tensor(ad.xavier_uniform(1, dim, rng, shape=(1, dim)), requires_grad=True)
        for l in range(layers):
            pre = f"dec{l}"
            make_layer_norm(p, f"{pre}.ln_sa", dim)
            make_weight(p, f"{pre}.sa.wq", dim, dim, rng)
            make_weight(p, f"{pre}.sa.wk", dim, dim, rng)
            make_weight(p, f"{pre}.sa.wv", dim, dim, rng)
            make_layer_norm(p, f"{pre}.ln_ca", dim)
            make_weight(p, f"{pre}.ca.wq", dim, dim, rng)
            make_weight(p, f"{pre}.ca.wk", dim, dim, rng)
            make_weight(p, f"{pre}.ca.wv", dim, dim, rng)
            make_layer_norm(p, f"{pre}.ln_ff", dim)
            make_ffn(p, f"{pre}.ffn", dim, ffn_dim, rng)
        make_linear(p, "fuse.fc1", layers * dim, dim, rng)
        make_linear(p, "fuse.fc2", dim, dim, rng)
        make_linear(p, "select", dim, 1, rng)
        if use_gct:
            make_linear(p, "camera_head", dim, 3, rng)
        self.params = p

    def layer_radius(self, layer: int) -> float:
        return self.radii[layer // 2]

    def self_attention_sublayer(self, layer: int, tokens: Tensor, mask) -> Tensor:
        """Masked self-attention with residual (the locality-bearing sublayer)."""
        p = self.params
        pre = f"dec{layer}"
        h = apply_layer_norm(p, f"{pre}.ln_sa", tokens)
        return ad.add(tokens, attend(h, h, mask, p[f"{pre}.sa.wq"], p[f"{pre}.sa.wk"],
                                     p[f"{pre}.sa.wv"], self.heads))

    def baf_layer(self, layer: int, tokens: Tensor, words: Tensor, word_mask, self_mask) -> Tensor:
        p = self.params
        pre = f"dec{layer}"
        tokens = self.self_attention_sublayer(layer, tokens, self_mask)
        h = apply_layer_norm(p, f"{pre}.ln_ca", tokens)
        tokens = ad.add(tokens, attend(h, words, word_mask, p[f"{pre}.ca.wq"],
                                       p[f"{pre}.ca.wk"], p[f"{pre}.ca.wv"], self.heads))
        h = apply_layer_norm(p, f"{pre}.ln_ff", tokens)
        return ad.add(tokens, apply_ffn(p, f"{pre}.ffn", h))


@dataclass
class FusionState:
    per_layer: list          # token tensors after each decoder layer
    final: Tensor            # (T, L) multi-scale fused embeddings
    u: Tensor                # (I,) selection logits
    t: Tensor | None         # (3,) camera prediction when the camera token is active
    candidate_embeddings: Tensor  # (I, L) language-aware instance embeddings


def baf_forward(decoder: FusionDecoder, e_i: Tensor, centroids: np.ndarray,
                words, use_baf: bool = True) -> FusionState:
    """Run the full decoder over candidate tokens plus the camera token."""
    n = e_i.data.shape[0]
    if n < 1:
        raise ValueError("fusion requires at least one candidate")
    p = decoder.params
    use_gct = decoder.use_gct
    tokens = ad.concat([e_i, p["camera_token"]], axis=0) if use_gct else e_i
    size = n + 1 if use_gct else n
    word_mask = np.broadcast_to(
        np.where(words.padding[None, :], 0.0, NEG_INF), (size, words.padding.size)).copy()

    masks = {}
    per_layer = []
    for l in range(decoder.layers):
        radius = decoder.layer_radius(l) if use_baf else math.inf
        if radius not in masks:
            masks[radius] = build_spherical_mask(centroids, radius, camera_slot=use_gct)
        tokens = decoder.baf_layer(l, tokens, words.e_w, word_mask, masks[radius])
        per_layer.append(tokens)

    multi = ad.concat(per_layer, axis=1)
    final = ad.linear(ad.relu(ad.linear(multi, p["fuse.fc1.w"], p["fuse.fc1.b"])),
                      p["fuse.fc2.w"], p["fuse.fc2.b"])
    cand = ad.gather_rows(final, np.arange(n))
    u = ad.reshape(ad.linear(cand, p["select.w"], p["select.b"]), (n,))
    t = None
    if use_gct:
        cam_row = ad.gather_rows(final, [n])
        t = ad.reshape(ad.linear(cam_row, p["camera_head.w"], p["camera_head.b"]), (3,))
    return FusionState(per_layer=per_layer, final=final, u=u, t=t, candidate_embeddings=cand)


def select(u: np.ndarray, masks) -> tuple:
    """Pick the mask of the highest-scoring candidate (ties: lowest index)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size != len(masks) or u.size < 1:
        raise ValueError("scores and masks must align and be non-empty")
    idx = int(np.argmax(u))
    return idx, masks[idx]


def selection_target(candidate_masks, gt_mask) -> int | None:
    """Assign the referred ground-truth mask to a candidate by max IoU.

    Solved through the assignment routine over the negated IoU column so the
    same machinery extends to multi-target matching. Returns None when every
    candidate has zero overlap (the referral is unmatched).
    """
    if len(candidate_masks) < 1:
        raise ValueError("need at least one candidate")
    ious = np.array([mask_iou(m, gt_mask) for m in candidate_masks])
    if float(ious.max()) == 0.0:
        return None
    pairs = hungarian(-ious.reshape(-1, 1))
    return int(pairs[0][0])


def contrastive_loss(e_s: Tensor, candidate_embeddings: Tensor, k_plus: int, tau: float) -> Tensor:
    """Pull the sentence embedding toward the matched candidate, push the rest."""
    n = candidate_embeddings.data.shape[0]
    if not 0 <= k_plus < n:
        raise ValueError(f"positive index {k_plus} out of range for {n} candidates")
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    sims = []
    dim = candidate_embeddings.data.shape[1]
    for k in range(n):
        row = ad.reshape(ad.gather_rows(candidate_embeddings, [k]), (dim,))
        sims.append(ad.reshape(ad.cosine_similarity(e_s, row), (1, 1)))
    logits = ad.mul(ad.concat(sims, axis=1), 1.0 / tau)
    return ad.cross_entropy(logits, [k_plus])


def camera_loss(t: Tensor, t_hat) -> Tensor:
    return ad.l2_loss(t, ad.as_tensor(np.asarray(t_hat, dtype=np.float64)))


def grounding_loss(state: FusionState, target_index: int | None, e_s: Tensor | None,
                   camera_gt, lambda_con: float = 1.0, lambda_cam: float = 0.1,
                   tau: float = 0.3, use_contrastive: bool = True) -> tuple:
    """Selection + contrastive + camera terms for one referral.

    Unmatched referrals (target_index None) contribute neither the selection
    nor the contrastive term. Returns (total, components dict).
    """
    parts = {}
    total = ad.as_tensor(0.0)
    n = state.u.data.shape[0]
    if target_index is not None:
        l_sel = ad.cross_entropy(ad.reshape(state.u, (1, n)), [target_index])
        parts["sel"] = l_sel
        total = ad.add(total, l_sel)
        if use_contrastive and e_s is not None:
            l_con = contrastive_loss(e_s, state.candidate_embeddings, target_index, tau)
            parts["con"] = l_con
            total = ad.add(total, ad.mul(l_con, lambda_con))
    if state.t is not None:
        l_cam = camera_loss(state.t, camera_gt)
        parts["cam"] = l_cam
        total = ad.add(total, ad.mul(l_cam, lambda_cam))
    return total, parts
