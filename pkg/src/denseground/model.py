"""Full grounding model: backbone + verbal encoder + fusion, plus inference."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, generate_candidates, neighbor_matrix, scene_inputs
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .ensemble import mve
from .fusion import FusionDecoder, baf_forward
from .language import VerbalEncoder
from .scenes import CLASSES, VOCAB


class GroundingModel:
    def __init__(self, config: RunConfig, rng=None):
        self.config = config
        mc = config.model
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
        self.backbone = Backbone(rng, num_classes=len(CLASSES), feature_dim=mc.feature_dim,
                                 instance_dim=mc.embed_dim, mask_hidden=mc.mask_hidden)
        self.verbal = VerbalEncoder(rng, vocab_size=len(VOCAB), dim=mc.embed_dim, heads=mc.heads,
                                    layers=mc.encoder_layers, ffn_dim=mc.ffn_dim,
                                    max_len=mc.max_tokens)
        self.fusion = FusionDecoder(rng, dim=mc.embed_dim, heads=mc.heads,
                                    layers=mc.decoder_layers, ffn_dim=mc.ffn_dim,
                                    radii=mc.radii, use_gct=config.use_gct)

    def named_parameters(self) -> dict:
        out = {}
        for prefix, module in (("backbone", self.backbone), ("verbal", self.verbal),
                               ("fusion", self.fusion)):
            for name, tensor in module.params.items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    # ------------------------------------------------------------------
    # forward paths

    def forward_scene(self, points: np.ndarray, colors: np.ndarray,
                      instance_id: np.ndarray | None = None,
                      near: np.ndarray | None = None):
        mc = self.config.model
        feats = self.backbone.extract_features(scene_inputs(points, colors))
        candidates, merge_info = generate_candidates(
            self.backbone, feats, np.asarray(points, dtype=np.float64),
            window=mc.seed_window, merge_radius=mc.merge_radius,
            merge_threshold=mc.merge_threshold, min_heat=mc.seed_min_heat,
            cap=mc.candidate_cap, instance_id=instance_id, near=near)
        return feats, candidates, merge_info

    def forward_referral(self, candidates, tokens, pad_to: int | None = None):
        enc = self.verbal.encode(tokens, pad_to=pad_to)
        e_i = ad.concat([ad.reshape(c.embedding, (1, -1)) for c in candidates], axis=0)
        centroids = np.stack([c.centroid for c in candidates], axis=0)
        state = baf_forward(self.fusion, e_i, centroids, enc, use_baf=self.config.use_baf)
        return state, enc

    def predict(self, points6: np.ndarray, tokens, near: np.ndarray | None = None) -> np.ndarray:
        """Single-view inference: boolean mask of the selected candidate."""
        pc = np.asarray(points6, dtype=np.float64)
        with ad.no_grad():
            _, candidates, _ = self.forward_scene(pc[:, :3], pc[:, 3:], near=near)
            if not candidates:
                return np.zeros(pc.shape[0], dtype=bool)
            state, _ = self.forward_referral(candidates, tokens)
            idx = int(np.argmax(state.u.data))
            return candidates[idx].mask.copy()

    def predict_ensembled(self, points6: np.ndarray, tokens, views: int | None = None,
                          threshold: float | None = None,
                          near: np.ndarray | None = None) -> np.ndarray:
        """Multi-view inference over yaw rotations of the scene."""
        views = self.config.mve.views if views is None else views
        threshold = self.config.mve.threshold if threshold is None else threshold
        # the seeding adjacency is rotation-invariant, reuse it across views
        if near is None:
            near = neighbor_matrix(points6[:, :3], self.config.model.seed_window)
        return mve(np.asarray(points6, dtype=np.float64),
                   lambda pc: self.predict(pc, tokens, near=near), views=views, threshold=threshold)

    # ------------------------------------------------------------------
    # persistence

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {tensor.data.shape} vs {arrays[name].shape}")
            tensor.data = arrays[name].astype(np.float64).copy()


def save_model(path: str, model: GroundingModel, extra_metadata: dict | None = None):
    meta = {"config": model.config.to_dict()}
    if extra_metadata:
        meta.update(extra_metadata)
    save_checkpoint(path, model.state_arrays(), meta)


def load_model(path: str) -> tuple:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    arrays, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError("checkpoint carries no config snapshot")
    config = RunConfig.from_dict(meta["config"])
    model = GroundingModel(config)
    model.load_state_arrays(arrays)
    return model, meta
