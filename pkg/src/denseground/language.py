"""Referral encoding: token embeddings, a small transformer encoder, pooling.

Word ids come from the fixed vocabulary in `scenes`. Padding positions are
masked out of attention and pooling, so real-token outputs are independent of
how far a sequence is padded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .layers import apply_ffn, apply_layer_norm, attend, make_ffn, make_layer_norm, make_weight, make_linear


@dataclass
class WordEncoding:
    e_w: Tensor              # (W, L) contextualized embeddings
    padding: np.ndarray      # (W,) bool, True = real token


class VerbalEncoder:
    def __init__(self, rng, vocab_size: int, dim: int = 128, heads: int = 4,
                 layers: int = 2, ffn_dim: int = 256, max_len: int = 32):
        self.vocab_size = vocab_size
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.max_len = max_len
        p: dict = {}
        p["tok_emb"] = Tensor(ad.xavier_uniform(vocab_size, dim, rng), requires_grad=True)
        p["pos_emb"] = Tensor(ad.xavier_uniform(max_len, dim, rng), requires_grad=True)
        for l in range(layers):
            pre = f"enc{l}"
            make_layer_norm(p, f"{pre}.ln1", dim)
            make_weight(p, f"{pre}.wq", dim, dim, rng)
            make_weight(p, f"{pre}.wk", dim, dim, rng)
            make_weight(p, f"{pre}.wv", dim, dim, rng)
            make_layer_norm(p, f"{pre}.ln2", dim)
            make_ffn(p, f"{pre}.ffn", dim, ffn_dim, rng)
        make_linear(p, "proj", dim, dim, rng)
        self.params = p

    def encode(self, tokens, pad_to: int | None = None) -> WordEncoding:
        """Contextualize a token sequence; optionally pad to a fixed length."""
        tokens = list(tokens)
        if not tokens:
            raise ValueError("cannot encode an empty token sequence")
        if any(t < 0 or t >= self.vocab_size for t in tokens):
            raise ValueError("unknown token id outside the vocabulary")
        width = len(tokens) if pad_to is None else pad_to
        if width < len(tokens):
            raise ValueError("pad_to is shorter than the sequence")
        if width > self.max_len:
            raise ValueError(f"sequence length {width} exceeds the maximum {self.max_len}")
        padding = np.zeros(width, dtype=bool)
        padding[:len(tokens)] = True
        ids = tokens + [0] * (width - len(tokens))

        p = self.params
        x = ad.add(ad.gather_rows(p["tok_emb"], ids),
                   ad.gather_rows(p["pos_emb"], np.arange(width)))
        attn_mask = np.where(padding[None, :], 0.0, NEG_INF)
        attn_mask = np.broadcast_to(attn_mask, (width, width)).copy()
        for l in range(self.layers):
            pre = f"enc{l}"
            h = apply_layer_norm(p, f"{pre}.ln1", x)
            x = ad.add(x, attend(h, h, attn_mask, p[f"{pre}.wq"], p[f"{pre}.wk"], p[f"{pre}.wv"], self.heads))
            h = apply_layer_norm(p, f"{pre}.ln2", x)
            x = ad.add(x, apply_ffn(p, f"{pre}.ffn", h))
        e_w = ad.linear(x, p["proj.w"], p["proj.b"])
        return WordEncoding(e_w=e_w, padding=padding)


def sentence_embedding(enc: WordEncoding) -> Tensor:
    """Masked mean of the final word embeddings."""
    if not enc.padding.any():
        raise ValueError("sentence embedding of a fully padded sequence")
    return ad.masked_mean_pool(enc.e_w, enc.padding)


def noun_mask_augment(tokens, noun_positions, prob: float, rng, mask_id: int) -> list:
    """With probability `prob`, replace the referred noun tokens by the mask id.

    Training-time augmentation only; the coin is flipped once per referral.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    tokens = list(tokens)
    if prob > 0.0 and rng.random() < prob:
        for i in noun_positions:
            tokens[i] = mask_id
    return tokens
