"""Parameter-dict helpers and the shared attention block.

Attention follows the residual form used throughout the pipeline: the
sublayer output is softmax(mask + q k^T / sqrt(d)) v, heads concatenated,
with no output projection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def make_weight(params: dict, name: str, fan_in: int, fan_out: int, rng):
    params[name] = Tensor(ad.xavier_uniform(fan_in, fan_out, rng), requires_grad=True)


def make_linear(params: dict, name: str, fan_in: int, fan_out: int, rng):
    make_weight(params, name + ".w", fan_in, fan_out, rng)
    params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def apply_linear(params: dict, name: str, x: Tensor) -> Tensor:
    return ad.linear(x, params[name + ".w"], params[name + ".b"])


def make_layer_norm(params: dict, name: str, dim: int):
    params[name + ".g"] = Tensor(np.ones(dim), requires_grad=True)
    params[name + ".b"] = Tensor(np.zeros(dim), requires_grad=True)


def apply_layer_norm(params: dict, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[name + ".g"], params[name + ".b"])


def attend(q_in: Tensor, kv_in: Tensor, additive_mask, wq: Tensor, wk: Tensor, wv: Tensor,
           heads: int) -> Tensor:
    """Scaled dot-product attention of q_in over kv_in under an additive mask."""
    q = ad.matmul(q_in, wq)
    k = ad.matmul(kv_in, wk)
    v = ad.matmul(kv_in, wv)
    return ad.attention(q, k, v, additive_mask, heads=heads)


def apply_ffn(params: dict, name: str, x: Tensor) -> Tensor:
    h = ad.relu(apply_linear(params, name + ".fc1", x))
    return apply_linear(params, name + ".fc2", h)


def make_ffn(params: dict, name: str, dim: int, hidden: int, rng):
    make_linear(params, name + ".fc1", dim, hidden, rng)
    make_linear(params, name + ".fc2", hidden, dim, rng)
