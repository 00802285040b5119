"""Attribute-aware text-image fusion: text tokens attend over image regions."""
from __future__ import annotations

from typing import Mapping

from .encoder import attention
from .tensor import Tensor, layer_norm


def fuse(T_enc: Tensor, V_X: Tensor, p: Mapping[str, Tensor], h: int, return_weights: bool = False):
    """F_A = LN(T_enc + W_O-projected cross-attention of T_enc over V_X rows).

    T_enc is (N, d) or (B, N, d); V_X is (R, x) or (B, R, x).  Queries come
    from text, keys and values from regions, so F_A has the shape of T_enc.
    """
    attended, weights = attention(T_enc, V_X, p, h, return_weights=True)
    F_A = layer_norm(T_enc + attended, p["ln.g"], p["ln.b"])
    return (F_A, weights) if return_weights else F_A


def fuse_ablated(T_enc: Tensor, mode: str = "identity") -> Tensor:
    """Without-Xception path: the encoder output passes through untouched."""
    if mode != "identity":
        raise ValueError(f"unknown ablation mode {mode!r}")
    return T_enc
