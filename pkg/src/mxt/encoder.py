"""Multi-head attention and the post-norm transformer encoder stack.

Per-head projections are stored side by side: ``W_Q`` is (d_in, h*d_h) and
head k owns columns ``k*d_h:(k+1)*d_h``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import (DimensionError, Tensor, layer_norm, matmul, relu, reshape, scale, softmax, transpose)

NEG_INF = -1e9


@dataclass
class ModelConfig:
    L: int = 2
    d: int = 64
    h: int = 4
    d_ff: int = 128
    max_len: int = 64
    V: int = 0
    d_v: int = 16
    grid: int = 4
    image_size: int = 32
    conv_channels: Sequence[int] = (8, 16)
    max_target_len: int = 8
    beta: float = 1.0
    dropout: float = 0.1
    prenorm: bool = False
    positions: bool = True
    use_mag: bool = True
    use_xception: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        for k in ("L", "d", "h", "d_ff", "max_len", "d_v", "grid", "image_size", "max_target_len"):
            if getattr(self, k) <= 0:
                raise ValueError(f"ModelConfig.{k} must be positive")
        if self.d % self.h:
            raise ValueError(f"heads {self.h} must divide width {self.d}")
        if self.image_size % (2 * self.grid) and self.image_size % self.grid:
            raise ValueError(f"grid {self.grid} must divide image size {self.image_size}")

    @property
    def x(self) -> int:
        """Region embedding width (channels of the last separable block)."""
        return self.conv_channels[-1]

    @property
    def d_h(self) -> int:
        return self.d // self.h

    def to_dict(self) -> dict:
        out = asdict(self)
        out["conv_channels"] = list(self.conv_channels)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, N, d = x.shape
    return transpose(reshape(x, (B, N, h, d // h)), (0, 2, 1, 3))


def attention(q_in: Tensor, kv_in: Tensor, p: Mapping[str, Tensor], h: int,
              key_mask: np.ndarray | None = None, causal: bool = False,
              return_weights: bool = False):
    """Scaled dot-product multi-head attention, queries from ``q_in`` and
    keys/values from ``kv_in``; both (B, N, .) or unbatched (N, .).

    ``key_mask`` is boolean (B, Nk), True for real keys.  Masked scores are set
    to -1e9 before the softmax.
    """
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = reshape(q_in, (1,) + q_in.shape)
        kv_in = reshape(kv_in, (1,) + kv_in.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    W_Q, W_K, W_V, W_O = p["W_Q"], p["W_K"], p["W_V"], p["W_O"]
    if W_Q.shape[0] != q_in.shape[-1] or W_K.shape[0] != kv_in.shape[-1] or W_V.shape[0] != kv_in.shape[-1]:
        raise DimensionError(
            f"attention: query width {q_in.shape[-1]} / key width {kv_in.shape[-1]} vs "
            f"W_Q {W_Q.shape}, W_K {W_K.shape}, W_V {W_V.shape}")
    if W_Q.shape[1] % h:
        raise DimensionError(f"attention: {h} heads do not divide projection width {W_Q.shape[1]}")
    B, Nq, _ = q_in.shape
    Nk = kv_in.shape[1]
    dh = W_Q.shape[1] // h

    q = _split_heads(q_in @ W_Q, h)                          # B,h,Nq,dh
    k = transpose(reshape(kv_in @ W_K, (B, Nk, h, dh)), (0, 2, 3, 1))  # B,h,dh,Nk
    v = _split_heads(kv_in @ W_V, h)                         # B,h,Nk,dh
    scores = scale(matmul(q, k), 1.0 / np.sqrt(dh))

    bias = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km[:, None, None, :], 0.0, NEG_INF)
    if causal:
        c = np.where(np.tril(np.ones((Nq, Nk), dtype=bool)), 0.0, NEG_INF)[None, None]
        bias = c if bias is None else np.minimum(bias, c)
    if bias is not None:
        scores = scores + Tensor._wrap(np.broadcast_to(bias, scores.shape).astype(scores.dtype))
    weights = softmax(scores, axis=-1)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))        # B,Nq,h,dh
    out = reshape(ctx, (B, Nq, h * dh)) @ W_O
    if squeeze:
        out = reshape(out, out.shape[1:])
    if return_weights:
        return out, weights
    return out


def multi_head_self_attention(x: Tensor, p: Mapping[str, Tensor], h: int,
                              mask: np.ndarray | None = None) -> Tensor:
    return attention(x, x, p, h, key_mask=mask)


def feed_forward(u: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return relu(u @ p["W_1"] + p["b_1"]) @ p["W_2"] + p["b_2"]


def sub(p: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Parameters under ``prefix`` with the prefix stripped."""
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def encoder_layer(x: Tensor, p: Mapping[str, Tensor], h: int, mask: np.ndarray | None = None,
                  prenorm: bool = False) -> Tensor:
    """u = LN1(x + SA(x)); out = LN2(u + FC(u)).  ``prenorm`` moves each LN onto
    the sublayer input instead."""
    attn = sub(p, "attn.")
    if prenorm:
        u = x + multi_head_self_attention(layer_norm(x, p["ln1.g"], p["ln1.b"]), attn, h, mask)
        return u + feed_forward(layer_norm(u, p["ln2.g"], p["ln2.b"]), p)
    u = layer_norm(x + multi_head_self_attention(x, attn, h, mask), p["ln1.g"], p["ln1.b"])
    return layer_norm(u + feed_forward(u, p), p["ln2.g"], p["ln2.b"])


def encode(F_MAG: Tensor, layers: Sequence[Mapping[str, Tensor]], h: int, mask: np.ndarray | None = None,
           prenorm: bool = False) -> Tensor:
    if len(layers) < 1:
        raise ValueError("encoder needs at least one layer")
    out = F_MAG
    for lp in layers:
        out = encoder_layer(out, lp, h, mask, prenorm)
    return out
