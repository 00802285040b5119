"""Parameter initialisation and the input side of the network:

    tokens -> embedding + positions -> MAG (or concat) with the global image
    vector -> encoder stack -> cross-attention over image regions -> F_A
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, encode, sub
from .fusion import fuse, fuse_ablated
from .image import global_encode, region_encode
from .mag import concat_fusion, mag_fuse
from .tensor import Tensor, dropout, layer_norm
from .text import BOS, PAD, embed_and_position

Params = dict[str, Tensor]


def fusion_mode(cfg: ModelConfig) -> str:
    """'mag', 'concat' (Without-MAG) or 'text' (no global image path at all)."""
    if cfg.use_mag:
        return "mag"
    return "concat" if cfg.use_xception else "text"


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def _attn(rng, prefix: str, d_q: int, d_kv: int, d: int) -> dict[str, np.ndarray]:
    return {
        prefix + "W_Q": _normal(rng, (d_q, d), d_q ** -0.5),
        prefix + "W_K": _normal(rng, (d_kv, d), d_kv ** -0.5),
        prefix + "W_V": _normal(rng, (d_kv, d), d_kv ** -0.5),
        prefix + "W_O": _normal(rng, (d, d), d ** -0.5),
    }


def _ln(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {prefix + "g": np.ones(d, np.float32), prefix + "b": np.zeros(d, np.float32)}


def _ff(rng, prefix: str, d: int, d_ff: int) -> dict[str, np.ndarray]:
    return {
        prefix + "W_1": _normal(rng, (d, d_ff), d ** -0.5),
        prefix + "b_1": np.zeros(d_ff, np.float32),
        prefix + "W_2": _normal(rng, (d_ff, d), d_ff ** -0.5),
        prefix + "b_2": np.zeros(d, np.float32),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Fresh parameters for ``cfg``; only the paths the config uses are created."""
    rng = np.random.default_rng(seed)
    d, dv = cfg.d, cfg.d_v
    c1, c2 = cfg.conv_channels
    raw: dict[str, np.ndarray] = {"embed": _normal(rng, (cfg.V, d), 1.0)}

    mode = fusion_mode(cfg)
    if mode != "text":
        raw.update({
            "img.conv1.w": _normal(rng, (c1, 3, 3, 3), (2 / 27) ** 0.5),
            "img.conv1.b": np.zeros(c1, np.float32),
            "img.conv2.w": _normal(rng, (c2, c1, 3, 3), (2 / (9 * c1)) ** 0.5),
            "img.conv2.b": np.zeros(c2, np.float32),
            "img.proj.w": _normal(rng, (c2, dv), c2 ** -0.5),
            "img.proj.b": np.zeros(dv, np.float32),
        })
    if mode == "mag":
        raw.update({
            "mag.W_g": _normal(rng, (d, d + dv), (d + dv) ** -0.5),
            "mag.b_g": np.zeros(d, np.float32),
            "mag.W_H": _normal(rng, (d, dv), dv ** -0.5),
            "mag.b_H": np.zeros(d, np.float32),
            **_ln("mag.ln.", d),
        })
    else:
        W_c = _normal(rng, (d, d + dv), (d + dv) ** -0.5) if mode == "concat" else _normal(rng, (d, d), d ** -0.5)
        raw.update({"concat.W_c": W_c, "concat.b_c": np.zeros(d, np.float32), **_ln("concat.ln.", d)})

    for k in range(cfg.L):
        pre = f"enc.{k}."
        raw.update(_attn(rng, pre + "attn.", d, d, d))
        raw.update(_ff(rng, pre, d, cfg.d_ff))
        raw.update(_ln(pre + "ln1.", d))
        raw.update(_ln(pre + "ln2.", d))

    if cfg.use_xception:
        raw.update({
            "xcp.block1.dw": _normal(rng, (3, 3, 3), (2 / 9) ** 0.5),
            "xcp.block1.pw.w": _normal(rng, (c1, 3), (2 / 3) ** 0.5),
            "xcp.block1.pw.b": np.zeros(c1, np.float32),
            "xcp.block2.dw": _normal(rng, (c1, 3, 3), (2 / 9) ** 0.5),
            "xcp.block2.pw.w": _normal(rng, (c2, c1), (2 / c1) ** 0.5),
            "xcp.block2.pw.b": np.zeros(c2, np.float32),
        })
        raw.update(_attn(rng, "fuse.", d, cfg.x, d))
        raw.update(_ln("fuse.ln.", d))

    for k in range(cfg.L):
        pre = f"dec.{k}."
        raw.update(_attn(rng, pre + "self.", d, d, d))
        raw.update(_attn(rng, pre + "cross.", d, d, d))
        raw.update(_ff(rng, pre, d, cfg.d_ff))
        for j in (1, 2, 3):
            raw.update(_ln(pre + f"ln{j}.", d))

    return {k: Tensor(v, requires_grad=True, name=k) for k, v in sorted(raw.items())}


@dataclass
class Batch:
    input_ids: np.ndarray      # (B, N) int, PAD-padded
    pixels: np.ndarray | None  # (B, 3, S, S) float in [0, 1]
    target_in: np.ndarray | None = None   # (B, T) BOS-shifted targets
    target_out: np.ndarray | None = None  # (B, T) targets ending in EOS
    target_mask: np.ndarray | None = None

    @property
    def input_mask(self) -> np.ndarray:
        return self.input_ids != PAD

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def make_batch(input_ids, pixels=None, targets=None) -> Batch:
    """Pad variable-length id lists into a :class:`Batch`.

    ``targets`` are id lists already ending in EOS.
    """
    B = len(input_ids)
    N = max(len(s) for s in input_ids)
    ids = np.full((B, N), PAD, dtype=np.int64)
    for i, s in enumerate(input_ids):
        ids[i, : len(s)] = s
    px = None if pixels is None else np.stack(pixels).astype(np.float32)
    batch = Batch(ids, px)
    if targets is not None:
        T = max(len(t) for t in targets)
        tin = np.full((B, T), PAD, dtype=np.int64)
        tout = np.full((B, T), PAD, dtype=np.int64)
        for i, t in enumerate(targets):
            tout[i, : len(t)] = t
            tin[i, 0] = BOS
            tin[i, 1: len(t)] = t[:-1]
        batch.target_in, batch.target_out, batch.target_mask = tin, tout, tout != PAD
    return batch


def encode_inputs(params: Params, cfg: ModelConfig, batch: Batch, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Run the input side of the network and return F_A, shape (B, N, d)."""
    T_emb = embed_and_position(batch.input_ids, params["embed"], positions=cfg.positions)
    fmode = fusion_mode(cfg)
    px = None
    if fmode != "text" or cfg.use_xception:
        px = Tensor._wrap(batch.pixels)
    if fmode == "mag":
        V_R = global_encode(px, sub(params, "img."))
        F_MAG = mag_fuse(T_emb, V_R, sub(params, "mag."), beta=cfg.beta, mode=mode, rate=cfg.dropout, rng=rng)
    elif fmode == "concat":
        V_R = global_encode(px, sub(params, "img."))
        F_MAG = concat_fusion(T_emb, V_R, sub(params, "concat."), mode=mode, rate=cfg.dropout, rng=rng)
    else:
        cp = sub(params, "concat.")
        F_MAG = dropout(layer_norm(T_emb @ cp["W_c"].T + cp["b_c"], cp["ln.g"], cp["ln.b"]),
                        cfg.dropout, mode, rng)

    layers = [sub(params, f"enc.{k}.") for k in range(cfg.L)]
    T_enc = encode(F_MAG, layers, cfg.h, mask=batch.input_mask, prenorm=cfg.prenorm)
    if not cfg.use_xception:
        return fuse_ablated(T_enc)
    V_X = region_encode(px, sub(params, "xcp."), grid=cfg.grid)
    return fuse(T_enc, V_X, sub(params, "fuse."), cfg.h)
