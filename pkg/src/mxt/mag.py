"""Multimodal Adaptation Gate: shift each token embedding by a gated,
norm-clamped image displacement.

    g_i   = relu(W_g [T_i; V_R] + b_g)
    H_i   = g_i * (W_H V_R) + b_H                (elementwise gate)
    alpha = min(beta * |T_i| / |H_i|, 1)         (0 when |H_i| = 0)
    F_i   = dropout(LN(T_i + alpha * H_i))

Tensors may carry a leading batch axis: T is (B, N, d) and V_R is (B, d_v).
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import (DimensionError, ParameterError, Tensor, active_tape, concat, dropout, expand,
                     layer_norm, make_op, relu, reshape, transpose)


def _check(T: Tensor, V_R: Tensor, W: Tensor, name: str) -> None:
    d, dv = T.shape[-1], V_R.shape[-1]
    if T.ndim - 1 != V_R.ndim or T.shape[:-2] != V_R.shape[:-1]:
        raise DimensionError(f"{name}: text {T.shape} and image {V_R.shape} batch axes differ")
    if W.shape != (d, d + dv):
        raise DimensionError(f"{name}: weight {W.shape}, expected {(d, d + dv)}")


def _tokens_with_image(T: Tensor, V_R: Tensor) -> Tensor:
    return concat([T, expand(V_R, axis=-2, n=T.shape[-2])], axis=-1)


def mag_gate(T_emb: Tensor, V_R: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    _check(T_emb, V_R, p["W_g"], "mag_gate")
    return relu(_tokens_with_image(T_emb, V_R) @ transpose(p["W_g"]) + p["b_g"])


def mag_displacement(g: Tensor, V_R: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    W_H = p["W_H"]
    if W_H.shape != (g.shape[-1], V_R.shape[-1]):
        raise DimensionError(f"mag_displacement: W_H {W_H.shape} vs gate width {g.shape[-1]}, image {V_R.shape}")
    if V_R.ndim == 1:
        wv = reshape(reshape(V_R, (1, V_R.shape[0])) @ transpose(W_H), (W_H.shape[0],))
    else:
        wv = V_R @ transpose(W_H)
    return g * expand(wv, axis=-2, n=g.shape[-2]) + p["b_H"]


def alpha_values(T: np.ndarray, H: np.ndarray, beta: float) -> np.ndarray:
    """Per-row clamp factor; rows with |H| = 0 get 0."""
    tn = np.linalg.norm(T, axis=-1)
    hn = np.linalg.norm(H, axis=-1)
    safe = np.where(hn > 0, hn, 1.0)
    return np.where(hn > 0, np.minimum(beta * tn / safe, 1.0), 0.0)


def mag_shift(T: Tensor, H: Tensor, beta: float) -> Tensor:
    """T + alpha * H with the norm-ratio clamp, differentiable in both inputs."""
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if T.shape != H.shape:
        raise DimensionError(f"mag_shift: {T.shape} vs {H.shape}")
    t, h = T.data, H.data
    dt = np.result_type(t, h)
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    hz = hn == 0
    safe_h = np.where(hz, 1.0, hn)
    ratio = beta * tn / safe_h
    alpha = np.where(hz, 0.0, np.minimum(ratio, 1.0)).astype(dt)
    out = t + alpha * h

    tape = active_tape()
    if tape is not None and (T.requires_grad or H.requires_grad):
        live = ~hz
        if live.any():
            tape.note_kink(float(np.abs(ratio[live] - 1.0).min()))

    def bw(g):
        free = (~hz) & (ratio < 1.0)  # unclamped rows: alpha varies with T and H
        gh_dot = (g * h).sum(axis=-1, keepdims=True)
        safe_t = np.where(tn > 0, tn, 1.0)
        da_dT = np.where(free & (tn > 0), beta * t / (safe_t * safe_h), 0.0)
        da_dH = np.where(free, -alpha * h / (safe_h * safe_h), 0.0)
        gT = g + gh_dot * da_dT
        # |H| -> 0 puts alpha on the clamp (=1), so the one-sided derivative is the identity
        a_eff = np.where(hz & (tn > 0), 1.0, alpha)
        gH = a_eff * g + gh_dot * da_dH
        return gT.astype(dt, copy=False), gH.astype(dt, copy=False)

    return make_op(out.astype(dt, copy=False), (T, H), bw)


def mag_fuse(T_emb: Tensor, V_R: Tensor, p: Mapping[str, Tensor], beta: float = 1.0, mode: str = "eval",
             rate: float = 0.1, rng: np.random.Generator | None = None) -> Tensor:
    g = mag_gate(T_emb, V_R, p)
    H = mag_displacement(g, V_R, p)
    shifted = mag_shift(T_emb, H, beta)
    return dropout(layer_norm(shifted, p["ln.g"], p["ln.b"]), rate, mode, rng)


def concat_fusion(T_emb: Tensor, V_R: Tensor, p: Mapping[str, Tensor], mode: str = "eval",
                  rate: float = 0.1, rng: np.random.Generator | None = None) -> Tensor:
    """Without-MAG ablation: W_c [T_i; V_R] + b_c, then the same LN + dropout."""
    _check(T_emb, V_R, p["W_c"], "concat_fusion")
    h = _tokens_with_image(T_emb, V_R) @ transpose(p["W_c"]) + p["b_c"]
    return dropout(layer_norm(h, p["ln.g"], p["ln.b"]), rate, mode, rng)
