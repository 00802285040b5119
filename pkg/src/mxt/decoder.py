"""Causal decoder over F_A: teacher-forced loss and greedy generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .encoder import ModelConfig, attention, feed_forward, sub
from .model import Batch, Params, encode_inputs, make_batch
from .tensor import ContractError, Tensor, layer_norm, mean, reshape, scale, sequence_nll, transpose
from .text import BOS, EOS, DataError, detokenize, embed_and_position


@dataclass
class GenerationResult:
    tokens: list[int]
    text: str
    confidence: float
    per_token_logprobs: list[float] = field(default_factory=list)


def decoder_layer(y: Tensor, F_A: Tensor, p: Mapping[str, Tensor], h: int, enc_mask, prenorm: bool = False) -> Tensor:
    self_p, cross_p = sub(p, "self."), sub(p, "cross.")
    if prenorm:
        u = y + attention(layer_norm(y, p["ln1.g"], p["ln1.b"]), y, self_p, h, causal=True)
        u = u + attention(layer_norm(u, p["ln2.g"], p["ln2.b"]), F_A, cross_p, h, key_mask=enc_mask)
        return u + feed_forward(layer_norm(u, p["ln3.g"], p["ln3.b"]), p)
    u = layer_norm(y + attention(y, y, self_p, h, causal=True), p["ln1.g"], p["ln1.b"])
    u = layer_norm(u + attention(u, F_A, cross_p, h, key_mask=enc_mask), p["ln2.g"], p["ln2.b"])
    return layer_norm(u + feed_forward(u, p), p["ln3.g"], p["ln3.b"])


def decode_logits(prefix_ids, F_A: Tensor, params: Params, cfg: ModelConfig, enc_mask=None) -> Tensor:
    """Next-token logits for every prefix position, (B, T, V).

    The output projection reuses the input embedding matrix (scaled by
    d**-0.5), so all-zero parameters give uniform logits.
    """
    ids = np.asarray(prefix_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
        if F_A.ndim == 2:
            F_A = reshape(F_A, (1,) + F_A.shape)
        if enc_mask is not None:
            enc_mask = np.asarray(enc_mask)[None]
    if ids.shape[1] > cfg.max_target_len:
        raise ContractError(f"decoder prefix length {ids.shape[1]} exceeds max_target_len {cfg.max_target_len}")
    if not (ids[:, 0] == BOS).all():
        raise ContractError("decoder prefix must start with BOS")
    E = params["embed"]
    y = embed_and_position(ids, E, positions=cfg.positions)
    for k in range(cfg.L):
        y = decoder_layer(y, F_A, sub(params, f"dec.{k}."), cfg.h, enc_mask, cfg.prenorm)
    logits = scale(y, cfg.d ** -0.5) @ transpose(E)
    if squeeze:
        logits = reshape(logits, logits.shape[1:])
    return logits


def generation_loss(batch: Batch, params: Params, cfg: ModelConfig, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> Tensor:
    """Mean over the batch of per-example summed target NLL (teacher forcing)."""
    if batch.target_out is None or not batch.target_mask.any(axis=1).all():
        raise DataError("every example needs a nonempty target")
    F_A = encode_inputs(params, cfg, batch, mode=mode, rng=rng)
    logits = decode_logits(batch.target_in, F_A, params, cfg, enc_mask=batch.input_mask)
    return mean(sequence_nll(logits, batch.target_out, batch.target_mask))


def per_example_loss(batch: Batch, params: Params, cfg: ModelConfig) -> np.ndarray:
    F_A = encode_inputs(params, cfg, batch)
    logits = decode_logits(batch.target_in, F_A, params, cfg, enc_mask=batch.input_mask)
    return sequence_nll(logits, batch.target_out, batch.target_mask).data


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(batch: Batch, params: Params, cfg: ModelConfig, vocab=None,
                  max_target_len: int | None = None) -> list[GenerationResult]:
    """Batched greedy search.  Ties go to the lowest token id (``np.argmax``).

    Confidence is the mean log-probability of the emitted value tokens (EOS
    excluded); an immediate EOS yields the empty value with confidence 0.
    """
    T = max_target_len or cfg.max_target_len
    F_A = encode_inputs(params, cfg, batch)
    mask = batch.input_mask
    B = len(batch)
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(B)]
    logps: list[list[float]] = [[] for _ in range(B)]
    for _ in range(T):
        logits = decode_logits(prefix, F_A, params, cfg, enc_mask=mask).data[:, -1]
        lp = _log_softmax_np(logits)
        nxt = lp.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            tokens[i].append(int(nxt[i]))
            logps[i].append(float(lp[i, nxt[i]]))
            if nxt[i] == EOS:
                done[i] = True
        if done.all() or prefix.shape[1] >= T:
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)

    results = []
    for toks, lps in zip(tokens, logps):
        value_lps = [lp for t, lp in zip(toks, lps) if t != EOS]
        conf = float(np.mean(value_lps)) if value_lps else 0.0
        text = detokenize(toks, vocab) if vocab is not None else ""
        results.append(GenerationResult(toks, text, conf, lps))
    return results


def greedy_generate(input_ids, pixels, params: Params, cfg: ModelConfig, vocab=None,
                    max_target_len: int | None = None) -> GenerationResult:
    """Single-example greedy generation (see :func:`greedy_decode`)."""
    batch = make_batch([list(input_ids)], None if pixels is None else [pixels])
    return greedy_decode(batch, params, cfg, vocab, max_target_len)[0]
