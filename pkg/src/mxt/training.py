"""Adam with linear warmup/decay, the epoch loop with best-validation
checkpointing, and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"MXTCKPT1" | u64 header length | UTF-8 JSON header | float32 payload

The header maps each tensor name to ``{"shape", "offset", "nbytes"}`` (offsets
relative to the payload start, tensors ordered by name) plus a ``"meta"`` entry.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import EncodedExample, batches
from .decoder import generation_loss, per_example_loss
from .encoder import ModelConfig
from .mag import concat_fusion  # noqa: F401  (Without-MAG path, re-exported)
from .model import Params, init_params
from .tensor import ContractError, Tape, Tensor
from .text import Vocabulary

log = logging.getLogger(__name__)

MAGIC = b"MXTCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_base: float = 5e-5
    lr_multiplier: float = 20.0
    warmup_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_mag: bool = True
    use_xception: bool = True
    pt_filter: list[str] | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.warmup_ratio < 1:
            raise ValueError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def lr_peak(self) -> float:
        return self.lr_base * self.lr_multiplier

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**dict(d))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over the warmup steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_ratio * total_steps
    if step < warm:
        return cfg.lr_peak * step / warm
    if total_steps == warm:
        return cfg.lr_peak
    return cfg.lr_peak * (total_steps - step) / (total_steps - warm)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[k].data``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr == 0.0:
            continue
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: Params
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def val_loss(self) -> float:
        return float(self.meta.get("val_loss", math.nan))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name].data, dtype="<f4")
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    meta = dict(ckpt.meta)
    meta["config"] = ckpt.config.to_dict()
    header["meta"] = meta
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointFormatError("not an MXT checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointFormatError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
    payload = raw[16 + n:]
    meta = header.pop("meta", {})
    params = {}
    for name in sorted(header):
        ent = header[name]
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CheckpointFormatError(f"tensor {name} extends past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").astype(np.float32).reshape(ent["shape"])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    cfg = ModelConfig.from_dict(meta.pop("config", {}))
    return Checkpoint(params, cfg, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int


def evaluate_loss(examples: list[EncodedExample], params: Params, cfg: ModelConfig,
                  batch_size: int = 64) -> float:
    """Mean per-example summed NLL in eval mode."""
    total, n = 0.0, 0
    for b in batches(examples, batch_size):
        total += float(per_example_loss(b, params, cfg).astype(np.float64).sum())
        n += len(b)
    return total / max(n, 1)


def model_config_for(cfg: TrainConfig, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(**{**cfg.model, "V": len(vocab), "use_mag": cfg.use_mag, "use_xception": cfg.use_xception})


def _snapshot(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def train(train_set: list[EncodedExample], val_set: list[EncodedExample], vocab: Vocabulary,
          cfg: TrainConfig, callback=None) -> TrainResult:
    """Train from scratch and return the epoch checkpoint with the lowest
    validation loss.  Deterministic for fixed inputs and ``cfg.seed``."""
    if cfg.pt_filter:
        keep = set(cfg.pt_filter)
        train_set = [e for e in train_set if e.product_type in keep]
        val_set = [e for e in val_set if e.product_type in keep]
    if not train_set or not val_set:
        raise TrainingError("training and validation splits must be nonempty")

    mcfg = model_config_for(cfg, vocab)
    params = init_params(mcfg, cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState()

    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    best: tuple[float, int, Params] | None = None
    train_losses, val_losses = [], []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_set))
        running = 0.0
        for b in batches([train_set[i] for i in order], cfg.batch_size):
            step += 1
            with Tape() as tape:
                loss = generation_loss(b, params, mcfg, mode="train", rng=drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            tape.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr_at(step, total, cfg),
                      cfg.beta1, cfg.beta2, cfg.eps)
            for p in params.values():
                p.grad = None
            running += value
        train_losses.append(running / steps_per_epoch)
        val = evaluate_loss(val_set, params, mcfg)
        val_losses.append(val)
        log.info("epoch %d  train %.4f  val %.4f", epoch + 1, train_losses[-1], val)
        if callback is not None:
            callback(epoch, train_losses[-1], val)
        if best is None or val < best[0]:
            best = (val, step, _snapshot(params))

    val, best_step, best_params = best
    meta = {
        "step": best_step,
        "val_loss": val,
        "vocab_hash": vocab.digest(),
        "train_config": copy.deepcopy(cfg.to_dict()),
    }
    return TrainResult(Checkpoint(best_params, mcfg, meta), train_losses, val_losses,
                       best_epoch=int(np.argmin(val_losses)))


def train_steps(examples: Iterable[EncodedExample], params: Params, mcfg: ModelConfig, cfg: TrainConfig,
                steps: int, state: AdamState | None = None, lr: float | None = None) -> list[float]:
    """Run ``steps`` updates cycling over one fixed batch of ``examples``
    (used for overfitting checks); returns the loss trajectory."""
    examples = list(examples)
    b = next(iter(batches(examples, len(examples))))
    state = state or AdamState()
    rng = np.random.default_rng([cfg.seed, 2])
    losses = []
    for s in range(1, steps + 1):
        with Tape() as tape:
            loss = generation_loss(b, params, mcfg, mode="train", rng=rng)
        tape.backward(loss)
        rate = lr if lr is not None else lr_at(s, steps, cfg)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, rate, cfg.beta1, cfg.beta2, cfg.eps)
        for p in params.values():
            p.grad = None
        losses.append(loss.item())
    return losses
