"""Prompt rendering, word-level vocabulary, tokenisation and input embedding."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, add, take_rows

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 64

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class DataError(ValueError):
    """Input data is empty or malformed."""


@dataclass
class PromptExample:
    attribute_name: str
    product_type: str
    text: str
    image_ref: str | None = None
    target_value: str | None = None
    id: str = ""

    def __post_init__(self):
        if not self.attribute_name or not self.product_type:
            raise DataError("attribute_name and product_type must be nonempty")

    @property
    def labeled(self) -> bool:
        return self.target_value is not None


def render_prompt(ex: PromptExample) -> str:
    return f"attribute: {ex.attribute_name} | product type: {ex.product_type} | context: {ex.text}"


def words(s: str) -> list[str]:
    """Lowercased word and single-punctuation tokens."""
    return _WORD.findall(s.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + [t for t in tokens]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode_words(self, ws: Iterable[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in ws]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos[len(RESERVED):])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n")[:-1]] if text else [])

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpus: Iterable[PromptExample], max_size: int = 10_000) -> Vocabulary:
    """Most frequent words first, ties broken lexicographically.

    Counts words of the rendered prompt and the target value, so every label
    in the corpus is generatable.
    """
    counts: Counter[str] = Counter()
    seen = False
    for ex in corpus:
        seen = True
        counts.update(words(render_prompt(ex)))
        if ex.target_value:
            counts.update(words(ex.target_value))
    if not seen:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = max(max_size - len(RESERVED), 0)
    return Vocabulary([w for w, _ in ranked[:room]])


def tokenize(s: str, v: Vocabulary, max_len: int = MAX_LEN) -> list[int]:
    """Word ids for ``s``, right-truncated to ``max_len``.

    Rendered prompts put the question first and the free-text context last, so
    right truncation only ever removes context.
    """
    return v.encode_words(words(s))[:max_len]


def detokenize(ids: Iterable[int], v: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(v.itos[i] if i < len(v) else RESERVED[UNK])
    return " ".join(out)


def encode_target(value: str, v: Vocabulary, max_target_len: int = 8) -> list[int]:
    """Target ids ending in EOS; words past ``max_target_len - 1`` are dropped."""
    ids = v.encode_words(words(value))[: max_target_len - 1]
    if not ids:
        raise DataError(f"empty target value {value!r}")
    return ids + [EOS]


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """(n, d) table; even dims carry sin, odd dims cos, of pos / 10000^(2i/d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(np.float32)


def embed_and_position(ids, E: Tensor, positions: bool = True) -> Tensor:
    """Embedding rows plus fixed sinusoidal positions.

    ``ids`` is (N,) or (B, N); output is (..., N, d).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= E.shape[0]:
        raise ContractError(f"token id {int(ids.max())} >= vocabulary size {E.shape[0]}")
    x = take_rows(E, ids)
    if not positions:
        return x
    pe = sinusoidal_positions(ids.shape[-1], E.shape[1])
    return add(x, Tensor._wrap(pe.astype(E.dtype)))
