"""Dataset records (JSONL) and their encoded, batchable form."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .image import IMAGE_SIZE, load_image
from .model import Batch, make_batch
from .text import MAX_LEN, DataError, PromptExample, Vocabulary, encode_target, render_prompt, tokenize

RECORD_FIELDS = {
    "id": str,
    "product_type": str,
    "attribute": str,
    "text": str,
    "image": str,
    "value": str,
    "value_in_text": bool,
    "zero_shot": bool,
}


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    return out


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    tmp.replace(path)


def validate_record(rec: dict, where: str = "record") -> dict:
    for key, typ in RECORD_FIELDS.items():
        if key not in rec:
            raise DataError(f"{where}: missing field {key!r}")
        if not isinstance(rec[key], typ):
            raise DataError(f"{where}: field {key!r} should be {typ.__name__}")
    return rec


def load_records(path: str | Path) -> list[dict]:
    rows = read_jsonl(path)
    for i, r in enumerate(rows):
        validate_record(r, f"{path}:{i + 1}")
    return rows


def to_prompt(rec: dict) -> PromptExample:
    return PromptExample(rec["attribute"], rec["product_type"], rec["text"], rec.get("image"),
                         rec.get("value"), rec.get("id", ""))


@dataclass
class EncodedExample:
    id: str
    product_type: str
    attribute: str
    input_ids: list[int]
    pixels: np.ndarray
    target: list[int] | None
    value: str | None = None
    value_in_text: bool = False
    zero_shot: bool = False


def encode_records(records: list[dict], vocab: Vocabulary, base_dir: str | Path, image_size: int = IMAGE_SIZE,
                   max_len: int = MAX_LEN, max_target_len: int = 8) -> list[EncodedExample]:
    base_dir = Path(base_dir)
    cache: dict[str, np.ndarray] = {}
    out = []
    for rec in records:
        ref = rec["image"]
        if ref not in cache:
            cache[ref] = load_image(base_dir / ref, image_size).to_chw()
        value = rec.get("value")
        out.append(EncodedExample(
            id=rec["id"],
            product_type=rec["product_type"],
            attribute=rec["attribute"],
            input_ids=tokenize(render_prompt(to_prompt(rec)), vocab, max_len),
            pixels=cache[ref],
            target=encode_target(value, vocab, max_target_len) if value else None,
            value=value,
            value_in_text=bool(rec.get("value_in_text", False)),
            zero_shot=bool(rec.get("zero_shot", False)),
        ))
    return out


def batches(examples: list[EncodedExample], batch_size: int) -> Iterator[Batch]:
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        targets = [e.target for e in chunk]
        yield make_batch([e.input_ids for e in chunk], [e.pixels for e in chunk],
                         targets if all(t is not None for t in targets) else None)


@dataclass
class DatasetDir:
    """A generated dataset: ``{train,val,test}.jsonl`` plus ``images/``."""
    root: Path

    def split(self, name: str) -> Path:
        return self.root / f"{name}.jsonl"

    def records(self, name: str) -> list[dict]:
        p = self.split(name)
        if not p.exists():
            raise DataError(f"dataset split missing: {p}")
        return load_records(p)
