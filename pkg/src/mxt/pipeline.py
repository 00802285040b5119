"""Glue between datasets on disk, training, prediction and scoring.

These are the library entry points behind the ``mxt`` command.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .data import DatasetDir, EncodedExample, batches, encode_records, load_records, to_prompt
from .decoder import greedy_decode
from .evaluation import MetricReport, PredictionRecord, attach_gold, full_report
from .text import DataError, Vocabulary, build_vocab
from .training import (Checkpoint, TrainConfig, TrainResult, load_checkpoint,
                       model_config_for, save_checkpoint, train)

log = logging.getLogger(__name__)


def vocab_path(ckpt_path: str | Path) -> Path:
    ckpt_path = Path(ckpt_path)
    return ckpt_path.with_name(ckpt_path.name + ".vocab.txt")


def encode_split(records: list[dict], vocab: Vocabulary, base_dir: Path, cfg_model) -> list[EncodedExample]:
    return encode_records(records, vocab, base_dir, cfg_model.image_size, cfg_model.max_len,
                          cfg_model.max_target_len)


def train_on_dir(data: str | Path, cfg: TrainConfig, callback=None) -> tuple[TrainResult, Vocabulary]:
    """Build the vocabulary from the training split and train."""
    ds = DatasetDir(Path(data))
    tr, va = ds.records("train"), ds.records("val")
    if cfg.pt_filter:
        keep = set(cfg.pt_filter)
        tr = [r for r in tr if r["product_type"] in keep]
        va = [r for r in va if r["product_type"] in keep]
        if not tr or not va:
            raise DataError(f"pt_filter {cfg.pt_filter} leaves no training or validation records")
    vocab = build_vocab(to_prompt(r) for r in tr)
    mcfg = model_config_for(cfg, vocab)
    enc_tr = encode_split(tr, vocab, ds.root, mcfg)
    enc_va = encode_split(va, vocab, ds.root, mcfg)
    return train(enc_tr, enc_va, vocab, cfg, callback=callback), vocab


def save_model(ckpt: Checkpoint, vocab: Vocabulary, path: str | Path) -> None:
    vocab.save(vocab_path(path))
    save_checkpoint(ckpt, path)


def load_model(path: str | Path) -> tuple[Checkpoint, Vocabulary]:
    ckpt = load_checkpoint(path)
    vp = vocab_path(path)
    if not vp.exists():
        raise DataError(f"vocabulary file missing next to checkpoint: {vp}")
    vocab = Vocabulary.load(vp)
    want = ckpt.meta.get("vocab_hash")
    if want and vocab.digest() != want:
        raise DataError(f"vocabulary {vp} does not match the checkpoint's vocab_hash")
    return ckpt, vocab


def predict_records(ckpt: Checkpoint, vocab: Vocabulary, records: list[dict], base_dir: str | Path,
                    batch_size: int = 64) -> list[PredictionRecord]:
    cfg = ckpt.config
    examples = encode_split(records, vocab, Path(base_dir), cfg)
    out = []
    for i, b in enumerate(batches([_unlabeled(e) for e in examples], batch_size)):
        chunk = examples[i * batch_size:(i + 1) * batch_size]
        for e, g in zip(chunk, greedy_decode(b, ckpt.params, cfg, vocab)):
            out.append(PredictionRecord(e.id, e.product_type, e.attribute, g.text, g.confidence,
                                        e.value, e.value_in_text, e.zero_shot))
    return out


def _unlabeled(e: EncodedExample) -> EncodedExample:
    return EncodedExample(e.id, e.product_type, e.attribute, e.input_ids, e.pixels, None)


def predict_file(ckpt_path: str | Path, data_file: str | Path) -> list[PredictionRecord]:
    ckpt, vocab = load_model(ckpt_path)
    data_file = Path(data_file)
    return predict_records(ckpt, vocab, load_records(data_file), data_file.parent)


def write_predictions(preds: Iterable[PredictionRecord], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json_row(), sort_keys=True) + "\n")
    tmp.replace(path)


def evaluate(preds: Iterable[PredictionRecord], gold_records: list[dict], target: float = 0.9) -> MetricReport:
    return full_report(attach_gold(preds, gold_records), target)


# ---------------------------------------------------------------------------
# ablation

VARIANTS = ("Multi-PT", "Single-PT", "Without-Xception", "Without-MAG")


@dataclass
class AblationRow:
    variant: str
    overall_f1: float
    macro_f1: float
    shared_f1: float
    recall_at_target_precision: float


def shared_attributes(records: Iterable[dict]) -> set[str]:
    """Attributes that occur under at least two product types."""
    pts: dict[str, set[str]] = {}
    for r in records:
        pts.setdefault(r["attribute"], set()).add(r["product_type"])
    return {a for a, s in pts.items() if len(s) >= 2}


def shared_f1(report: MetricReport, shared: set[str]) -> float:
    """Mean F1 over (PT, attribute) slices whose attribute is shared."""
    vals = [m.f1 for k, m in report.per_slice.items() if k.split("|", 1)[1] in shared]
    return sum(vals) / len(vals) if vals else 0.0


def run_ablation(data: str | Path, out: str | Path, base: TrainConfig) -> list[AblationRow]:
    """Train the four variants, score them on the test split and write
    ``ablation.json`` and ``ablation.md`` into ``out``."""
    ds = DatasetDir(Path(data))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    test = ds.records("test")
    shared = shared_attributes(test)
    rows, reports = [], {}
    for variant in VARIANTS:
        log.info("ablation variant %s", variant)
        if variant == "Single-PT":
            preds: list[PredictionRecord] = []
            for pt in sorted({r["product_type"] for r in test}):
                cfg = TrainConfig.from_dict({**base.to_dict(), "pt_filter": [pt]})
                res, vocab = train_on_dir(ds.root, cfg)
                preds += predict_records(res.checkpoint, vocab, [r for r in test if r["product_type"] == pt], ds.root)
        else:
            flags = {"Multi-PT": {}, "Without-Xception": {"use_xception": False},
                     "Without-MAG": {"use_mag": False}}[variant]
            cfg = TrainConfig.from_dict({**base.to_dict(), **flags, "pt_filter": None})
            res, vocab = train_on_dir(ds.root, cfg)
            preds = predict_records(res.checkpoint, vocab, test, ds.root)
        report = evaluate(preds, test, 0.9)
        reports[variant] = report.to_dict()
        rows.append(AblationRow(variant, report.overall.f1, report.macro_f1, shared_f1(report, shared),
                                report.overall.recall_at_target_precision))
    table = {"rows": [r.__dict__ for r in rows], "shared_attributes": sorted(shared), "reports": reports}
    _atomic_write(out / "ablation.json", json.dumps(table, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "ablation.md", ablation_markdown(rows))
    return rows


def ablation_markdown(rows: list[AblationRow]) -> str:
    lines = ["| variant | F1 | macro F1 | shared-attribute F1 | recall@P |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r.variant} | {r.overall_f1:.4f} | {r.macro_f1:.4f} | {r.shared_f1:.4f} | "
                     f"{r.recall_at_target_precision:.4f} |")
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
