"""Scoring predictions against gold values.

A prediction with an empty value is an abstention: it counts toward neither
precision nor recall numerators but its gold slot still counts toward recall.
"""
from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass
class PredictionRecord:
    id: str
    product_type: str
    attribute: str
    predicted_value: str
    confidence: float
    gold_value: str | None = None
    value_in_text: bool = False
    zero_shot: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "PredictionRecord":
        d = dict(d)
        if "value" in d and "predicted_value" not in d:
            d["predicted_value"] = d.pop("value")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_json_row(self) -> dict:
        """The on-disk prediction row."""
        return {"id": self.id, "product_type": self.product_type, "attribute": self.attribute,
                "value": self.predicted_value, "confidence": self.confidence}


def normalize(value: str | None) -> str:
    return re.sub(r"\s+", " ", (value or "").strip().lower())


def exact_match(pred: str | None, gold: str | None) -> bool:
    """Case-insensitive, whitespace-collapsed equality; empty never matches."""
    p = normalize(pred)
    return bool(p) and p == normalize(gold)


def recall_at_precision(preds: Sequence[PredictionRecord], target: float = 0.9,
                        total_gold: int | None = None) -> tuple[float, float]:
    """Highest recall reachable while keeping precision >= ``target``.

    Candidate operating points keep every nonempty prediction with confidence
    >= t for each distinct confidence t.  Returns ``(recall, threshold)`` with
    the highest threshold reaching that recall; when no threshold qualifies
    returns ``(0.0, inf)``.
    """
    if total_gold is None:
        total_gold = sum(1 for p in preds if normalize(p.gold_value))
    answered = [p for p in preds if normalize(p.predicted_value)]
    if not answered or total_gold == 0:
        return 0.0, math.inf
    conf = np.array([p.confidence for p in answered], dtype=np.float64)
    hit = np.array([exact_match(p.predicted_value, p.gold_value) for p in answered], dtype=np.float64)
    order = np.lexsort((np.array([p.id for p in answered]), -conf))
    conf, hit = conf[order], hit[order]
    tp = np.cumsum(hit)
    kept = np.arange(1, len(conf) + 1)
    # only positions where the next confidence is strictly lower are real cut points
    cut = np.r_[conf[1:] < conf[:-1], True]
    best_r, best_t = 0.0, math.inf
    for i in np.flatnonzero(cut):
        if tp[i] / kept[i] >= target - 1e-12:
            r = tp[i] / total_gold
            if r > best_r:
                best_r, best_t = float(r), float(conf[i])
    return best_r, best_t


@dataclass
class SliceMetrics:
    precision: float
    recall: float
    f1: float
    recall_at_target_precision: float
    threshold: float
    support: int


def _slice(preds: Sequence[PredictionRecord], target: float) -> SliceMetrics:
    support = sum(1 for p in preds if normalize(p.gold_value))
    answered = [p for p in preds if normalize(p.predicted_value)]
    tp = sum(exact_match(p.predicted_value, p.gold_value) for p in answered)
    prec = tp / len(answered) if answered else 0.0
    rec = tp / support if support else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    r, t = recall_at_precision(preds, target, support)
    return SliceMetrics(prec, rec, f1, r, t, support)


@dataclass
class MetricReport:
    per_slice: dict[str, SliceMetrics]
    per_product_type: dict[str, float]
    overall: SliceMetrics
    macro_f1: float
    target_precision: float = 0.9
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(m: SliceMetrics) -> dict:
            d = asdict(m)
            d["threshold"] = None if math.isinf(m.threshold) else m.threshold
            return d

        return {
            "target_precision": self.target_precision,
            "per_slice": {k: enc(v) for k, v in sorted(self.per_slice.items())},
            "per_product_type": dict(sorted(self.per_product_type.items())),
            "overall": enc(self.overall),
            "macro_f1": self.macro_f1,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        def dec(m: Mapping) -> SliceMetrics:
            m = dict(m)
            m["threshold"] = math.inf if m["threshold"] is None else m["threshold"]
            return SliceMetrics(**m)

        return cls({k: dec(v) for k, v in d["per_slice"].items()}, dict(d["per_product_type"]),
                   dec(d["overall"]), d["macro_f1"], d.get("target_precision", 0.9), dict(d.get("extra", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        tmp.replace(path)


def slice_key(pt: str, attr: str) -> str:
    return f"{pt}|{attr}"


def f1_report(preds: Iterable[PredictionRecord], target: float = 0.9) -> MetricReport:
    """Per (product type, attribute) metrics, per-PT mean F1 and global figures."""
    preds = list(preds)
    groups: dict[tuple[str, str], list[PredictionRecord]] = defaultdict(list)
    for p in preds:
        groups[(p.product_type, p.attribute)].append(p)
    per_slice = {slice_key(*k): _slice(v, target) for k, v in sorted(groups.items())}
    by_pt: dict[str, list[float]] = defaultdict(list)
    for (pt, _), v in sorted(groups.items()):
        by_pt[pt].append(per_slice[slice_key(pt, _)].f1)
    per_pt = {pt: float(np.mean(f)) for pt, f in by_pt.items()}
    macro = float(np.mean([m.f1 for m in per_slice.values()])) if per_slice else 0.0
    return MetricReport(per_slice, per_pt, _slice(preds, target), macro, target)


def accuracy(preds: Iterable[PredictionRecord], attribute: str | None = None) -> float:
    """Exact-match accuracy over records with a gold value (abstentions are wrong)."""
    rows = [p for p in preds if normalize(p.gold_value) and (attribute is None or p.attribute == attribute)]
    if not rows:
        return 0.0
    return sum(exact_match(p.predicted_value, p.gold_value) for p in rows) / len(rows)


def capability_report(preds: Iterable[PredictionRecord], max_examples: int = 20) -> dict:
    """Accuracy on the zero-shot and value-absent buckets, with examples."""
    preds = list(preds)
    out = {}
    for name, pick in (("zero_shot", lambda p: p.zero_shot), ("value_absent", lambda p: not p.value_in_text)):
        bucket = [p for p in preds if pick(p) and normalize(p.gold_value)]
        out[name] = {
            "count": len(bucket),
            "correct": sum(exact_match(p.predicted_value, p.gold_value) for p in bucket),
            "accuracy": accuracy(bucket),
            "examples": [
                {"id": p.id, "predicted": p.predicted_value, "gold": p.gold_value,
                 "correct": exact_match(p.predicted_value, p.gold_value)}
                for p in bucket[:max_examples]
            ],
        }
    return out


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rows.append(PredictionRecord.from_dict(d))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValueError(f"{path}:{n}: malformed prediction row ({exc})") from exc
    return rows


def attach_gold(preds: Iterable[PredictionRecord], records: Iterable[Mapping]) -> list[PredictionRecord]:
    """Join predictions with gold records by id.  Gold records without a
    prediction become abstentions so they still count against recall."""
    by_id = {p.id: p for p in preds}
    out = []
    for r in records:
        p = by_id.get(r["id"])
        out.append(PredictionRecord(
            r["id"], r["product_type"], r["attribute"],
            p.predicted_value if p else "", p.confidence if p else 0.0,
            r.get("value"), bool(r.get("value_in_text", False)), bool(r.get("zero_shot", False))))
    return out


def full_report(preds: Iterable[PredictionRecord], target: float = 0.9) -> MetricReport:
    """:func:`f1_report` with the capability buckets attached under ``extra``."""
    preds = list(preds)
    report = f1_report(preds, target)
    report.extra["capability"] = capability_report(preds)
    report.extra["accuracy_by_attribute"] = {
        a: accuracy(preds, a) for a in sorted({p.attribute for p in preds})}
    return report
