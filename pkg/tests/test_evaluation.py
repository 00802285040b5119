import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mxt.evaluation import (MetricReport, PredictionRecord, attach_gold, capability_report, exact_match,
                            f1_report, full_report, load_predictions, recall_at_precision)


def pred(i, correct, conf, pt="dress", attr="color", **kw):
    gold = "red"
    return PredictionRecord(f"r{i:03d}", pt, attr, gold if correct else "blue", conf, gold, **kw)


def worked_example():
    hits = [1, 1, 1, 1, 1, 1, 1, 1, 1, 0]
    return [pred(i, h, 1.0 - 0.05 * i) for i, h in enumerate(hits)]


def brute_force(correct, conf, total_gold, target):
    """Every distinct confidence as a threshold; keep predictions at or above it."""
    best = (0.0, math.inf)
    for t in sorted(set(conf), reverse=True):
        kept = [c for c, s in zip(correct, conf) if s >= t]
        if kept and sum(kept) / len(kept) >= target - 1e-12:
            r = sum(kept) / total_gold
            if r > best[0]:
                best = (r, t)
    return best


# -- exact match -------------------------------------------------------------


@pytest.mark.parametrize("a,b,want", [("Ruched Neck", "ruched  neck", True), ("mini", "midi", False),
                                      ("", "red", False), (" Red ", "red", True)])
def test_exact_match(a, b, want):
    assert exact_match(a, b) is want


# -- recall at precision -----------------------------------------------------


def test_worked_example_is_three_quarters():
    r, t = recall_at_precision(worked_example(), 0.9, total_gold=12)
    assert r == 0.75
    # prefix 9 already reaches 9/12, so the tenth (wrong) one is cut
    assert t == pytest.approx(0.6)


def test_all_correct_and_all_wrong():
    good = [pred(i, True, 0.5 + i / 100) for i in range(5)]
    assert recall_at_precision(good, 0.9)[0] == 1.0
    bad = [pred(i, False, 0.5 + i / 100) for i in range(5)]
    assert recall_at_precision(bad, 0.9) == (0.0, math.inf)
    assert recall_at_precision([], 0.9) == (0.0, math.inf)


def test_ties_are_cut_together():
    # the wrong prediction shares the top confidence so it cannot be excluded
    preds = [pred(0, True, 0.9), pred(1, False, 0.9), pred(2, True, 0.5)]
    assert recall_at_precision(preds, 0.9)[0] == 0.0
    assert recall_at_precision(preds, 0.6)[0] == pytest.approx(2 / 3)


def test_abstentions_count_against_recall_only():
    preds = [pred(0, True, 0.9), PredictionRecord("r001", "dress", "color", "", 0.0, "red")]
    assert recall_at_precision(preds, 0.9)[0] == 0.5


def test_brute_force_oracle_agreement():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        correct = rng.random(n) < rng.random()
        # coarse confidences so ties occur
        conf = np.round(rng.random(n), 1)
        total = n + int(rng.integers(0, 4))
        target = float(rng.choice([0.5, 0.75, 0.9, 1.0]))
        preds = [pred(i, c, float(s)) for i, (c, s) in enumerate(zip(correct, conf))]
        want = brute_force(correct.tolist(), conf.tolist(), total, target)
        assert recall_at_precision(preds, target, total) == pytest.approx(want)


confs = st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=20)


@given(confs, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_monotone_in_target(rows, a, b):
    preds = [pred(i, c, s) for i, (c, s) in enumerate(rows)]
    lo, hi = sorted((a, b))
    assert recall_at_precision(preds, hi)[0] <= recall_at_precision(preds, lo)[0]


@given(confs, st.floats(0.05, 1.0))
def test_lowest_confidence_wrong_prediction_never_lowers_recall(rows, target):
    preds = [pred(i, c, s) for i, (c, s) in enumerate(rows)]
    total = len(preds) + 1
    before = recall_at_precision(preds, target, total)[0]
    low = min(p.confidence for p in preds) - 0.1
    after = recall_at_precision(preds + [pred(99, False, low)], target, total)[0]
    assert after >= before


# -- F1 report ----------------------------------------------------------------


def test_f1_hand_values():
    # P = 1, R = 0.5 on color; perfect on pattern
    preds = [pred(0, True, 0.9), PredictionRecord("r001", "dress", "color", "", 0.0, "red"),
             PredictionRecord("r002", "dress", "pattern", "solid", 0.9, "solid")]
    rep = f1_report(preds)
    assert rep.per_slice["dress|color"].f1 == pytest.approx(2 / 3)
    assert rep.per_slice["dress|pattern"].f1 == 1.0
    assert rep.per_product_type["dress"] == pytest.approx((1 + 2 / 3) / 2)


def test_pt_average_of_one_and_half():
    preds = [pred(0, True, 0.9, attr="a"),
             pred(1, True, 0.9, attr="b"), pred(2, False, 0.9, attr="b")]
    rep = f1_report(preds)
    assert rep.per_slice["dress|b"].f1 == 0.5
    assert rep.per_product_type["dress"] == 0.75


@settings(max_examples=30)
@given(st.permutations(list(range(12))))
def test_f1_report_permutation_invariant(perm):
    rng = np.random.default_rng(3)
    base = [pred(i, bool(rng.random() < 0.7), float(rng.random()), pt=("a", "b")[i % 2],
                 attr=("x", "y", "z")[i % 3]) for i in range(12)]
    assert f1_report([base[i] for i in perm]).to_dict() == f1_report(base).to_dict()


def test_report_json_roundtrip(tmp_path):
    preds = worked_example() + [pred(50, False, 0.3, pt="shirt")]
    rep = full_report(preds)
    assert math.isinf(rep.per_slice["shirt|color"].threshold)
    rep.save(tmp_path / "r.json")
    back = MetricReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back == rep
    assert back.to_json() == rep.to_json()


# -- capability buckets -------------------------------------------------------


def test_capability_buckets():
    preds = [pred(0, True, 0.9, zero_shot=True, value_in_text=True),
             pred(1, False, 0.9, zero_shot=True, value_in_text=True),
             pred(2, True, 0.9, attr="item length"),
             pred(3, True, 0.9, value_in_text=True)]
    cap = capability_report(preds)
    assert cap["zero_shot"]["count"] == 2 and cap["zero_shot"]["accuracy"] == 0.5
    assert cap["value_absent"]["count"] == 1 and cap["value_absent"]["accuracy"] == 1.0
    assert [e["id"] for e in cap["zero_shot"]["examples"]] == ["r000", "r001"]


def test_no_zero_shot_means_empty_bucket():
    cap = capability_report([pred(0, True, 0.9, value_in_text=True)])
    assert cap["zero_shot"]["count"] == 0 and cap["zero_shot"]["examples"] == []


def test_example_list_is_capped():
    cap = capability_report([pred(i, True, 0.5) for i in range(30)])
    assert len(cap["value_absent"]["examples"]) == 20


# -- IO -------------------------------------------------------------------------


def test_attach_gold_fills_missing_predictions():
    gold = [{"id": "a", "product_type": "dress", "attribute": "color", "value": "red", "zero_shot": True},
            {"id": "b", "product_type": "dress", "attribute": "color", "value": "blue"}]
    got = attach_gold([PredictionRecord("a", "dress", "color", "red", -0.1)], gold)
    assert got[0].gold_value == "red" and got[0].zero_shot
    assert got[1].predicted_value == "" and got[1].gold_value == "blue"


def test_load_predictions(tmp_path):
    rows = [p.to_json_row() for p in worked_example()]
    (tmp_path / "p.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    back = load_predictions(tmp_path / "p.jsonl")
    assert [b.predicted_value for b in back] == [r["value"] for r in rows]
    (tmp_path / "bad.jsonl").write_text('{"id": "x"\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_predictions(tmp_path / "bad.jsonl")
