import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmprompt.metrics import (MetricReport, acc2_f1, acc5, acc7, evaluate, logits_to_classes, mae, pearson,
                              precision_recall, write_metrics_csv, write_metrics_json)


def confusion_oracle(pred_pos, true_pos):
    tp = fp = fn = tn = 0
    for p, t in zip(pred_pos, true_pos):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def div(a, b):
    return a / b if b else 0.0


def test_mae_examples():
    x = np.array([0.3, -1.0, 2.0])
    assert mae(x, x) == 0.0
    assert mae(x + 0.5, x) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        mae([1.0], [1.0, 2.0])


def test_pearson_examples():
    x = np.random.default_rng(0).standard_normal(20)
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(-x, x) == pytest.approx(-1.0)
    assert pearson(np.ones(20), x) == 0.0


def test_acc7_examples():
    assert acc7([1.4], [1.0]) == 1.0
    assert acc7([3.9], [3.0]) == 1.0
    y = np.array([-3.0, -1.2, 0.4, 2.6])
    assert acc7(y, y) == 1.0


def test_acc5_bins():
    assert acc5([1.2], [2.0]) == 1.0  # {1, 2} merge
    assert acc5([7.0], [6.4]) == 1.0  # {6, 7} merge
    assert acc5([3.4], [4.0]) == 0.0


def test_acc2_examples():
    assert acc2_f1([1.0, -2.0, 0.3], [0.5, -1.0, 2.0]) == (1.0, 1.0)
    acc, f1 = acc2_f1([-1.0, -1.0, -1.0], [1.0, -1.0, 2.0])
    assert f1 == 0.0 and acc == pytest.approx(1 / 3)
    acc, _ = acc2_f1([5.0, -5.0], [0.0, -1.0])  # zero label excluded
    assert acc == 1.0


def test_precision_recall_examples():
    y = np.array([1, 0, 1, 1, 0], dtype=bool)
    assert precision_recall(y, y) == (1.0, 1.0)
    p, r = precision_recall(np.ones(5, dtype=bool), y)
    assert p == pytest.approx(3 / 5) and r == 1.0


def test_random_cases_against_oracles():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        preds = rng.normal(size=n) * 2
        labels = np.round(rng.normal(size=n) * 1.5, 1)
        # mae / pearson direct formulas
        assert abs(mae(preds, labels) - sum(abs(a - b) for a, b in zip(preds, labels)) / n) < 1e-12
        pc, yc = preds - preds.mean(), labels - labels.mean()
        den = np.sqrt((pc ** 2).sum() * (yc ** 2).sum())
        assert abs(pearson(preds, labels) - (0.0 if den == 0 else (pc * yc).sum() / den)) < 1e-12
        # acc2 / f1 vs confusion matrix
        keep = labels != 0
        tp, fp, fn, tn = confusion_oracle(preds[keep] > 0, labels[keep] > 0)
        acc, f1 = acc2_f1(preds, labels)
        prec, rec = div(tp, tp + fp), div(tp, tp + fn)
        assert acc == pytest.approx(div(tp + tn, keep.sum()))
        assert f1 == pytest.approx(div(2 * prec * rec, prec + rec))
        # precision / recall on classes
        cls, truth = rng.random(n) < 0.5, rng.random(n) < 0.4
        tp, fp, fn, _ = confusion_oracle(cls, truth)
        assert precision_recall(cls, truth) == pytest.approx((div(tp, tp + fp), div(tp, tp + fn)))
        # acc7 direct
        ref = np.mean([round(min(3, max(-3, p))) == round(min(3, max(-3, y))) for p, y in zip(preds, labels)])
        # python round and numpy round both use round-half-even
        assert acc7(preds, labels) == pytest.approx(ref)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=20), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_positive_affine_invariance(xs, a, b):
    p = np.array(xs)
    y = np.linspace(-1, 1, len(xs)) ** 3
    if p.std() < 1e-6:
        return
    assert pearson(a * p + b, y) == pytest.approx(pearson(p, y), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_subnormal=False), min_size=2, max_size=20), st.floats(0.1, 5))
def test_acc2_monotone_sign_preserving_invariance(xs, k):
    p = np.array(xs)
    y = np.sign(np.linspace(-1, 1, len(xs)) + 0.01)
    assert acc2_f1(k * p + p ** 3, y) == acc2_f1(p, y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=20))
def test_zero_mae_means_perfect_acc7(xs):
    y = np.array(xs)
    assert mae(y, y) == 0 and acc7(y, y) == 1.0


def test_logits_threshold():
    np.testing.assert_array_equal(logits_to_classes([-1e-9, 0.0, 3.0, -700.0]), [False, True, True, False])


def test_evaluate_regression_and_binary(tmp_path):
    rep = evaluate([0.5, -1.0, 2.0], [1.0, -2.0, 2.0])
    assert rep.n_samples == 3 and rep.acc5 is None and rep.precision is None
    assert 0 <= rep.acc2 <= 1 and -1 <= rep.corr <= 1
    rep7 = evaluate([1.0, 4.0], [1.2, 4.4], label_range=(1.0, 7.0))
    assert rep7.acc5 == 1.0
    b = evaluate([2.0, -1.0, 0.5, -3.0], [1, 0, 0, 1], task="binary")
    assert b.mae is None and b.acc2 == 0.5 and (b.precision, b.recall) == (0.5, 0.5)
    assert b.primary("binary") == -0.5 and rep.primary("regression") == rep.mae
    write_metrics_json(rep, tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["mae"] == rep.mae


def test_csv_row_formatting(tmp_path):
    row = MetricReport(n_samples=4, mae=0.61949, corr=0.5, acc2=0.8125, f1=0.8, acc7=0.4531).csv_row()
    assert row["mae"] == "0.619" and row["acc2"] == "81.2" and row["acc7"] == "45.3" and row["acc5"] == ""
    write_metrics_csv([{"split": "test", **row}], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0].startswith("split,n_samples,mae")
