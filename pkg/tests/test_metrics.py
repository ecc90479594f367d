import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cegan.metrics import (ConfusionCounts, MetricsReport, UndefinedMetric, accuracy, aggregate,
                           confusion, evaluate, precision, present, render_comparison)
from cegan.tensor import ShapeError


def counts(tp, tn, fp, fn):
    return ConfusionCounts(*(np.array([v]) for v in (tp, tn, fp, fn)))


def brute_force(pred, labels, threshold=0.5):
    n, k = len(pred), len(pred[0])
    out = {f: [0] * k for f in ("tp", "tn", "fp", "fn")}
    for i in range(n):
        for j in range(k):
            positive = pred[i][j] >= threshold
            if positive and labels[i][j] == 1:
                out["tp"][j] += 1
            elif positive:
                out["fp"][j] += 1
            elif labels[i][j] == 1:
                out["fn"][j] += 1
            else:
                out["tn"][j] += 1
    return out


def test_confusion_examples():
    c = confusion(np.array([[0.9], [0.1]]), np.array([[1], [0]]))
    assert (c.tp[0], c.tn[0], c.fp[0], c.fn[0]) == (1, 1, 0, 0)
    c = confusion(np.full((7, 1), 0.99), np.zeros((7, 1)))
    assert (c.tp[0], c.tn[0], c.fp[0], c.fn[0]) == (0, 0, 7, 0)


def test_confusion_threshold_is_inclusive():
    c = confusion(np.array([[0.5]]), np.array([[1]]))
    assert c.tp[0] == 1


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        confusion(np.zeros((3, 1)), np.zeros((3, 1)), threshold=1.0)


def test_confusion_matches_brute_force_1000():
    rng = np.random.default_rng(0)
    pred = rng.random((1000, 5))
    labels = (rng.random((1000, 5)) < 0.3).astype(int)
    c = confusion(pred, labels)
    ref = brute_force(pred.tolist(), labels.tolist())
    for f in ref:
        assert getattr(c, f).tolist() == ref[f]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_conservation_and_monotonicity(n, k, seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((n, k))
    labels = (rng.random((n, k)) < 0.4).astype(np.uint8)
    prev = None
    for th in np.linspace(0.05, 0.95, 19):
        c = confusion(pred, labels, th)
        assert np.all(c.totals() == n)
        if prev is not None:
            assert np.all(c.tp <= prev.tp) and np.all(c.fp <= prev.fp)
        prev = c


def test_accuracy_examples():
    assert accuracy(counts(1, 1, 1, 1), 0) == 0.5
    assert accuracy(counts(3, 4, 0, 0), 0) == 1.0
    assert accuracy(counts(30, 50, 10, 10), 0) == 0.8
    with pytest.raises(UndefinedMetric):
        accuracy(counts(0, 0, 0, 0), 0)


def test_precision_examples():
    assert precision(counts(3, 0, 1, 0), 0) == (0.75, False)
    assert precision(counts(0, 0, 5, 0), 0) == (0.0, False)
    assert precision(counts(0, 9, 0, 2), 0) == (0.0, True)


def test_aggregate_examples():
    r = aggregate([0.8643, 0.6795, 0.7260, 0.7539, 0.9713], [0] * 5)
    assert present(r.overall_accuracy_macro) == "79.90"
    r = aggregate([0.9204, 0.7895, 0.8123, 0.8503, 0.9840], [0] * 5)
    assert present(r.overall_accuracy_macro) == "87.13"
    r = aggregate([0.37], [0.25])
    assert r.overall_accuracy_macro == 0.37 and r.overall_precision_macro == 0.25
    with pytest.raises(ValueError):
        aggregate([], [])


def test_micro_equals_macro_for_identical_classes():
    pred = np.repeat(np.random.default_rng(1).random((50, 1)), 4, axis=1)
    labels = np.repeat((np.random.default_rng(2).random((50, 1)) < 0.5).astype(int), 4, axis=1)
    r = evaluate(pred, labels, list("abcd"))
    assert abs(r.overall_precision_micro - r.overall_precision_macro) < 1e-15


def test_micro_from_summed_counts():
    c = ConfusionCounts(np.array([1, 9]), np.array([0, 0]), np.array([1, 1]), np.array([0, 0]))
    r = aggregate([0.5, 0.9], [0.5, 0.9], c)
    assert r.overall_precision_micro == 10 / 12


def test_table4_macro_identity(table4_rows):
    for row in table4_rows:
        mean = aggregate([a / 100 for a in row["accuracy"]], [0] * 5).overall_accuracy_macro * 100
        if row["label"] == "CNN with Bootstrapping":
            # printed 78.61; the mean of the printed per-class values is 78.604
            assert abs(mean - 78.604) < 1e-9
            continue
        assert abs(mean - row["printed_overall"]) <= 0.005, row["label"]


def test_present_half_up():
    assert present(0.78605) == "78.61"
    assert present(0.12345, percent=False) == "0.12"
    assert present(0.125, percent=False) == "0.13"
    assert present(1.0) == "100.00"


def test_report_json_roundtrip():
    r = evaluate(np.array([[0.9, 0.2], [0.4, 0.6]]), np.array([[1, 0], [0, 0]]), ["a", "b"])
    r.label = "x"
    back = MetricsReport.from_json(r.to_json())
    assert back.to_json() == r.to_json()


def _reports(labels=("alg1", "alg2")):
    rng = np.random.default_rng(0)
    out = {}
    for i, name in enumerate(labels):
        pred = rng.random((40, 5))
        lab = (rng.random((40, 5)) < 0.4).astype(int)
        out[name] = evaluate(pred, lab, [f"c{j}" for j in range(5)])
    return out


def test_render_structure():
    t = render_comparison(_reports())
    acc = list(csv.reader(io.StringIO(t.accuracy_csv)))
    prec = list(csv.reader(io.StringIO(t.precision_csv)))
    assert acc[0] == ["algorithm", "c0", "c1", "c2", "c3", "c4", "overall_macro"]
    assert prec[0][-2:] == ["overall_macro", "overall_micro"]
    assert len(acc) == 3 and all(len(r) == 7 for r in acc)
    assert len(t.accuracy_rows) == 2 and len(t.accuracy_rows[0]) == 7
    assert "**" in t.accuracy_text


def test_render_single_and_bold_maxima():
    reps = _reports(("only",))
    t = render_comparison(reps)
    row = list(csv.reader(io.StringIO(t.accuracy_csv)))[1]
    assert row[-1] == present(reps["only"].overall_accuracy_macro)
    assert all(c.startswith("**") for c in t.accuracy_rows[0][1:])
    two = render_comparison(_reports())
    for j in range(1, 7):
        col = [r[j] for r in two.accuracy_rows]
        assert sum(c.startswith("**") for c in col) >= 1


def test_render_rejects_inconsistent_attributes():
    reps = _reports()
    reps["alg2"].attribute_names = ["x"] * 5
    with pytest.raises(ValueError):
        render_comparison(reps)
    with pytest.raises(ValueError):
        render_comparison({})
