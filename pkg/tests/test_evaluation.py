import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config, two_tasks
from resnext_mtl.data import Sample
from resnext_mtl.evaluation import (
    accuracy,
    baseline_predict,
    confusion_matrix,
    evaluate,
    evaluate_arrays,
    macro_f1,
    regression_metrics,
)
from resnext_mtl.model import build_model
from resnext_mtl.nn import Rng


def oracle_macro_f1(preds, labels, k):
    """Per-class F1 from explicit counting loops; absent classes score 1."""
    scores = []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        if tp + fp + fn == 0:
            scores.append(1.0)
        elif tp == 0:
            scores.append(0.0)
        else:
            prec, rec = tp / (tp + fp), tp / (tp + fn)
            scores.append(2 * prec * rec / (prec + rec))
    return sum(scores) / k


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    y = np.array([0, 1, 1, 0, 1])
    p = np.array([0, 0, 1, 1, 1])
    assert accuracy(1 - p, y) == pytest.approx(1 - accuracy(p, y), abs=1e-15)
    with pytest.raises(ValueError, match="length"):
        accuracy([0, 1], [0])


def test_macro_f1_hand_example():
    assert macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(11 / 15, abs=1e-15)
    assert macro_f1([2, 0, 1], [2, 0, 1], 3) == 1.0


def test_macro_f1_rejects_out_of_range():
    with pytest.raises(ValueError, match="range"):
        macro_f1([0, 2], [0, 1], 2)


@settings(max_examples=300, deadline=None)
@given(
    k=st.integers(2, 5),
    data=st.data(),
)
def test_metrics_match_oracles(k, data):
    n = data.draw(st.integers(1, 30))
    labels = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    preds = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    assert macro_f1(preds, labels, k) == pytest.approx(oracle_macro_f1(preds, labels, k), abs=1e-15)
    assert accuracy(preds, labels) == sum(p == y for p, y in zip(preds, labels)) / n
    cm = confusion_matrix(preds, labels, k)
    assert cm.sum() == n and np.trace(cm) == sum(p == y for p, y in zip(preds, labels))


def test_regression_examples():
    assert regression_metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)
    mae, rmse = regression_metrics([0.0, 0.0], [3.0, 4.0])
    assert mae == 3.5 and rmse == pytest.approx(math.sqrt(12.5), abs=1e-15)
    mae, rmse = regression_metrics([1.5, 2.5, -0.5], [1.0, 2.0, -1.0])
    assert mae == pytest.approx(0.5, abs=1e-15) and rmse == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        regression_metrics([], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20))
def test_regression_matches_oracle(pairs):
    p, t = map(np.array, zip(*pairs))
    mae, rmse = regression_metrics(p, t)
    errs = [a - b for a, b in pairs]
    assert mae == pytest.approx(sum(abs(e) for e in errs) / len(errs), rel=1e-12, abs=1e-12)
    assert rmse**2 == pytest.approx(sum(e * e for e in errs) / len(errs), rel=1e-12, abs=1e-12)


def test_baselines():
    assert baseline_predict("majority", [0, 0, 1], 4).tolist() == [0] * 4
    assert baseline_predict("majority", [1, 0, 1, 0], 2).tolist() == [0, 0]
    assert baseline_predict("mean", [1.0, 2.0, 3.0], 2).tolist() == [2.0, 2.0]
    with pytest.raises(ValueError):
        baseline_predict("median", [1.0], 1)


def _net_and_data(gen, n=12):
    net = build_model(tiny_config(), two_tasks(), Rng(0))
    X = gen.standard_normal((n, 8, 2))
    labels = {"direction": gen.integers(0, 2, n), "log_return": gen.standard_normal(n) * 0.01}
    return net, X, labels


def test_zero_weight_model_predicts_class_zero(gen):
    net, X, labels = _net_and_data(gen)
    for k in net.params:
        net.params[k][...] = 0.0
    rep = evaluate_arrays(net, X, labels, split="test")
    assert rep["direction"].accuracy == np.mean(labels["direction"] == 0)


def test_report_matches_standalone_metrics_and_is_deterministic(gen):
    net, X, labels = _net_and_data(gen)
    rep = evaluate_arrays(net, X, labels, split="val", seed=3, config_hash="abc")
    out = net.predict(X)
    pred = np.argmax(out["direction"], axis=1)
    assert rep["direction"].accuracy == accuracy(pred, labels["direction"])
    assert rep["direction"].macro_f1 == macro_f1(pred, labels["direction"], 2)
    assert (rep["log_return"].mae, rep["log_return"].rmse) == regression_metrics(out["log_return"], labels["log_return"])
    again = evaluate_arrays(net, X, labels, split="val", seed=3, config_hash="abc")
    assert rep.to_json() == again.to_json()
    d = rep.to_dict()
    assert d["split"] == "val" and d["seed"] == 3 and d["config_hash"] == "abc"
    assert "Acc" in rep.text() and "RMSE" in rep.text()


def test_evaluate_samples_matches_arrays(gen):
    net, X, labels = _net_and_data(gen, n=5)
    d = np.datetime64("2020-01-01")
    samples = [Sample(X[i], {k: v[i].item() for k, v in labels.items()}, d, d) for i in range(5)]
    assert evaluate(net, samples).to_json() == evaluate_arrays(net, X, labels).to_json()
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, [])


@settings(max_examples=50, deadline=None)
@given(z=st.lists(st.floats(-20, 20), min_size=2, max_size=6), scale=st.floats(0.1, 10), shift=st.floats(-50, 50))
def test_argmax_invariance(z, scale, shift):
    z = np.array(z)
    if np.sort(z)[-1] - np.sort(z)[-2] < 1e-6:
        return
    assert np.argmax(z * scale + shift) == np.argmax(z)
