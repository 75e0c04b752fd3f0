import math
import sys
from pathlib import Path

import numpy as np
import pytest
import sklearn.metrics as skm

# Ensure tale package importable
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from tale.errors import InputError, UndefinedMetricError  # noqa: E402
from tale.metrics import (  # noqa: E402
    RankedPrediction,
    acc_at_k,
    auprc,
    auroc,
    binary_metrics,
    code_metrics,
    f1_at,
    macro_f1_recall,
)


# Brute-force oracles


def brute_top_k(scores, k):
    return sorted(range(len(scores)), key=lambda c: (-scores[c], c))[:k]


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    n_pos = sum(labels)
    area, prev_recall = 0.0, 0.0
    for threshold in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= threshold]
        tp = sum(chosen)
        recall = tp / n_pos
        area += (recall - prev_recall) * tp / len(chosen)
        prev_recall = recall
    return area


def brute_macro_f1(preds, threshold=0.5):
    n_codes = len(preds[0].scores)
    f1s = []
    for c in range(n_codes):
        tp = fp = fn = 0
        for p in preds:
            predicted, actual = p.scores[c] >= threshold, c in p.truth
            tp += predicted and actual
            fp += predicted and not actual
            fn += actual and not predicted
        if tp + fn > 0:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return sum(f1s) / len(f1s)


def test_top_k_breaks_ties_by_code_index():
    pred = RankedPrediction([0.1, 0.7, 0.2, 0.7], {2})
    assert pred.top_k(3).tolist() == [1, 3, 2]


def test_acc_at_k_worked_example():
    pred = RankedPrediction([0.1, 0.7, 0.2], {2})
    assert acc_at_k([pred], 1) == 0.0
    assert acc_at_k([pred], 2) == 1.0


def test_auroc_worked_examples():
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5


def test_metrics_match_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 15))
        # coarse scores force plenty of ties
        scores = (rng.integers(0, 6, size=n) / 5.0).tolist()
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 1, 0
        labels = labels.tolist()
        assert math.isclose(auroc(scores, labels), brute_auroc(scores, labels), abs_tol=1e-12)
        assert math.isclose(auprc(scores, labels), brute_auprc(scores, labels), abs_tol=1e-12)

        k = int(rng.integers(1, n + 1))
        pred = RankedPrediction(scores, {int(rng.integers(n))})
        assert pred.top_k(k).tolist() == brute_top_k(scores, k)


def test_macro_f1_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        preds = [
            RankedPrediction(rng.uniform(size=6), set(rng.choice(6, size=int(rng.integers(1, 3)), replace=False).tolist()))
            for _ in range(int(rng.integers(1, 8)))
        ]
        macro, _ = macro_f1_recall(preds)
        assert math.isclose(macro, brute_macro_f1(preds), abs_tol=1e-12)


def test_acc_at_k_is_monotone_in_k():
    rng = np.random.default_rng(2)
    preds = [RankedPrediction(rng.uniform(size=10), {int(rng.integers(10))}) for _ in range(50)]
    values = [acc_at_k(preds, k) for k in range(1, 11)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=40)
    labels = (rng.uniform(size=40) < 0.4).astype(int)
    labels[:2] = [1, 0]
    assert auroc(scores, labels) == auroc(np.exp(scores), labels)


def test_random_scores_have_expected_acc_at_5():
    rng = np.random.default_rng(4)
    preds = [RankedPrediction(rng.uniform(size=10), {int(rng.integers(10))}) for _ in range(10000)]
    # expectation 5/10, standard error 0.005
    assert abs(acc_at_k(preds, 5) - 0.5) < 0.02


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auprc([], [])
    with pytest.raises(UndefinedMetricError):
        acc_at_k([], 5)
    with pytest.raises(InputError):
        auroc([0.1, 0.2], [1, 2])
    with pytest.raises(InputError):
        acc_at_k([RankedPrediction([0.1], {0})], 0)


def test_binary_metrics_and_f1():
    scores, labels = [0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]
    value_auroc, value_auprc, value_f1 = binary_metrics(scores, labels)
    assert math.isclose(value_auroc, 0.75)
    assert math.isclose(value_auprc, 1.0 * 0.5 + (2 / 3) * 0.5)
    assert value_f1 == f1_at(scores, labels) == 0.5


def test_binary_metrics_agree_with_sklearn():
    rng = np.random.default_rng(5)
    scores = rng.uniform(size=60).round(1)
    labels = (rng.uniform(size=60) < 0.3).astype(int)
    labels[:2] = [1, 0]
    value_auroc, value_auprc, value_f1 = binary_metrics(scores, labels)
    assert value_auroc == skm.roc_auc_score(labels, scores)
    assert value_auprc == skm.average_precision_score(labels, scores)
    assert value_f1 == skm.f1_score(labels, (scores >= 0.5).astype(int))


def test_code_f1_and_recall_agree_with_sklearn():
    rng = np.random.default_rng(6)
    preds = [RankedPrediction(rng.uniform(size=5), {int(rng.integers(4))}) for _ in range(40)]
    truth = np.zeros((40, 5), dtype=int)
    for row, p in enumerate(preds):
        truth[row, list(p.truth)] = 1
    predicted = np.stack([p.scores >= 0.5 for p in preds]).astype(int)
    macro, recall = macro_f1_recall(preds)
    # code 4 never occurs, so it stays out of the macro average
    assert math.isclose(macro, skm.f1_score(truth[:, :4], predicted[:, :4], average="macro", zero_division=0.0))
    assert math.isclose(recall, skm.recall_score(truth, predicted, average="micro"))


def test_code_metrics_report_keys():
    preds = [RankedPrediction(np.linspace(0.9, 0.0, 25), {0}), RankedPrediction(np.linspace(0.0, 0.9, 25), {0})]
    report = code_metrics(preds)
    assert set(report) == {"acc@5", "acc@10", "acc@20", "macro_f1", "recall", "n_instances"}
    assert report["acc@5"] == 0.5
    assert report["recall"] == 0.5
    assert report["n_instances"] == 2.0


def test_prediction_validation():
    with pytest.raises(InputError):
        RankedPrediction([0.1, float("nan")], {0})
    with pytest.raises(InputError):
        RankedPrediction([0.1, 0.2], {5})
