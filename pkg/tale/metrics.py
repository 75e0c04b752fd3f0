"""Evaluation metrics for next-code prediction and binary downstream tasks.

Top-k breaks score ties by lower code index. The binary and per-code scores come from
``sklearn.metrics``: AUROC gives half credit to tied positive/negative pairs and average precision
steps once per distinct score.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.metrics import average_precision_score, f1_score, recall_score, roc_auc_score

from . import autodiff as ad
from .errors import InputError, UndefinedMetricError
from .events import EventSequence
from .model import ModelState, code_logits, code_query_indices

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)


@dataclass(frozen=True)
class RankedPrediction:
    scores: np.ndarray
    truth: frozenset[int]

    def __post_init__(self) -> None:
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise InputError("prediction scores must be finite")
        truth = frozenset(int(c) for c in self.truth)
        if any(c < 0 or c >= scores.size for c in truth):
            raise InputError(f"truth codes {sorted(truth)} outside 0..{scores.size - 1}")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truth", truth)

    def top_k(self, k: int) -> np.ndarray:
        order = np.lexsort((np.arange(self.scores.size), -self.scores))
        return order[:k]


def acc_at_k(preds: Sequence[RankedPrediction], k: int) -> float:
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if not preds:
        raise UndefinedMetricError("Acc@K of an empty prediction list")
    hits = sum(1 for p in preds if p.truth.intersection(p.top_k(k).tolist()))
    return hits / len(preds)


def _binary_inputs(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise InputError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    y = y.astype(np.int64)
    if s.size == 0 or y.min() == y.max():
        raise UndefinedMetricError("binary metrics need both classes present")
    return s, y


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    s, y = _binary_inputs(scores, labels)
    return float(roc_auc_score(y, s))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision (the non-interpolated area under the precision-recall curve)."""

    s, y = _binary_inputs(scores, labels)
    return float(average_precision_score(y, s))


def f1_at(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    return float(f1_score(y, (s >= threshold).astype(np.int64), zero_division=0.0))


def binary_metrics(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float, float]:
    """``(auroc, auprc, f1 at 0.5)``."""

    _binary_inputs(scores, labels)
    return auroc(scores, labels), auprc(scores, labels), f1_at(scores, labels)


def macro_f1_recall(preds: Sequence[RankedPrediction], threshold: float = 0.5) -> tuple[float, float]:
    """Macro F1 over codes with at least one positive, and micro recall over all code instances."""

    if not preds:
        raise UndefinedMetricError("macro F1 of an empty prediction list")
    n_codes = preds[0].scores.size
    if any(p.scores.size != n_codes for p in preds):
        raise InputError("predictions disagree on the number of codes")
    predicted = np.stack([p.scores >= threshold for p in preds]).astype(np.int64)
    truth = np.zeros_like(predicted)
    for row, p in enumerate(preds):
        truth[row, list(p.truth)] = 1
    present = np.flatnonzero(truth.sum(axis=0) > 0)
    if present.size == 0:
        raise UndefinedMetricError("no code has a positive instance")
    macro = f1_score(truth, predicted, labels=present, average="macro", zero_division=0.0)
    recall = recall_score(truth, predicted, average="micro", zero_division=0.0)
    return float(macro), float(recall)


def code_metrics(preds: Sequence[RankedPrediction], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    report = {f"acc@{k}": acc_at_k(preds, k) for k in ks}
    report["macro_f1"], report["recall"] = macro_f1_recall(preds)
    report["n_instances"] = float(len(preds))
    return report


def code_predictions(model: ModelState, sequences: Sequence[EventSequence]) -> list[tuple[str, int, RankedPrediction]]:
    """``(patient_id, event index, prediction)`` for every code-loss query point."""

    results = []
    for seq in sequences:
        queries = code_query_indices(seq)
        if not queries:
            continue
        with ad.no_grad():
            logits = code_logits(model, seq, [float(seq.times[j]) for j in queries])
        probs = ad.sigmoid(logits).data
        for row, j in enumerate(queries):
            t_next = seq.times[seq.times > seq.times[j]][0]
            truth = frozenset(int(c) for c in seq.codes[seq.times == t_next])
            results.append((seq.patient_id, j, RankedPrediction(probs[row], truth)))
    logger.info("Scored %s code-prediction instances over %s sequences", len(results), len(sequences))
    return results
