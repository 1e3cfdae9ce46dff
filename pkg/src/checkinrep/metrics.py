"""Ranking and time-prediction metrics.

Rankings are full orderings of the class set with deterministic tie
handling: among equal scores the lower class index ranks first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class RankedPrediction:
    """One example's full class ranking (best first) and its true class."""

    ranking: tuple[int, ...]
    true_class: int

    def rank_of_truth(self) -> int:
        """1-based rank of the true class; raises if it is missing."""
        try:
            return self.ranking.index(self.true_class) + 1
        except ValueError:
            raise ValueError(
                f"true class {self.true_class} not present in ranking of size {len(self.ranking)}"
            ) from None


def rank_from_scores(scores: Sequence[float] | np.ndarray, true_class: int) -> RankedPrediction:
    """Build a RankedPrediction from per-class scores (higher is better).

    Ties break toward the lower class index (stable sort on -score).
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return RankedPrediction(ranking=tuple(int(i) for i in order), true_class=int(true_class))


def acc_at_k(preds: Sequence[RankedPrediction], k: int) -> float:
    """Fraction of examples whose true class appears in the top-k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(preds) == 0:
        raise ValueError("acc_at_k of an empty prediction list is undefined")
    hits = sum(1 for p in preds if p.true_class in p.ranking[:k])
    return hits / len(preds)


def mrr(preds: Sequence[RankedPrediction]) -> float:
    """Mean reciprocal rank of the true class over full rankings."""
    if len(preds) == 0:
        raise ValueError("mrr of an empty prediction list is undefined")
    return sum(1.0 / p.rank_of_truth() for p in preds) / len(preds)


def tp_metrics(
    pred_seconds: Iterable[float],
    true_seconds: Iterable[float],
    nll_values: Iterable[float],
) -> dict[str, float]:
    """MAE and RMSE on real-second predictions plus mean per-event NLL."""
    pred = np.asarray(list(pred_seconds), dtype=np.float64)
    true = np.asarray(list(true_seconds), dtype=np.float64)
    nll = np.asarray(list(nll_values), dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/truth length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("tp_metrics of empty inputs is undefined")
    err = pred - true
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err**2))),
        "nll": float(np.mean(nll)),
    }


def mape(pred_seconds: Iterable[float], true_seconds: Iterable[float]) -> float:
    """Mean absolute percentage error; optional, not part of default reports."""
    pred = np.asarray(list(pred_seconds), dtype=np.float64)
    true = np.asarray(list(true_seconds), dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/truth length mismatch: {pred.shape} vs {true.shape}")
    if np.any(true == 0):
        raise ValueError("mape undefined for zero true values")
    return float(np.mean(np.abs((pred - true) / true)))
