"""Addition/removal threshold selection from per-medication ROC cut-offs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ParseError
from .model import ModelParams, prescribe, visit_health
from .numerics import sigmoid


@dataclass(frozen=True)
class Thresholds:
    delta1: float
    delta2: float

    def __post_init__(self):
        object.__setattr__(self, "delta1", float(self.delta1))
        object.__setattr__(self, "delta2", float(self.delta2))
        if not (1.0 >= self.delta1 >= self.delta2 >= 0.0):
            raise CalibrationError(
                f"thresholds must satisfy 1 >= delta1 >= delta2 >= 0, got {self.delta1}, {self.delta2}")

    @classmethod
    def single(cls, delta: float) -> "Thresholds":
        return cls(delta, delta)


def roc_cutoffs(scores, labels) -> list[float]:
    """Candidate ROC cut-offs: the distinct scores in descending order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise CalibrationError("no scores")
    if scores.shape != labels.shape:
        raise CalibrationError(f"{scores.size} scores but {labels.size} labels")
    return np.unique(scores)[::-1].tolist()


def nearest_rank(values: list[float], pct: float) -> float:
    """The element at 1-based position ceil(pct/100 * n), clipped to [1, n]."""
    n = len(values)
    k = min(max(math.ceil(pct / 100.0 * n - 1e-12), 1), n)
    return values[k - 1]


def validation_scores(params: ModelParams, cohort) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid scores and membership labels over every visit after the first."""
    params.check_vocabulary(cohort.vocabulary)
    scores, labels = [], []
    for patient in cohort.patients:
        for visit in patient.visits[1:]:
            scores.append(sigmoid(prescribe(params, visit_health(params, visit))))
            labels.append(visit.med_vector(cohort.vocabulary))
    if not scores:
        raise CalibrationError("validation cohort has no scorable visits")
    return np.array(scores), np.array(labels)


def thresholds_from_scores(scores: np.ndarray, labels: np.ndarray,
                           low_pct: float = 5.0, high_pct: float = 95.0) -> Thresholds:
    """Average per-medication nearest-rank picks into the two global thresholds.

    Medications that never occur in the labels are left out of both pools.
    """
    pool1, pool2 = [], []
    for i in range(scores.shape[1]):
        if not labels[:, i].any():
            continue
        cut = roc_cutoffs(scores[:, i], labels[:, i])
        pool1.append(nearest_rank(cut, low_pct))
        pool2.append(nearest_rank(cut, high_pct))
    if not pool1:
        raise CalibrationError("no medication occurs in the validation visits")
    d1 = float(np.mean(pool1))
    d2 = min(float(np.mean(pool2)), d1)
    return Thresholds(d1, d2)


def select_thresholds(params: ModelParams, val_cohort) -> Thresholds:
    return thresholds_from_scores(*validation_scores(params, val_cohort))


def save_thresholds(th: Thresholds, path) -> None:
    Path(path).write_text(f"{th.delta1!r}\n{th.delta2!r}\n", encoding="utf-8")


def load_thresholds(path) -> Thresholds:
    text = Path(path).read_text(encoding="utf-8").split()
    if len(text) != 2:
        raise ParseError(f"{path}: expected two numbers, found {len(text)}")
    try:
        return Thresholds(float(text[0]), float(text[1]))
    except ValueError:
        raise ParseError(f"{path}: thresholds are not numbers") from None
