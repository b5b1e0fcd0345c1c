"""Set-level evaluation metrics, computed from the second visit onward.

Per-patient averages divide by the patient's total visit count V by default
(``normalization="as_printed"``), even though only V - 1 visits are scored;
``normalization="evaluated"`` divides by V - 1 instead.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError

NORMALIZATIONS = ("as_printed", "evaluated")
METRIC_NAMES = ("ddi_rate", "jaccard", "f1", "err_add", "err_remove")


def _norm(n_scored: int, normalization: str) -> int:
    if normalization == "as_printed":
        return n_scored + 1
    if normalization == "evaluated":
        return n_scored
    raise ValueError(f"unknown normalization {normalization!r}")


def _aligned(a, b):
    if len(a) != len(b):
        raise EvaluationError(f"length mismatch: {len(a)} predicted vs {len(b)} target visits")


def jaccard(pred: set, true: set) -> float:
    union = pred | true
    if not union:
        return 1.0
    return len(pred & true) / len(union)


def f1(pred: set, true: set) -> float:
    if not pred and not true:
        return 1.0
    inter = len(pred & true)
    if inter == 0:
        return 0.0
    # harmonic mean of precision and recall, as a single division
    return 2.0 * inter / (len(pred) + len(true))


def ddi_pair_counts(pred: set, A) -> tuple[int, int]:
    """(interacting unordered pairs, all unordered pairs) within one set."""
    A = np.asarray(getattr(A, "entries", A))
    idx = sorted(pred)
    if len(idx) < 2:
        return 0, 0
    sub = A[np.ix_(idx, idx)]
    return int(np.triu(sub, k=1).sum()), len(idx) * (len(idx) - 1) // 2


def ddi_rate_of_set(pred: set, A) -> float:
    hit, total = ddi_pair_counts(pred, A)
    return hit / total if total else 0.0


def jaccard_patient(pred_sets, true_sets, normalization: str = "as_printed") -> float:
    _aligned(pred_sets, true_sets)
    return sum(jaccard(set(p), set(t)) for p, t in zip(pred_sets, true_sets)) / _norm(len(pred_sets), normalization)


def f1_patient(pred_sets, true_sets, normalization: str = "as_printed") -> float:
    _aligned(pred_sets, true_sets)
    return sum(f1(set(p), set(t)) for p, t in zip(pred_sets, true_sets)) / _norm(len(pred_sets), normalization)


def ddi_rate_patient(pred_sets, A) -> float:
    hit = total = 0
    for p in pred_sets:
        h, n = ddi_pair_counts(set(p), A)
        hit += h
        total += n
    return hit / total if total else 0.0


def err_patient(pred_change_sets, target_change_sets, normalization: str = "as_printed") -> float:
    """Symmetric-difference error between predicted and target change sets.

    Serves both Err(add) and Err(remove).
    """
    _aligned(pred_change_sets, target_change_sets)
    total = sum(len(set(p) ^ set(t)) for p, t in zip(pred_change_sets, target_change_sets))
    return total / _norm(len(pred_change_sets), normalization)


err_add_patient = err_patient
err_remove_patient = err_patient


def change_targets(prev_pred_sets, true_sets) -> tuple[list[set], list[set]]:
    """Target additions/removals relative to the *predicted* previous sets."""
    _aligned(prev_pred_sets, true_sets)
    adds = [set(t) - set(p) for p, t in zip(prev_pred_sets, true_sets)]
    removes = [set(p) - set(t) for p, t in zip(prev_pred_sets, true_sets)]
    return adds, removes


@dataclass
class PatientMetrics:
    patient_id: str
    n_visits: int
    ddi_rate: float
    jaccard: float
    f1: float
    err_add: float
    err_remove: float


@dataclass
class MetricsReport:
    patients: list[PatientMetrics] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    n_patients: int = 0
    n_visits_evaluated: int = 0
    normalization: str = "as_printed"

    def as_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "n_patients": self.n_patients,
            "n_visits_evaluated": self.n_visits_evaluated,
            "normalization": self.normalization,
            "patients": [vars(p).copy() for p in self.patients],
        }

    def table(self) -> str:
        lines = [f"{'metric':<12}{'mean':>12}"]
        for name in METRIC_NAMES:
            lines.append(f"{name:<12}{self.means[name]:>12.6f}")
        lines.append(f"{'patients':<12}{self.n_patients:>12d}")
        lines.append(f"{'visits':<12}{self.n_visits_evaluated:>12d}")
        return "\n".join(lines)


def evaluate(rollouts, cohort, A=None, normalization: str = "as_printed") -> MetricsReport:
    """Score rollouts (one per cohort patient) against the cohort's ground truth.

    ``rollouts`` maps patient id to an object with ``sets`` (predicted sets for
    visits 1..V, the first being the ground-truth seed), ``additions`` and
    ``removals`` (for visits 2..V).
    """
    A = cohort.ddi if A is None else A
    report = MetricsReport(normalization=normalization)
    for patient in cohort.patients:
        ro = rollouts.get(patient.patient_id)
        if ro is None:
            raise EvaluationError(f"no rollout for patient {patient.patient_id}")
        true_sets = [set(v.medications) for v in patient.visits[1:]]
        pred_sets = [set(s) for s in ro.sets[1:]]
        prev_pred = [set(s) for s in ro.sets[:-1]]
        add_t, rem_t = change_targets(prev_pred, true_sets)
        pm = PatientMetrics(
            patient_id=patient.patient_id,
            n_visits=len(patient.visits),
            ddi_rate=ddi_rate_patient(pred_sets, A),
            jaccard=jaccard_patient(pred_sets, true_sets, normalization),
            f1=f1_patient(pred_sets, true_sets, normalization),
            err_add=err_patient(ro.additions, add_t, normalization),
            err_remove=err_patient(ro.removals, rem_t, normalization),
        )
        report.patients.append(pm)
        report.n_visits_evaluated += len(true_sets)
    report.n_patients = len(report.patients)
    if not report.patients:
        raise EvaluationError("no patients to evaluate")
    # plain sequential sums keep the means reproducible to the last bit
    report.means = {name: sum(getattr(p, name) for p in report.patients) / report.n_patients
                    for name in METRIC_NAMES}
    return report


@dataclass
class JaccardStats:
    diag: list[float]
    med: list[float]
    bin_edges: np.ndarray
    diag_hist: np.ndarray
    med_hist: np.ndarray

    @property
    def diag_mean(self) -> float:
        return float(np.mean(self.diag)) if self.diag else 0.0

    @property
    def med_mean(self) -> float:
        return float(np.mean(self.med)) if self.med else 0.0


def consecutive_jaccard_stats(cohort, bins: int = 20) -> JaccardStats:
    diag, med = [], []
    for p in cohort.patients:
        for a, b in itertools.pairwise(p.visits):
            diag.append(jaccard(set(a.diagnoses), set(b.diagnoses)))
            med.append(jaccard(set(a.medications), set(b.medications)))
    edges = np.linspace(0.0, 1.0, bins + 1)
    dh, _ = np.histogram(diag, bins=edges)
    mh, _ = np.histogram(med, bins=edges)
    return JaccardStats(diag, med, edges, dh, mh)
