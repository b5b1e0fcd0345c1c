"""Visit-by-visit medication updating.

The medication vector holds raw cumulative scores; the sigmoid is applied
only when thresholding into addition and removal sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import Thresholds
from .cohort import PatientRecord, Visit
from .errors import EvaluationError, ShapeError
from .model import ModelParams, prescribe, visit_health
from .numerics import ffn_apply, sigmoid

MODES = ("dense", "smart")


@dataclass
class MedicationState:
    vector: np.ndarray
    set: frozenset[int]


@dataclass
class Rollout:
    """Per-visit predictions for one patient.

    ``sets[0]`` is the ground-truth first prescription; ``additions[k]`` and
    ``removals[k]`` produced ``sets[k + 1]``.
    """

    patient_id: str
    sets: list[frozenset[int]] = field(default_factory=list)
    additions: list[frozenset[int]] = field(default_factory=list)
    removals: list[frozenset[int]] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list)

    def records(self):
        for k, (n, o) in enumerate(zip(self.additions, self.removals)):
            yield {"patient_id": self.patient_id, "t": k + 2, "add": sorted(n),
                   "remove": sorted(o), "set": sorted(self.sets[k + 1])}


def init_state(params: ModelParams, first_visit: Visit) -> MedicationState:
    vector = prescribe(params, visit_health(params, first_visit))
    return MedicationState(vector, frozenset(first_visit.medications))


def code_delta(prev: tuple[int, ...], cur: tuple[int, ...]) -> dict[int, int]:
    """Sparse signed difference ``cur - prev`` of two multi-hot index sets."""
    a, b = set(prev), set(cur)
    out = {i: 1 for i in b - a}
    out.update({i: -1 for i in a - b})
    return out


def smart_residual(params: ModelParams, delta_d: dict[int, int], delta_p: dict[int, int]) -> np.ndarray:
    """Residual health representation from code deltas only.

    Valid because the health network is linear, so the difference of two
    health representations equals the network applied to the difference of
    the embeddings.
    """
    s = params.embed_size
    parts = []
    for table, delta in ((params.E_d.value, delta_d), (params.E_p.value, delta_p)):
        if not delta:
            parts.append(np.zeros(s))
            continue
        idx = np.fromiter(delta.keys(), dtype=np.intp, count=len(delta))
        if idx.min() < 0 or idx.max() >= table.shape[1]:
            raise ShapeError(f"code index out of range [0, {table.shape[1]})")
        sign = np.fromiter(delta.values(), dtype=np.float64, count=len(delta))
        parts.append(table[:, idx] @ sign)
    return params.W_h.value @ np.concatenate(parts)


def dense_residual(params: ModelParams, prev: Visit, cur: Visit) -> np.ndarray:
    return visit_health(params, cur) - visit_health(params, prev)


def update_medication_vector(state: MedicationState, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != state.vector.shape:
        raise ShapeError(f"update of shape {u.shape} for vector of shape {state.vector.shape}")
    return state.vector + u


def change_sets(vector, th: Thresholds) -> tuple[frozenset[int], frozenset[int]]:
    """Addition set ``sigma >= delta1`` and removal set ``sigma <= delta2``.

    When the thresholds coincide an index sitting exactly on them is an
    addition, keeping the two sets disjoint. ``delta1 = 1`` adds nothing and
    ``delta2 = 0`` removes nothing, even where the sigmoid rounds to 1 or 0.
    """
    if not (1.0 >= th.delta1 >= th.delta2 >= 0.0):
        raise ShapeError("thresholds violate 1 >= delta1 >= delta2 >= 0")
    s = sigmoid(vector)
    # the sigmoid never reaches 0 or 1 exactly; rounding can, so the extreme
    # thresholds are handled explicitly
    add = s >= th.delta1 if th.delta1 < 1.0 else np.zeros(s.shape, dtype=bool)
    remove = (s <= th.delta2) & ~add if th.delta2 > 0.0 else np.zeros(s.shape, dtype=bool)
    return frozenset(np.flatnonzero(add).tolist()), frozenset(np.flatnonzero(remove).tolist())


def apply_change(prev_set, N, O) -> frozenset[int]:
    return frozenset((set(prev_set) | set(N)) - set(O))


def rollout(params: ModelParams, th: Thresholds, patient: PatientRecord,
            mode: str = "dense", memory: bool = True) -> Rollout:
    """Roll predictions through a patient's visits, feeding back predicted sets.

    ``memory=False`` drops the carried medication vector and thresholds the
    residual update alone.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(patient.visits) < 2:
        raise EvaluationError(f"patient {patient.patient_id} has fewer than 2 visits")
    state = init_state(params, patient.visits[0])
    out = Rollout(patient.patient_id, sets=[state.set])
    for prev, cur in zip(patient.visits, patient.visits[1:]):
        if mode == "dense":
            r = dense_residual(params, prev, cur)
        else:
            r = smart_residual(params, code_delta(prev.diagnoses, cur.diagnoses),
                               code_delta(prev.procedures, cur.procedures))
        u = ffn_apply(params.ffn, r)
        vector = update_medication_vector(state, u) if memory else u
        N, O = change_sets(vector, th)
        state = MedicationState(vector, apply_change(state.set, N, O))
        out.sets.append(state.set)
        out.additions.append(N)
        out.removals.append(O)
        out.residuals.append(r)
    return out


def rollout_cohort(params: ModelParams, th: Thresholds, cohort, mode: str = "dense",
                   memory: bool = True) -> dict[str, Rollout]:
    params.check_vocabulary(cohort.vocabulary)
    return {p.patient_id: rollout(params, th, p, mode, memory) for p in cohort.patients}


def copy_forward_rollouts(cohort) -> dict[str, Rollout]:
    """Null model: every visit repeats the first ground-truth prescription."""
    out = {}
    for p in cohort.patients:
        first = frozenset(p.visits[0].medications)
        n = len(p.visits) - 1
        out[p.patient_id] = Rollout(p.patient_id, sets=[first] * (n + 1),
                                    additions=[frozenset()] * n, removals=[frozenset()] * n)
    return out
