"""EHR data model, a seeded synthetic cohort generator, and the cohort file format.

File layout (UTF-8, LF)::

    #MICRON-COHORT 1 {"n_diag": .., "n_proc": .., "n_med": .., "n_patients": .., "n_visits": .., "config": {..}}
    0 1 0 ...            <- n_med DDI rows, space separated
    p0000,1,3;17,2,0;5;9 <- patient_id, visit_index, diagnoses, procedures, medications

Index lists are semicolon separated and may be empty.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

FORMAT_MAGIC = "#MICRON-COHORT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    n_diag: int
    n_proc: int
    n_med: int

    def __post_init__(self):
        for name in ("n_diag", "n_proc", "n_med"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Visit:
    """One encounter. Codes are stored as sorted index tuples; use
    :func:`multi_hot` for the dense vector form."""

    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    medications: frozenset[int]

    @classmethod
    def of(cls, diagnoses: Iterable[int], procedures: Iterable[int],
           medications: Iterable[int]) -> "Visit":
        return cls(tuple(sorted(set(int(i) for i in diagnoses))),
                   tuple(sorted(set(int(i) for i in procedures))),
                   frozenset(int(i) for i in medications))

    def diag_vector(self, vocab: Vocabulary) -> np.ndarray:
        return multi_hot(self.diagnoses, vocab.n_diag)

    def proc_vector(self, vocab: Vocabulary) -> np.ndarray:
        return multi_hot(self.procedures, vocab.n_proc)

    def med_vector(self, vocab: Vocabulary) -> np.ndarray:
        return multi_hot(self.medications, vocab.n_med)


def multi_hot(indices: Iterable[int], n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float64)
    idx = list(indices)
    if idx:
        v[idx] = 1.0
    return v


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True, eq=False)
class DDIMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError(f"DDI matrix must be square, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise ConfigError("DDI entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise ConfigError("DDI matrix must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ConfigError("DDI matrix must have a zero diagonal")
        a = a.astype(np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n_med(self) -> int:
        return self.entries.shape[0]

    def __eq__(self, other):
        return isinstance(other, DDIMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 50
    visits_min: int = 2
    visits_max: int = 6
    n_diag: int = 40
    n_proc: int = 20
    n_med: int = 20
    diag_per_visit_min: int = 2
    diag_per_visit_max: int = 4
    # probability a diagnosis carries over to the next visit
    diag_persistence: float = 0.5
    # medications implied by each diagnosis under the hidden rule table
    med_rule_fanout: int = 2
    # probability a medication from the previous visit is kept regardless of diagnoses
    med_carryover: float = 0.5
    # per-medication dropout of rule medications and per-medication spurious draw rate
    noise_rate: float = 0.05
    ddi_density: float = 0.05

    def __post_init__(self):
        ints = ("n_patients", "visits_min", "visits_max", "n_diag", "n_proc", "n_med",
                "diag_per_visit_min", "diag_per_visit_max", "med_rule_fanout")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.visits_min < 2:
            raise ConfigError("visits_min must be >= 2 (single-visit patients are not retained)")
        if self.visits_min > self.visits_max:
            raise ConfigError("visits_min > visits_max")
        if self.diag_per_visit_min > self.diag_per_visit_max:
            raise ConfigError("diag_per_visit_min > diag_per_visit_max")
        if self.diag_per_visit_max > self.n_diag:
            raise ConfigError("diag_per_visit_max exceeds n_diag")
        if self.med_rule_fanout > self.n_med:
            raise ConfigError("med_rule_fanout exceeds n_med")
        for name in ("diag_persistence", "med_carryover", "noise_rate", "ddi_density"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, values: dict) -> "GeneratorConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        out = {}
        defaults = cls()
        for key, raw in values.items():
            kind = type(getattr(defaults, key))
            try:
                out[key] = kind(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**out)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Cohort:
    vocabulary: Vocabulary
    patients: tuple[PatientRecord, ...]
    ddi: DDIMatrix
    generator_config: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        v = self.vocabulary
        if self.ddi.n_med != v.n_med:
            raise ConfigError(f"DDI matrix is {self.ddi.n_med}x{self.ddi.n_med} but n_med={v.n_med}")
        for p in self.patients:
            for visit in p.visits:
                _check_visit(visit, v)

    def __len__(self):
        return len(self.patients)

    @property
    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)

    def subset(self, patients: Sequence[PatientRecord]) -> "Cohort":
        return Cohort(self.vocabulary, tuple(patients), self.ddi, self.generator_config)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)


def _check_visit(visit: Visit, v: Vocabulary):
    for name, idx, n in (("diagnosis", visit.diagnoses, v.n_diag),
                         ("procedure", visit.procedures, v.n_proc),
                         ("medication", visit.medications, v.n_med)):
        for i in idx:
            if not 0 <= i < n:
                raise ConfigError(f"{name} index {i} out of range [0, {n})")


def generate_ddi_matrix(n_med: int, density: float, seed: int) -> DDIMatrix:
    if n_med < 1:
        raise ConfigError("n_med must be >= 1")
    if not 0.0 <= density <= 1.0:
        raise ConfigError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n_med, n_med)) < density, k=1)
    a = (upper | upper.T).astype(np.int8)
    return DDIMatrix(a)


def _draw_structure(c: GeneratorConfig, rng: np.random.Generator):
    ddi = generate_ddi_matrix(c.n_med, c.ddi_density, int(rng.integers(2**31)))
    med_rules = [rng.choice(c.n_med, size=c.med_rule_fanout, replace=False) for _ in range(c.n_diag)]
    proc_rule = rng.integers(0, c.n_proc, size=c.n_diag)
    return ddi, med_rules, proc_rule


def hidden_rules(config: GeneratorConfig, seed: int) -> list[frozenset[int]]:
    """The diagnosis -> medication rule table used by ``generate_cohort(config, seed)``."""
    _, med_rules, _ = _draw_structure(config, np.random.default_rng(seed))
    return [frozenset(int(m) for m in r) for r in med_rules]


def generate_cohort(config: GeneratorConfig, seed: int) -> Cohort:
    """Simulate patients whose prescriptions follow a hidden diagnosis rule table.

    Diagnoses persist between visits with ``diag_persistence`` and are topped
    up with fresh draws; each diagnosis implies ``med_rule_fanout`` medications
    and one procedure. Medications from the previous visit survive with
    ``med_carryover``, which is what makes medication sets overlap more than
    diagnosis sets across consecutive visits.
    """
    c = config
    rng = np.random.default_rng(seed)
    ddi, med_rules, proc_rule = _draw_structure(c, rng)

    def draw_fresh(k: int, exclude: set[int]) -> list[int]:
        pool = np.setdiff1d(np.arange(c.n_diag), np.fromiter(exclude, dtype=int, count=len(exclude)))
        k = min(k, pool.size)
        return rng.choice(pool, size=k, replace=False).tolist() if k > 0 else []

    patients = []
    width = max(4, len(str(c.n_patients - 1)))
    for j in range(c.n_patients):
        n_visits = int(rng.integers(c.visits_min, c.visits_max + 1))
        visits = []
        diags: set[int] = set()
        meds: set[int] = set()
        for t in range(n_visits):
            target = int(rng.integers(c.diag_per_visit_min, c.diag_per_visit_max + 1))
            kept = {d for d in sorted(diags) if rng.random() < c.diag_persistence}
            if len(kept) > target:
                kept = set(rng.choice(sorted(kept), size=target, replace=False).tolist())
            diags = kept | set(draw_fresh(target - len(kept), kept))

            rule_image = set()
            for d in sorted(diags):
                rule_image.update(int(m) for m in med_rules[d])
            new_meds = {m for m in sorted(rule_image) if rng.random() >= c.noise_rate}
            new_meds |= {m for m in sorted(meds) if rng.random() < c.med_carryover}
            new_meds |= {int(m) for m in np.flatnonzero(rng.random(c.n_med) < c.noise_rate)}
            if not new_meds:
                new_meds = set(rule_image) or {int(rng.integers(c.n_med))}
            meds = new_meds

            procs = {int(proc_rule[d]) for d in diags}
            procs ^= {int(p) for p in np.flatnonzero(rng.random(c.n_proc) < c.noise_rate)}
            visits.append(Visit.of(diags, procs, meds))
        patients.append(PatientRecord(f"p{j:0{width}d}", tuple(visits)))

    return Cohort(Vocabulary(c.n_diag, c.n_proc, c.n_med), tuple(patients), ddi,
                  {"seed": int(seed), **c.as_dict()})


def split_cohort(cohort: Cohort, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                 seed: int = 0) -> tuple[Cohort, Cohort, Cohort]:
    """Patient-level train/val/test partition.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(cohort.patients)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    pats = [cohort.patients[i] for i in order]
    train = pats[:n_train]
    val = pats[n_train:n_train + n_val]
    test = pats[n_train + n_val:]
    return cohort.subset(train), cohort.subset(val), cohort.subset(test)


def _fmt_idx(idx: Iterable[int]) -> str:
    return ";".join(str(i) for i in sorted(idx))


def save_cohort(cohort: Cohort, path) -> None:
    v = cohort.vocabulary
    header = {
        "n_diag": v.n_diag, "n_proc": v.n_proc, "n_med": v.n_med,
        "n_patients": len(cohort.patients), "n_visits": cohort.n_visits,
        "config": cohort.generator_config,
    }
    lines = [f"{FORMAT_MAGIC} {FORMAT_VERSION} {json.dumps(header, sort_keys=True)}"]
    ddi = cohort.ddi.entries.astype(int)
    lines.extend(" ".join(str(x) for x in row) for row in ddi)
    for p in cohort.patients:
        for t, visit in enumerate(p.visits, start=1):
            lines.append(",".join([p.patient_id, str(t), _fmt_idx(visit.diagnoses),
                                   _fmt_idx(visit.procedures), _fmt_idx(visit.medications)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_idx(field_: str, n: int, what: str, lineno: int) -> list[int]:
    if field_ == "":
        return []
    try:
        idx = [int(x) for x in field_.split(";")]
    except ValueError:
        raise ParseError(f"bad {what} index list {field_!r}", lineno) from None
    for i in idx:
        if not 0 <= i < n:
            raise ParseError(f"{what} index {i} out of range [0, {n})", lineno)
    return idx


def load_cohort(path) -> Cohort:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    parts = lines[0].split(" ", 2)
    if len(parts) != 3 or parts[0] != FORMAT_MAGIC:
        raise ParseError("missing cohort header", 1)
    if parts[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported cohort format version {parts[1]}", 1)
    try:
        header = json.loads(parts[2])
        vocab = Vocabulary(int(header["n_diag"]), int(header["n_proc"]), int(header["n_med"]))
        n_patients = int(header["n_patients"])
        n_visits = int(header["n_visits"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise ParseError(f"bad header: {exc}", 1) from None

    n_med = vocab.n_med
    if len(lines) < 1 + n_med:
        raise ParseError(f"truncated file: expected {n_med} DDI rows", len(lines) + 1)
    rows = []
    for k in range(n_med):
        lineno = k + 2
        try:
            row = [int(x) for x in lines[1 + k].split(" ")]
        except ValueError:
            raise ParseError("bad DDI row", lineno) from None
        if len(row) != n_med:
            raise ParseError(f"DDI row has {len(row)} entries, expected {n_med}", lineno)
        rows.append(row)
    try:
        ddi = DDIMatrix(np.array(rows, dtype=np.int8))
    except ConfigError as exc:
        raise ParseError(str(exc), 2) from None

    visit_lines = lines[1 + n_med:]
    if len(visit_lines) != n_visits:
        raise ParseError(f"expected {n_visits} visit lines, found {len(visit_lines)} (truncated?)",
                         len(lines) + 1 if len(visit_lines) < n_visits else 2 + n_med + n_visits)
    grouped: dict[str, list[Visit]] = {}
    for k, line in enumerate(visit_lines):
        lineno = 2 + n_med + k
        cols = line.split(",")
        if len(cols) != 5:
            raise ParseError(f"expected 5 comma-separated fields, got {len(cols)}", lineno)
        pid, t_raw = cols[0], cols[1]
        try:
            t = int(t_raw)
        except ValueError:
            raise ParseError(f"bad visit index {t_raw!r}", lineno) from None
        visits = grouped.setdefault(pid, [])
        if t != len(visits) + 1:
            raise ParseError(f"visit index {t} out of order for patient {pid}", lineno)
        visits.append(Visit.of(_parse_idx(cols[2], vocab.n_diag, "diagnosis", lineno),
                               _parse_idx(cols[3], vocab.n_proc, "procedure", lineno),
                               _parse_idx(cols[4], vocab.n_med, "medication", lineno)))
    if len(grouped) != n_patients:
        raise ParseError(f"header declares {n_patients} patients, found {len(grouped)}", 1)

    patients = []
    for pid, visits in grouped.items():
        if len(visits) < 2:
            log.warning("dropping single-visit patient %s", pid)
            continue
        patients.append(PatientRecord(pid, tuple(visits)))
    return Cohort(vocab, tuple(patients), ddi, header.get("config", {}))
