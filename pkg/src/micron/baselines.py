"""Change-prediction baselines that share the health representation stack.

SimNN classifies each medication into add / remove / remain; DualNN has
separate sigmoid heads for additions and removals. Both are supervised with
change targets derived from consecutive ground-truth sets and, at
evaluation, chain their own predicted sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, PatientRecord, Visit, Vocabulary
from .errors import ConfigError, NumericError, ShapeError
from .inference import Rollout, apply_change
from .model import health_backward, health_forward
from .numerics import FFNParams, ParamTensor, ffn_apply, ffn_backward, ffn_forward, sigmoid
from .trainer import Checkpoint, Hyperparams, RMSprop, _check_training_data

ADD, REMOVE, REMAIN = 0, 1, 2
# argmax order encoding the tie-break priority remain > add > remove
_PRIORITY = (REMAIN, ADD, REMOVE)
KINDS = ("simnn", "dualnn")


class _Stack:
    E_d: ParamTensor
    E_p: ParamTensor
    W_h: ParamTensor

    @property
    def embed_size(self) -> int:
        return self.E_d.shape[0]

    def _stack_tensors(self) -> dict[str, ParamTensor]:
        return {"E_d": self.E_d, "E_p": self.E_p, "W_h": self.W_h}

    def zero_grad(self):
        for t in self.tensors().values():
            t.zero_grad()

    def check_vocabulary(self, vocab: Vocabulary):
        if self.vocabulary != vocab:
            raise ShapeError(f"model vocabulary {self.vocabulary} does not match data {vocab}")

    @staticmethod
    def _init_stack(vocab: Vocabulary, s: int, rng: np.random.Generator):
        def uni(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return ParamTensor(rng.uniform(-a, a, size=shape))
        return (uni((s, vocab.n_diag), vocab.n_diag), uni((s, vocab.n_proc), vocab.n_proc),
                uni((s, 2 * s), 2 * s))


@dataclass(eq=False)
class SimNNParams(_Stack):
    E_d: ParamTensor
    E_p: ParamTensor
    W_h: ParamTensor
    head: FFNParams

    def __post_init__(self):
        if self.head.n_out % 3 or self.head.n_in != self.embed_size:
            raise ShapeError("SimNN head must map s -> 3|M|")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.E_d.shape[1], self.E_p.shape[1], self.head.n_out // 3)

    def tensors(self) -> dict[str, ParamTensor]:
        out = self._stack_tensors()
        out.update({f"head.{k}": v for k, v in self.head.tensors().items()})
        return out

    @classmethod
    def init(cls, vocab: Vocabulary, embed_size: int = 64, hidden: int = 256, seed: int = 0,
             activation: str = "relu") -> "SimNNParams":
        rng = np.random.default_rng(seed)
        stack = cls._init_stack(vocab, embed_size, rng)
        return cls(*stack, FFNParams.init(embed_size, hidden, 3 * vocab.n_med, rng, activation))


@dataclass(eq=False)
class DualNNParams(_Stack):
    E_d: ParamTensor
    E_p: ParamTensor
    W_h: ParamTensor
    add_head: FFNParams
    remove_head: FFNParams

    def __post_init__(self):
        if self.add_head.n_out != self.remove_head.n_out:
            raise ShapeError("DualNN heads disagree on |M|")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.E_d.shape[1], self.E_p.shape[1], self.add_head.n_out)

    def tensors(self) -> dict[str, ParamTensor]:
        out = self._stack_tensors()
        out.update({f"add_head.{k}": v for k, v in self.add_head.tensors().items()})
        out.update({f"remove_head.{k}": v for k, v in self.remove_head.tensors().items()})
        return out

    @classmethod
    def init(cls, vocab: Vocabulary, embed_size: int = 64, hidden: int = 256, seed: int = 0,
             activation: str = "relu") -> "DualNNParams":
        rng = np.random.default_rng(seed)
        stack = cls._init_stack(vocab, embed_size, rng)
        return cls(*stack,
                   FFNParams.init(embed_size, hidden, vocab.n_med, rng, activation),
                   FFNParams.init(embed_size, hidden, vocab.n_med, rng, activation))


def simnn_decide(logits: np.ndarray) -> tuple[frozenset[int], frozenset[int]]:
    """Per-medication argmax over (add, remove, remain) logits of shape (|M|, 3)."""
    ordered = logits[:, list(_PRIORITY)]
    choice = np.asarray(_PRIORITY)[np.argmax(ordered, axis=1)]
    return frozenset(np.flatnonzero(choice == ADD).tolist()), frozenset(np.flatnonzero(choice == REMOVE).tolist())


def simnn_predict(params: SimNNParams, visit_cur: Visit, prev_set) -> tuple[frozenset[int], frozenset[int]]:
    h, _ = health_forward(params, visit_cur)
    return simnn_decide(ffn_apply(params.head, h).reshape(-1, 3))


def dualnn_decide(add_scores, remove_scores, delta: float = 0.5) -> tuple[frozenset[int], frozenset[int]]:
    """Threshold both heads; a medication flagged by both is removed."""
    if delta >= 1.0:
        return frozenset(), frozenset()
    remove = sigmoid(remove_scores) >= delta
    add = (sigmoid(add_scores) >= delta) & ~remove
    return frozenset(np.flatnonzero(add).tolist()), frozenset(np.flatnonzero(remove).tolist())


def dualnn_predict(params: DualNNParams, visit_cur: Visit, prev_set,
                   delta: float = 0.5) -> tuple[frozenset[int], frozenset[int]]:
    h, _ = health_forward(params, visit_cur)
    return dualnn_decide(ffn_apply(params.add_head, h), ffn_apply(params.remove_head, h), delta)


def ground_truth_changes(prev: frozenset[int], cur: frozenset[int]) -> tuple[set[int], set[int]]:
    return set(cur) - set(prev), set(prev) - set(cur)


def baseline_rollout(kind: str, params, patient: PatientRecord, delta: float = 0.5) -> Rollout:
    current = frozenset(patient.visits[0].medications)
    out = Rollout(patient.patient_id, sets=[current])
    for visit in patient.visits[1:]:
        if kind == "simnn":
            N, O = simnn_predict(params, visit, current)
        else:
            N, O = dualnn_predict(params, visit, current, delta)
        current = apply_change(current, N, O)
        out.sets.append(current)
        out.additions.append(N)
        out.removals.append(O)
    return out


def baseline_rollout_cohort(kind: str, params, cohort: Cohort, delta: float = 0.5) -> dict[str, Rollout]:
    params.check_vocabulary(cohort.vocabulary)
    return {p.patient_id: baseline_rollout(kind, params, p, delta) for p in cohort.patients}


def _simnn_step(params: SimNNParams, visit: Visit, add: set[int], remove: set[int]) -> float:
    h, hc = health_forward(params, visit)
    y, cache = ffn_forward(params.head, h)
    logits = y.reshape(-1, 3)
    target = np.full(logits.shape[0], REMAIN)
    target[list(add)] = ADD
    target[list(remove)] = REMOVE
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    loss = float(np.sum(logz - shifted[rows, target]))
    grad = np.exp(shifted - logz[:, None])
    grad[rows, target] -= 1.0
    dh = ffn_backward(params.head, cache, grad.reshape(-1))
    health_backward(params, hc, dh)
    return loss


def _bce_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    value = float(np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))
    return value, sigmoid(x) - y


def _dualnn_step(params: DualNNParams, visit: Visit, add: set[int], remove: set[int]) -> float:
    n_med = params.vocabulary.n_med
    h, hc = health_forward(params, visit)
    dh = np.zeros_like(h)
    loss = 0.0
    for head, target in ((params.add_head, add), (params.remove_head, remove)):
        y = np.zeros(n_med)
        y[list(target)] = 1.0
        out, cache = ffn_forward(head, h)
        value, g = _bce_with_grad(out, y)
        loss += value
        dh += ffn_backward(head, cache, g)
    health_backward(params, hc, dh)
    return loss


def train_baseline(kind: str, train_cohort: Cohort, val_cohort: Cohort | None,
                   hp: Hyperparams, on_epoch=None) -> Checkpoint:
    """Same batching and optimizer as the residual model: one step per patient."""
    if kind not in KINDS:
        raise ConfigError(f"unknown baseline {kind!r}")
    vocab = train_cohort.vocabulary
    _check_training_data(train_cohort, vocab)
    if val_cohort is not None:
        _check_training_data(val_cohort, vocab)
    cls = SimNNParams if kind == "simnn" else DualNNParams
    step_fn = _simnn_step if kind == "simnn" else _dualnn_step
    params = cls.init(vocab, hp.embed_size, hp.hidden, hp.seed, hp.activation)
    opt = RMSprop(params.tensors(), hp.lr, hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    history = []
    for epoch in range(1, hp.epochs + 1):
        total = 0.0
        n_pairs = 0
        for j in rng.permutation(len(train_cohort.patients)):
            patient = train_cohort.patients[j]
            params.zero_grad()
            for prev, cur in zip(patient.visits, patient.visits[1:]):
                add, remove = ground_truth_changes(prev.medications, cur.medications)
                loss = step_fn(params, cur, add, remove)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, patient {patient.patient_id}")
                total += loss
                n_pairs += 1
            opt.step()
        entry = {"epoch": epoch, "pairs": n_pairs, "steps": opt.steps, "loss_total": total / max(n_pairs, 1)}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return Checkpoint(params, hp, vocab, kind, history)
