"""Training over consecutive visit pairs with RMSprop, one optimizer step per
patient, and a versioned plain-text checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cohort import Cohort, Vocabulary
from .errors import ConfigError, NumericError, ParseError, ShapeError
from .losses import TERMS, LossWeights, MomentumState, pair_loss_terms, total_loss_grad, update_momentum_weights
from .metrics import ddi_rate_of_set
from .model import ModelParams, backward_pair, forward_pair
from .numerics import FFNParams, ParamTensor, sigmoid

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "MICRON-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class Hyperparams:
    embed_size: int = 64
    hidden: int = 256
    # sized for the small default cohorts; 2e-4 suits much larger ones
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 50
    gamma: float = 0.75
    eta: float = 0.08
    lam: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    mbl: bool = False
    # None shares gamma with the loss blend
    mbl_gamma: float | None = None
    seed: int = 0
    activation: str = "relu"
    no_rec: bool = False
    no_multi: bool = False
    no_ddi: bool = False

    def __post_init__(self):
        self.lam = tuple(float(x) for x in self.lam)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.embed_size < 1 or self.hidden < 1:
            raise ConfigError("embed_size and hidden must be >= 1")
        if len(self.lam) != 4 or any(x < 0 for x in self.lam):
            raise ConfigError("lam must be four non-negative weights")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @property
    def disabled_terms(self) -> frozenset[str]:
        out = set()
        if self.no_rec:
            out.add("rec")
        if self.no_ddi:
            out.add("ddi")
        if self.no_multi:
            out.add("multi")
        return frozenset(out)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lam"] = list(self.lam)
        return d

    @classmethod
    def from_mapping(cls, values: dict) -> "Hyperparams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        defaults = cls()
        out = {}
        for key, raw in values.items():
            default = getattr(defaults, key)
            try:
                if key == "lam":
                    out[key] = tuple(float(x) for x in (raw.split(",") if isinstance(raw, str) else raw))
                elif key == "mbl_gamma":
                    out[key] = None if raw in (None, "", "none") else float(raw)
                elif isinstance(default, bool):
                    out[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
                else:
                    out[key] = type(default)(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**out)


@dataclass(eq=False)
class Checkpoint:
    params: object
    hyperparams: Hyperparams
    vocabulary: Vocabulary
    kind: str = "micron"
    training_log: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def rmsprop_step(theta: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float,
                 weight_decay: float, alpha: float = 0.99, eps: float = 1e-8):
    """Return updated ``(theta, v)``; decay is applied outside the adaptive scaling."""
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    v = alpha * v + (1.0 - alpha) * g * g
    theta = theta - lr * g / (np.sqrt(v) + eps) - lr * weight_decay * theta
    return theta, v


class RMSprop:
    def __init__(self, tensors: dict[str, ParamTensor], lr: float, weight_decay: float = 0.0,
                 alpha: float = 0.99, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.eps = eps
        self.v = {name: np.zeros_like(t.value) for name, t in tensors.items()}
        self.steps = 0

    def step(self):
        for name, t in self.tensors.items():
            try:
                theta, self.v[name] = rmsprop_step(t.value, t.grad, self.v[name], self.lr,
                                                   self.weight_decay, self.alpha, self.eps)
            except NumericError as exc:
                raise NumericError(f"{exc} in {name}") from None
            t.value[...] = theta
        self.steps += 1


def _seed_prediction(m_cur: np.ndarray) -> set[int]:
    return set(np.flatnonzero(sigmoid(m_cur) >= 0.5).tolist())


def _check_training_data(cohort: Cohort, vocab: Vocabulary):
    if cohort.vocabulary != vocab:
        raise ShapeError(f"cohort vocabulary {cohort.vocabulary} != {vocab}")
    for p in cohort.patients:
        if len(p.visits) < 2:
            raise ConfigError(f"patient {p.patient_id} has fewer than 2 visits")


def train(train_cohort: Cohort, val_cohort: Cohort | None, hp: Hyperparams,
          on_epoch: Callable[[dict], None] | None = None,
          params: ModelParams | None = None) -> Checkpoint:
    """Fit the residual model; returns a checkpoint with a per-epoch loss log.

    Every patient is one batch: pair losses are summed over its consecutive
    visits and a single optimizer step follows. With ``mbl`` the loss weights
    are recomputed per visit pair; the running means restart each epoch.
    """
    vocab = train_cohort.vocabulary
    _check_training_data(train_cohort, vocab)
    if val_cohort is not None:
        _check_training_data(val_cohort, vocab)
    rng = np.random.default_rng(hp.seed)
    if params is None:
        params = ModelParams.init(vocab, hp.embed_size, hp.hidden, seed=hp.seed, activation=hp.activation)
    params.check_vocabulary(vocab)
    opt = RMSprop(params.tensors(), hp.lr, hp.weight_decay)
    A = train_cohort.ddi.entries
    disabled = hp.disabled_terms
    mask = np.array([0.0 if name in disabled else 1.0 for name in TERMS])
    mbl_gamma = hp.gamma if hp.mbl_gamma is None else hp.mbl_gamma
    momentum = MomentumState(eta=hp.eta)
    fixed = LossWeights(hp.lam, hp.gamma)

    targets = {p.patient_id: [v.med_vector(vocab) for v in p.visits] for p in train_cohort.patients}
    history = []
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(train_cohort.patients))
        momentum = MomentumState(lam=momentum.lam, eta=hp.eta)
        sums = dict.fromkeys(("total", *TERMS), 0.0)
        n_pairs = 0
        for j in order:
            patient = train_cohort.patients[j]
            y = targets[patient.patient_id]
            params.zero_grad()
            for t in range(1, len(patient.visits)):
                pf = forward_pair(params, patient.visits[t - 1], patient.visits[t])
                weights = fixed
                if hp.mbl:
                    terms = pair_loss_terms(pf, y[t - 1], y[t], A, hp.gamma)
                    rate = ddi_rate_of_set(_seed_prediction(pf.m_cur), A)
                    momentum, effective = update_momentum_weights(
                        momentum, [terms[k] for k in TERMS], mbl_gamma, rate)
                    weights = LossWeights(effective * mask, hp.gamma)
                pl = total_loss_grad(pf, y[t - 1], y[t], A, weights, disabled)
                if not np.isfinite(pl.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, patient {patient.patient_id}, visit {t + 1}")
                backward_pair(params, pf, pl.dm_prev, pl.du, pl.dm_cur)
                sums["total"] += pl.total
                for k in TERMS:
                    sums[k] += pl.terms[k]
                n_pairs += 1
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}, patient {patient.patient_id}") from None
        entry = {"epoch": epoch, "pairs": n_pairs, "steps": opt.steps}
        entry.update({f"loss_{k}": float(v) / max(n_pairs, 1) for k, v in sums.items()})
        if hp.mbl:
            entry["lambda"] = momentum.lam.tolist()
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry)
    return Checkpoint(params, hp, vocab, "micron", history)


def untrained_checkpoint(vocab: Vocabulary, hp: Hyperparams) -> Checkpoint:
    params = ModelParams.init(vocab, hp.embed_size, hp.hidden, seed=hp.seed, activation=hp.activation)
    return Checkpoint(params, hp, vocab, "micron", [])


# -- checkpoint files -------------------------------------------------------

def _tensor_lines(name: str, value: np.ndarray) -> list[str]:
    shape = value.shape
    lines = [f"tensor {name} {' '.join(str(n) for n in shape)}"]
    rows = value.reshape(1, -1) if value.ndim == 1 else value
    lines.extend(" ".join(repr(x) for x in row.tolist()) for row in rows)
    return lines


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = ckpt.params.tensors()
    meta = {
        "kind": ckpt.kind,
        "vocabulary": dataclasses.asdict(ckpt.vocabulary),
        "hyperparams": ckpt.hyperparams.as_dict(),
        "activation": _activation_of(ckpt.params),
        "tensors": list(tensors),
        "training_log": ckpt.training_log,
    }
    lines = [f"{CHECKPOINT_MAGIC} {ckpt.version}", "meta " + json.dumps(meta, sort_keys=True)]
    for name, t in tensors.items():
        lines.extend(_tensor_lines(name, t.value))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _activation_of(params) -> str:
    ffn = getattr(params, "ffn", None) or getattr(params, "head", None) or getattr(params, "add_head")
    return ffn.activation


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split(" ") if lines else []
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file", 1)
    try:
        version = int(head[1])
    except ValueError:
        raise ParseError(f"{path}: bad version {head[1]!r}", 1) from None
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})", 1)
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise ParseError(f"{path}: missing meta line", 2)
    try:
        meta = json.loads(lines[1][5:])
        vocab = Vocabulary(**meta["vocabulary"])
        hp = Hyperparams.from_mapping(meta["hyperparams"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise ParseError(f"{path}: bad meta: {exc}", 2) from None

    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split(" ")
        if parts[0] != "tensor" or len(parts) < 3:
            raise ParseError(f"{path}: expected tensor header", i + 1)
        name = parts[1]
        shape = tuple(int(n) for n in parts[2:])
        n_rows = 1 if len(shape) == 1 else shape[0]
        n_cols = shape[-1]
        rows = []
        for r in range(n_rows):
            k = i + 1 + r
            if k >= len(lines):
                raise ParseError(f"{path}: truncated tensor {name}", k + 1)
            try:
                row = [float(x) for x in lines[k].split(" ")] if n_cols else []
            except ValueError:
                raise ParseError(f"{path}: bad number in tensor {name}", k + 1) from None
            if len(row) != n_cols:
                raise ParseError(f"{path}: tensor {name} row has {len(row)} values, expected {n_cols}", k + 1)
            rows.append(row)
        arrays[name] = np.array(rows, dtype=np.float64).reshape(shape)
        i += 1 + n_rows
    if i >= len(lines):
        raise ParseError(f"{path}: missing end marker (truncated?)", len(lines))
    if list(arrays) != meta["tensors"]:
        raise ParseError(f"{path}: tensor list {list(arrays)} does not match meta {meta['tensors']}")
    try:
        params = build_params(meta["kind"], arrays, meta["activation"])
    except (ShapeError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: inconsistent parameters: {exc}") from None
    return Checkpoint(params, hp, vocab, meta["kind"], meta["training_log"], version)


def _ffn_from(arrays, prefix, activation) -> FFNParams:
    return FFNParams(*(ParamTensor(arrays[f"{prefix}.{k}"]) for k in ("W1", "b1", "W2", "b2")),
                     activation=activation)


def build_params(kind: str, arrays: dict[str, np.ndarray], activation: str):
    stack = [ParamTensor(arrays[k]) for k in ("E_d", "E_p", "W_h")]
    if kind == "micron":
        return ModelParams(*stack, _ffn_from(arrays, "ffn", activation))
    from .baselines import DualNNParams, SimNNParams
    if kind == "simnn":
        return SimNNParams(*stack, _ffn_from(arrays, "head", activation))
    if kind == "dualnn":
        return DualNNParams(*stack, _ffn_from(arrays, "add_head", activation),
                            _ffn_from(arrays, "remove_head", activation))
    raise ValueError(f"unknown model kind {kind!r}")
