"""Loss terms on raw medication scores, their weighted combination, and the
momentum-based weight controller."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import ShapeError
from .model import PairForward
from .numerics import sigmoid

TERMS = ("rec", "ddi", "bce", "multi")
REC_EPS = 1e-12


def _same_length(*vs):
    n = vs[0].shape
    for v in vs[1:]:
        if v.shape != n:
            raise ShapeError(f"length mismatch {n} vs {v.shape}")


def _ddi_entries(A) -> np.ndarray:
    return np.asarray(getattr(A, "entries", A), dtype=np.float64)


def reconstruction_loss(m_prev, u, m_cur) -> float:
    return _rec(np.asarray(m_prev, float), np.asarray(u, float), np.asarray(m_cur, float))[0]


def _rec(m_prev, u, m_cur):
    _same_length(m_prev, u, m_cur)
    s_rec = sigmoid(m_prev + u)
    s_cur = sigmoid(m_cur)
    e = s_rec - s_cur
    sq = float(e @ e)
    value = np.sqrt(sq)
    # eps only in the gradient denominator; the norm is not smooth at zero
    g = e / np.sqrt(sq + REC_EPS)
    d_rec = g * s_rec * (1.0 - s_rec)
    d_cur = -g * s_cur * (1.0 - s_cur)
    return value, d_rec, d_cur


def ddi_loss(m_cur, A) -> float:
    return _ddi(np.asarray(m_cur, float), _ddi_entries(A))[0]


def _ddi(m_cur, A):
    if A.shape != (m_cur.size, m_cur.size):
        raise ShapeError(f"DDI matrix {A.shape} does not match |M|={m_cur.size}")
    o = sigmoid(m_cur)
    value = float(o @ A @ o)
    d_o = (A + A.T) @ o
    return value, d_o * o * (1.0 - o)


def bce_loss(m_hat, target) -> float:
    return _bce(np.asarray(m_hat, float), np.asarray(target, float))[0]


def _bce(x, y):
    _same_length(x, y)
    # -[y log s(x) + (1-y) log(1-s(x))] == max(x,0) - x*y + log1p(exp(-|x|))
    value = float(np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))
    return value, sigmoid(x) - y


def margin_loss(m_hat, target) -> float:
    return _multi(np.asarray(m_hat, float), np.asarray(target, float))[0]


def _multi(x, y):
    _same_length(x, y)
    n = x.size
    o = sigmoid(x)
    pos = y == 1
    neg = ~pos
    if not pos.any() or not neg.any():
        return 0.0, np.zeros(n)
    hinge = 1.0 - (o[pos][:, None] - o[neg][None, :])
    active = (hinge > 0.0).astype(np.float64)
    value = float(np.sum(np.maximum(hinge, 0.0)) / n)
    d_o = np.zeros(n)
    d_o[pos] = -active.sum(axis=1) / n
    d_o[neg] = active.sum(axis=0) / n
    return value, d_o * o * (1.0 - o)


@dataclass
class LossWeights:
    lam: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    gamma: float = 0.75

    def __post_init__(self):
        self.lam = tuple(float(x) for x in self.lam)
        if len(self.lam) != 4 or any(x < 0 for x in self.lam):
            raise ValueError("lambda must be four non-negative weights")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class PairLoss:
    total: float
    terms: dict[str, float]
    dm_prev: np.ndarray
    du: np.ndarray
    dm_cur: np.ndarray


def pair_loss_terms(pf: PairForward, target_prev, target_cur, A, gamma: float) -> dict[str, float]:
    """Unweighted per-term values; bce and multi are already gamma-blended across the pair."""
    y_prev = np.asarray(target_prev, float)
    y_cur = np.asarray(target_cur, float)
    return {
        "rec": reconstruction_loss(pf.m_prev, pf.u, pf.m_cur),
        "ddi": ddi_loss(pf.m_cur, A),
        "bce": gamma * bce_loss(pf.m_cur, y_cur) + (1 - gamma) * bce_loss(pf.m_prev, y_prev),
        "multi": gamma * margin_loss(pf.m_cur, y_cur) + (1 - gamma) * margin_loss(pf.m_prev, y_prev),
    }


def total_loss_grad(pf: PairForward, target_prev, target_cur, A, w: LossWeights,
                    disabled: frozenset[str] = frozenset()) -> PairLoss:
    """Weighted pair loss and its gradient with respect to m_prev, u and m_cur.

    Terms named in ``disabled`` are skipped outright, so they add nothing to
    the value or to any gradient.
    """
    y_prev = np.asarray(target_prev, float)
    y_cur = np.asarray(target_cur, float)
    A = _ddi_entries(A)
    g = w.gamma
    l1, l2, l3, l4 = w.lam
    n = pf.m_cur.size
    dm_prev, du, dm_cur = np.zeros(n), np.zeros(n), np.zeros(n)
    terms = {}
    total = 0.0

    if "rec" not in disabled:
        v, d_rec, d_cur = _rec(pf.m_prev, pf.u, pf.m_cur)
        terms["rec"] = v
        total += l1 * v
        dm_prev += l1 * d_rec
        du += l1 * d_rec
        dm_cur += l1 * d_cur
    if "ddi" not in disabled:
        v, d = _ddi(pf.m_cur, A)
        terms["ddi"] = v
        total += l2 * v
        dm_cur += l2 * d
    if "bce" not in disabled:
        vc, dc = _bce(pf.m_cur, y_cur)
        vp, dp = _bce(pf.m_prev, y_prev)
        terms["bce"] = g * vc + (1 - g) * vp
        total += l3 * terms["bce"]
        dm_cur += l3 * g * dc
        dm_prev += l3 * (1 - g) * dp
    if "multi" not in disabled:
        vc, dc = _multi(pf.m_cur, y_cur)
        vp, dp = _multi(pf.m_prev, y_prev)
        terms["multi"] = g * vc + (1 - g) * vp
        total += l4 * terms["multi"]
        dm_cur += l4 * g * dc
        dm_prev += l4 * (1 - g) * dp
    for name in TERMS:
        terms.setdefault(name, 0.0)
    return PairLoss(total, terms, dm_prev, du, dm_cur)


def total_loss(pf: PairForward, target_prev, target_cur, A, w: LossWeights) -> float:
    t = pair_loss_terms(pf, target_prev, target_cur, A, w.gamma)
    return float(sum(lam * t[name] for lam, name in zip(w.lam, TERMS)))


@dataclass
class MomentumState:
    mean_loss: np.ndarray = field(default_factory=lambda: np.zeros(4))
    count: int = 0
    lam: np.ndarray = field(default_factory=lambda: np.full(4, 0.25))
    eta: float = 0.08


def update_momentum_weights(state: MomentumState, losses_k, gamma: float,
                            current_ddi_rate: float) -> tuple[MomentumState, np.ndarray]:
    """One momentum step for the k-th training point.

    The first observation only seeds the running mean. A running mean below
    1e-12 yields a zero relative difference for that term. When the sample's
    DDI rate is below ``eta`` the returned effective DDI weight is zero; the
    stored weight is unaffected.
    """
    losses = np.asarray(losses_k, dtype=np.float64)
    if losses.shape != (4,) or np.any(losses < 0):
        raise ValueError("losses must be four non-negative values")
    k = state.count + 1
    if state.count == 0:
        lam = state.lam.copy()
        mean = losses.copy()
    else:
        prev = state.mean_loss
        safe = np.where(prev < 1e-12, 1.0, prev)
        diff = np.where(prev < 1e-12, 0.0, (losses - prev) / safe)
        lam = gamma * softmax(diff) + (1.0 - gamma) * state.lam
        mean = (losses + (k - 1) * prev) / k
    new_state = MomentumState(mean, k, lam, state.eta)
    effective = lam.copy()
    if current_ddi_rate < state.eta:
        effective[1] = 0.0
    return new_state, effective
