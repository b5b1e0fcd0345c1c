"""The residual medication network: code embeddings, a bias-free health
network, and a feed-forward prescription network applied to visits and to
the difference between consecutive visits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Visit, Vocabulary
from .errors import ShapeError
from .numerics import FFNCache, FFNParams, ParamTensor, ffn_apply, ffn_backward, ffn_forward


@dataclass(eq=False)
class ModelParams:
    E_d: ParamTensor
    E_p: ParamTensor
    W_h: ParamTensor
    ffn: FFNParams

    def __post_init__(self):
        s = self.embed_size
        if s < 1:
            raise ShapeError("embedding size must be >= 1")
        if self.E_p.shape[0] != s or self.W_h.shape != (s, 2 * s) or self.ffn.n_in != s:
            raise ShapeError(
                f"inconsistent shapes E_d={self.E_d.shape} E_p={self.E_p.shape} "
                f"W_h={self.W_h.shape} ffn_in={self.ffn.n_in}"
            )

    @property
    def embed_size(self) -> int:
        return self.E_d.shape[0]

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.E_d.shape[1], self.E_p.shape[1], self.ffn.n_out)

    def tensors(self) -> dict[str, ParamTensor]:
        out = {"E_d": self.E_d, "E_p": self.E_p, "W_h": self.W_h}
        out.update({f"ffn.{k}": v for k, v in self.ffn.tensors().items()})
        return out

    def zero_grad(self):
        for t in self.tensors().values():
            t.zero_grad()

    def check_vocabulary(self, vocab: Vocabulary):
        if self.vocabulary != vocab:
            raise ShapeError(f"model vocabulary {self.vocabulary} does not match data {vocab}")

    @classmethod
    def init(cls, vocab: Vocabulary, embed_size: int = 64, hidden: int = 256, seed: int = 0,
             activation: str = "relu") -> "ModelParams":
        """Scaled-uniform initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        s = embed_size

        def uni(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return ParamTensor(rng.uniform(-a, a, size=shape))

        return cls(
            E_d=uni((s, vocab.n_diag), vocab.n_diag),
            E_p=uni((s, vocab.n_proc), vocab.n_proc),
            W_h=uni((s, 2 * s), 2 * s),
            ffn=FFNParams.init(s, hidden, vocab.n_med, rng, activation=activation),
        )

    @classmethod
    def linear_test_mode(cls, vocab: Vocabulary, embed_size: int = 4, hidden: int = 8,
                         seed: int = 0) -> "ModelParams":
        """Identity activation and zero biases, so the prescription network is linear."""
        p = cls.init(vocab, embed_size, hidden, seed, activation="identity")
        p.ffn.b1.value[...] = 0.0
        p.ffn.b2.value[...] = 0.0
        return p


def embed_visit(params: ModelParams, d, p) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if d.shape != (params.E_d.shape[1],) or p.shape != (params.E_p.shape[1],):
        raise ShapeError(f"visit vectors {d.shape}/{p.shape} do not match vocabulary {params.vocabulary}")
    return params.E_d.value @ d, params.E_p.value @ p


def health_repr(params: ModelParams, d_e, p_e) -> np.ndarray:
    s = params.embed_size
    d_e = np.asarray(d_e, dtype=np.float64)
    p_e = np.asarray(p_e, dtype=np.float64)
    if d_e.shape != (s,) or p_e.shape != (s,):
        raise ShapeError(f"embeddings must have length {s}")
    return params.W_h.value @ np.concatenate([d_e, p_e])


def prescribe(params: ModelParams, h) -> np.ndarray:
    return ffn_apply(params.ffn, h)


def visit_health(params: ModelParams, visit: Visit) -> np.ndarray:
    vocab = params.vocabulary
    d_e, p_e = embed_visit(params, visit.diag_vector(vocab), visit.proc_vector(vocab))
    return health_repr(params, d_e, p_e)


@dataclass
class PairForward:
    """Forward quantities for a consecutive pair plus what backward needs."""

    h_prev: np.ndarray
    h_cur: np.ndarray
    r: np.ndarray
    m_prev: np.ndarray
    m_cur: np.ndarray
    u: np.ndarray
    # cached intermediates
    d_prev: np.ndarray
    p_prev: np.ndarray
    d_cur: np.ndarray
    p_cur: np.ndarray
    x_prev: np.ndarray
    x_cur: np.ndarray
    cache_prev: FFNCache
    cache_cur: FFNCache
    cache_res: FFNCache


def forward_pair(params: ModelParams, visit_prev: Visit, visit_cur: Visit) -> PairForward:
    vocab = params.vocabulary
    d_prev, p_prev = visit_prev.diag_vector(vocab), visit_prev.proc_vector(vocab)
    d_cur, p_cur = visit_cur.diag_vector(vocab), visit_cur.proc_vector(vocab)
    x_prev = np.concatenate(embed_visit(params, d_prev, p_prev))
    x_cur = np.concatenate(embed_visit(params, d_cur, p_cur))
    h_prev = params.W_h.value @ x_prev
    h_cur = params.W_h.value @ x_cur
    r = h_cur - h_prev
    m_prev, cache_prev = ffn_forward(params.ffn, h_prev)
    m_cur, cache_cur = ffn_forward(params.ffn, h_cur)
    u, cache_res = ffn_forward(params.ffn, r)
    return PairForward(h_prev, h_cur, r, m_prev, m_cur, u,
                       d_prev, p_prev, d_cur, p_cur, x_prev, x_cur,
                       cache_prev, cache_cur, cache_res)


def backward_pair(params: ModelParams, pf: PairForward, dm_prev: np.ndarray,
                  du: np.ndarray, dm_cur: np.ndarray) -> None:
    """Accumulate parameter gradients given upstream gradients of the three outputs."""
    dh_prev = ffn_backward(params.ffn, pf.cache_prev, dm_prev)
    dh_cur = ffn_backward(params.ffn, pf.cache_cur, dm_cur)
    dr = ffn_backward(params.ffn, pf.cache_res, du)
    dh_cur = dh_cur + dr
    dh_prev = dh_prev - dr
    _backward_health(params, dh_prev, pf.x_prev, pf.d_prev, pf.p_prev)
    _backward_health(params, dh_cur, pf.x_cur, pf.d_cur, pf.p_cur)


@dataclass
class HealthCache:
    d: np.ndarray
    p: np.ndarray
    x: np.ndarray


def health_forward(params, visit: Visit) -> tuple[np.ndarray, HealthCache]:
    """Health representation of one visit with the cache :func:`health_backward` needs.

    Works for any parameter set carrying ``E_d``, ``E_p`` and ``W_h``.
    """
    vocab = params.vocabulary
    d, p = visit.diag_vector(vocab), visit.proc_vector(vocab)
    x = np.concatenate(embed_visit(params, d, p))
    return params.W_h.value @ x, HealthCache(d, p, x)


def health_backward(params, cache: HealthCache, dh: np.ndarray) -> None:
    _backward_health(params, dh, cache.x, cache.d, cache.p)


def _backward_health(params, dh, x, d, p):
    s = params.embed_size
    params.W_h.grad += np.outer(dh, x)
    dx = params.W_h.value.T @ dh
    params.E_d.grad += np.outer(dx[:s], d)
    params.E_p.grad += np.outer(dx[s:], p)
