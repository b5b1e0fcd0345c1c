"""Dense float64 kernel: parameters with gradients, the two-layer
feed-forward evaluator with its reverse pass, and a finite-difference checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")


def as_finite(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def sigmoid(x) -> np.ndarray:
    return expit(as_finite(x))


def sigmoid_grad_from_output(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


@dataclass(eq=False)
class ParamTensor:
    """A parameter value with an accumulated gradient of the same shape."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.value.copy(), self.grad.copy())


def linear_apply(W, x) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot apply {W.shape} matrix to vector of shape {x.shape}")
    return W @ x


@dataclass(eq=False)
class FFNParams:
    """Two-layer map ``W2 · act(W1 x + b1) + b2``."""

    W1: ParamTensor
    b1: ParamTensor
    W2: ParamTensor
    b2: ParamTensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        hidden, n_in = self.W1.shape
        n_out, hidden2 = self.W2.shape
        if hidden2 != hidden or self.b1.shape != (hidden,) or self.b2.shape != (n_out,):
            raise ShapeError(
                f"inconsistent FFN shapes W1={self.W1.shape} b1={self.b1.shape} "
                f"W2={self.W2.shape} b2={self.b2.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    def tensors(self) -> dict[str, ParamTensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: np.random.Generator,
             activation: str = "relu") -> "FFNParams":
        a1 = 1.0 / np.sqrt(n_in)
        a2 = 1.0 / np.sqrt(hidden)
        return cls(
            W1=ParamTensor(rng.uniform(-a1, a1, size=(hidden, n_in))),
            b1=ParamTensor(rng.uniform(-a1, a1, size=hidden)),
            W2=ParamTensor(rng.uniform(-a2, a2, size=(n_out, hidden))),
            b2=ParamTensor(rng.uniform(-a2, a2, size=n_out)),
            activation=activation,
        )


@dataclass
class FFNCache:
    x: np.ndarray
    pre: np.ndarray
    act: np.ndarray


def ffn_forward(params: FFNParams, x) -> tuple[np.ndarray, FFNCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_in,):
        raise ShapeError(f"FFN expects input of length {params.n_in}, got {x.shape}")
    pre = params.W1.value @ x + params.b1.value
    act = np.maximum(pre, 0.0) if params.activation == "relu" else pre
    y = params.W2.value @ act + params.b2.value
    return y, FFNCache(x, pre, act)


def ffn_apply(params: FFNParams, x) -> np.ndarray:
    return ffn_forward(params, x)[0]


def ffn_backward(params: FFNParams, cache: FFNCache, dy: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients for upstream ``dy``; return ``dL/dx``."""
    params.W2.grad += np.outer(dy, cache.act)
    params.b2.grad += dy
    dact = params.W2.value.T @ dy
    dpre = dact * (cache.pre > 0.0) if params.activation == "relu" else dact
    params.W1.grad += np.outer(dpre, cache.x)
    params.b1.grad += dpre
    return params.W1.value.T @ dpre


def grad_check(loss_fn: Callable[[], float], params: Sequence[ParamTensor],
               eps: float = 1e-5) -> float:
    """Maximum relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` must return the scalar loss and accumulate gradients into
    every ``params[i].grad``; gradients are zeroed before each call.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")

    def evaluate() -> float:
        for p in params:
            p.zero_grad()
        value = float(loss_fn())
        if not np.isfinite(value):
            raise NumericError("loss is not finite")
        return value

    evaluate()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return worst
