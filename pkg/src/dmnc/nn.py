"""Neural building blocks: LSTM cell, linear maps, embeddings, losses, Adam.

Parameter containers expose ``named_parameters(prefix)`` so models can build a
flat, ordered registry for the optimizer and for checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, TrainingError
from .tensor import Tensor

LOG_FLOOR = 1e-12


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Single-layer feed-forward map y = W x + b."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = T.parameter(uniform_init(rng, (out_dim, in_dim), in_dim))
        self.bias = T.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(self.weight, x) + self.bias

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Embedding:
    """Lookup table; row i equals the matmul of the table with onehot(i)."""

    def __init__(self, rng: np.random.Generator, vocab: int, dim: int):
        self.vocab = vocab
        self.dim = dim
        self.table = T.parameter(uniform_init(rng, (vocab, dim), dim))

    def __call__(self, index: int, view: str = "input") -> Tensor:
        if not 0 <= index < self.vocab:
            raise DataError(f"event index {index} outside {view} vocabulary of size {self.vocab}")
        return self.table[int(index)]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table}


class LstmState:
    __slots__ = ("h", "c")

    def __init__(self, h: Tensor, c: Tensor):
        self.h = h
        self.c = c


class LstmCell:
    """Standard LSTM; gate blocks ordered [input, forget, candidate, output].

    The forget-gate bias starts at 1.0 so early training lets the cell carry.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int):
        self.in_dim = in_dim
        self.hidden = hidden
        self.w_input = T.parameter(uniform_init(rng, (4 * hidden, in_dim), in_dim))
        self.w_recur = T.parameter(uniform_init(rng, (4 * hidden, hidden), hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = T.parameter(bias)

    def initial_state(self) -> LstmState:
        zeros = T.constant(np.zeros(self.hidden))
        return LstmState(zeros, zeros)

    def __call__(self, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        if x.shape != (self.in_dim,):
            raise DimensionError(f"lstm input shape {x.shape}, expected ({self.in_dim},)")
        h = self.hidden
        gates = T.matmul(self.w_input, x) + T.matmul(self.w_recur, state.h) + self.bias
        i = T.sigmoid(gates[0:h])
        f = T.sigmoid(gates[h:2 * h])
        g = T.tanh(gates[2 * h:3 * h])
        o = T.sigmoid(gates[3 * h:4 * h])
        c_new = f * state.c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, LstmState(h_new, c_new)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_input": self.w_input,
                f"{prefix}.w_recur": self.w_recur,
                f"{prefix}.bias": self.bias}


def seq_loss(step_probs: list[Tensor], targets: list[int]) -> Tensor:
    """Summed cross entropy of per-step distributions against a target sequence."""
    if len(step_probs) != len(targets):
        raise DimensionError(f"{len(step_probs)} distributions vs {len(targets)} targets")
    total = None
    for probs, y in zip(step_probs, targets):
        picked = T.safe_log(probs[int(y)], LOG_FLOOR)
        total = picked if total is None else total + picked
    return -total


def set_loss(scores: Tensor, labels: set[int] | frozenset[int]) -> Tensor:
    """Multi-label loss: -sum over present labels log p, absent labels log(1-p)."""
    n = scores.shape[0]
    for l in labels:
        if not 0 <= l < n:
            raise DataError(f"label id {l} outside output space of size {n}")
    mask = np.zeros(n)
    mask[list(labels)] = 1.0
    pos = T.mul(T.safe_log(scores, LOG_FLOOR), T.constant(mask)).sum()
    neg = T.mul(T.safe_log(1.0 - scores, LOG_FLOOR), T.constant(1.0 - mask)).sum()
    return -(pos + neg)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it.

    Returns the pre-clip norm. Non-finite gradients abort the step.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm; aborting optimizer step")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with bias correction; defaults lr=1e-3, betas=(0.9, 0.999), eps=1e-8."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()
