"""Named parameter storage and first-order optimizers."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .numerics import Tape, Tensor, _as_matrix


class ParameterStore:
    """Ordered named float64 matrices; the single source of truth for model
    state. Leaves bound onto a tape alias the stored arrays, so optimizer
    steps must happen between tapes, never during one."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> np.ndarray:
        if name in self._arrays:
            raise ContractError(f"duplicate parameter {name!r}")
        self._arrays[name] = _as_matrix(array).copy()
        return self._arrays[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def census(self) -> list[tuple[str, tuple[int, int]]]:
        return [(k, v.shape) for k, v in self._arrays.items()]

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.param(v, name=k) for k, v in self._arrays.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._arrays.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            v = _as_matrix(v)
            if k in self._arrays:
                if self._arrays[k].shape != v.shape:
                    raise ContractError(f"shape mismatch loading {k!r}")
                self._arrays[k][...] = v
            else:
                self._arrays[k] = v.copy()


class SgdOptimizer:
    def __init__(self, store: ParameterStore, lr: float):
        self.store = store
        self.lr = float(lr)

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        for name in self.store.names():
            g = grads.get(name)
            if g is not None:
                self.store[name][...] -= self.lr * g


class AdamOptimizer:
    """Adam with standard bias correction."""

    def __init__(self, store: ParameterStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self._m = {k: np.zeros_like(store[k]) for k in store.names()}
        self._v = {k: np.zeros_like(store[k]) for k in store.names()}
        self._t = 0

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for name in self.store.names():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.store[name][...] -= \
                self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(kind: str, store: ParameterStore, lr: float):
    if kind == "adam":
        return AdamOptimizer(store, lr)
    if kind == "sgd":
        return SgdOptimizer(store, lr)
    raise ContractError(f"unknown optimizer {kind!r}")
