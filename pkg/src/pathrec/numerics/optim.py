"""Trainable-parameter registry and first-order optimizers."""

from __future__ import annotations

import contextlib

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Insertion-ordered mapping of name -> trainable Tensor.

    Ordering is part of the contract: checkpoints, flat-vector views and
    optimizer state all follow it, which keeps runs bit-reproducible.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, init: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(init, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for t in self._params.values():
            n = t.size
            t.data = vec[offset:offset + n].reshape(t.data.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError("vector length does not match parameter count")

    @contextlib.contextmanager
    def vector_view(self, vec: Tensor):
        """Temporarily expose every parameter as a tape view into ``vec``.

        Lets a whole-model loss be differentiated with respect to one flat
        vector, which is what the finite-difference checker consumes.
        """
        originals = dict(self._params)
        offset = 0
        try:
            for name, t in originals.items():
                n = t.size
                self._params[name] = vec[offset:offset + n].reshape(t.data.shape)
                offset += n
            if offset != vec.size:
                raise ValueError("vector length does not match parameter count")
            yield
        finally:
            self._params = originals

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = arr.copy()


class SGD:
    def __init__(self, params: ParamStore, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, t in self.params:
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad


class Adam:
    def __init__(self, params: ParamStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params}
        self._v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
