"""Named parameter storage, initialisers and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from harc.errors import ShapeError
from harc.numerics.tensor import Tensor


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by a tuple of integers.

    Philox output depends only on (key, counter), so streams are identical
    across platforms and numpy builds.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray
    adam: AdamState

    @classmethod
    def from_value(cls, value: np.ndarray) -> "Parameter":
        return cls(
            value=value,
            grad=np.zeros_like(value),
            adam=AdamState(np.zeros_like(value), np.zeros_like(value)),
        )


@dataclass
class ParameterStore:
    """Ordered mapping of parameter name to value, gradient and Adam moments.

    Iteration is always in sorted-name order so that every traversal (Adam,
    checkpointing, gradient checking) is deterministic.
    """

    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))
    _params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        self._params[name] = Parameter.from_value(np.array(value, dtype=self.dtype))

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Parameter]]:
        for name in self.names():
            yield name, self._params[name]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def leaf(self, name: str) -> Tensor:
        """A graph leaf whose gradient accumulates straight into the store."""
        p = self._params[name]
        t = Tensor(p.value, requires_grad=True, name=name)
        t.grad = p.grad
        return t

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad[...] = 0

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != arr.shape:
                raise ShapeError("load_values", p.value.shape, arr.shape, detail=name)
            p.value[...] = arr

    def astype(self, dtype) -> "ParameterStore":
        """Deep copy with every tensor (including Adam moments) cast to ``dtype``."""
        out = ParameterStore(dtype=np.dtype(dtype))
        for name, p in self.items():
            out._params[name] = Parameter(
                value=p.value.astype(dtype),
                grad=p.grad.astype(dtype),
                adam=AdamState(p.adam.m.astype(dtype), p.adam.v.astype(dtype), p.adam.t),
            )
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)


def adam_step(
    store: ParameterStore,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every parameter; gradients are left intact."""
    for _, p in store.items():
        st = p.adam
        st.t += 1
        g = p.grad
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1**st.t)
        v_hat = st.v / (1.0 - beta2**st.t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


def init_embedding(rng: np.random.Generator, rows: int, dim: int, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(rows, dim))


def init_glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
