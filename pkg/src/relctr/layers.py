"""Parameter containers and the few layers the models are built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Holds named parameters and child modules, in registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = ag.parameter(value, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(prefix + cn + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=ag.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float | None = None):
        super().__init__()
        s = scale if scale is not None else 1.0 / math.sqrt(d_in)
        self.w = self.add_param("w", rng.normal(0.0, s, size=(d_in, d_out)))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        super().__init__()
        self.table = self.add_param("table", rng.normal(0.0, scale, size=(n, d)))

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        return ag.take_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.add_param("gain", np.ones(d))
        self.bias = self.add_param("bias", np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Dense layers with an activation between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation=ag.relu):
        super().__init__()
        self.layers = [self.add_child(f"l{i}", Linear(a, b, rng)) for i, (a, b) in
                       enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x
