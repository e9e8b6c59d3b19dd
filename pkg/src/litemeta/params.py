"""Named parameter storage and optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradMap, Leaf, Tensor, default_dtype


@dataclass
class InitSpec:
    kind: str  # "he_normal" | "zeros" | "ones" | "normal"
    std: float = 0.0


class ParamStore:
    """Ordered name -> Tensor mapping with trainable flags.

    Trainable parameters carry a :class:`Leaf` node so they collect
    gradients; frozen ones are plain detached tensors.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.init_spec: dict[str, InitSpec] = {}
        self.trainable: dict[str, bool] = {}
        self.grad = GradMap()

    def add(self, name: str, value: np.ndarray, init: InitSpec, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        data = np.asarray(value, dtype=default_dtype())
        t = Tensor(data, Leaf(name) if trainable else None)
        self._params[name] = t
        self.init_spec[name] = init
        self.trainable[name] = trainable
        if trainable:
            self.grad[name] = np.zeros_like(data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, trainable_only: bool = True) -> list[str]:
        return [n for n in self._params if self.trainable[n] or not trainable_only]

    def items(self):
        return self._params.items()

    def num_scalars(self, trainable_only: bool = False) -> int:
        return sum(self._params[n].data.size for n in self.names(trainable_only))

    def zero_grad(self) -> None:
        self.grad.zero()

    def new_gradmap(self) -> GradMap:
        return GradMap({n: np.zeros_like(self._params[n].data) for n in self.names()})

    def set_value(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=t.data.dtype)
        if value.shape != t.data.shape:
            raise ValueError(f"{name}: shape {value.shape} != {t.data.shape}")
        t.data = value

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for n, v in state.items():
            self.set_value(n, v)


@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, params: ParamStore, grads: GradMap) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self._t
        c2 = 1.0 - b2**self._t
        for name in params.names():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name].data = params[name].data - update


@dataclass
class SGD:
    lr: float = 1e-3

    def step(self, params: ParamStore, grads: GradMap) -> None:
        for name in params.names():
            params[name].data = params[name].data - self.lr * grads[name]


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
