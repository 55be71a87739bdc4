"""Named parameter store and the small two-layer MLP used throughout the model."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import arraycore as ac
from .arraycore import Array, Parameter

__all__ = ["ModelParams", "init_mlp2", "mlp2"]


class ModelParams:
    """Ordered mapping of dotted names (``fusion.att1.W1``) to parameters."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._p: "OrderedDict[str, Parameter]" = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, shape, fan_in: int | None = None, fill: float | None = None) -> Parameter:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name}")
        if fill is not None:
            p = Parameter(np.full(tuple(shape), float(fill)), name=name)
        else:
            p = ac.uniform_init(shape, fan_in or shape[0], name=name, rng=self.rng)
        self._p[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self):
        return iter(self._p)

    def __len__(self):
        return len(self._p)

    def items(self):
        return self._p.items()

    def values(self):
        return self._p.values()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._p if n.startswith(prefix)]

    def zero_grad(self):
        for p in self._p.values():
            p.grad = np.zeros_like(p.data)

    def num_scalars(self) -> int:
        return int(sum(p.size for p in self._p.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._p.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._p) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for n, p in self._p.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)


def init_mlp2(p: ModelParams, prefix: str, d_in: int, d_hidden: int, d_out: int):
    p.add(f"{prefix}.W1", (d_in, d_hidden), fan_in=d_in)
    p.add(f"{prefix}.b1", (d_hidden,), fill=0.0)
    p.add(f"{prefix}.W2", (d_hidden, d_out), fan_in=d_hidden)
    p.add(f"{prefix}.b2", (d_out,), fill=0.0)


def mlp2(p: ModelParams, prefix: str, x: Array) -> Array:
    """W2 . GeLU(W1 x + b1) + b2 over the last axis."""
    h = ac.gelu(ac.linear(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    return ac.linear(h, p[f"{prefix}.W2"], p[f"{prefix}.b2"])
