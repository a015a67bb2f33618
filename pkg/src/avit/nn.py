"""Module container and parameter initialisation."""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from .tensor import Tensor


class ParamFactory:
    """Creates parameters in a fixed order from one seeded generator.

    With ``materialize=False`` every parameter is a read-only zero view of the
    right shape, so that very large configurations can be inspected (counted,
    named) without allocating their weights.
    """

    def __init__(self, seed=0, dtype=np.float32, materialize: bool = True):
        self.seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
        self.rng = np.random.default_rng(list(self.seed))
        self.dtype = np.dtype(dtype).type
        self.materialize = materialize

    def spawn(self, key: str) -> "ParamFactory":
        """Independent stream for a submodule, so its draws don't shift its siblings'."""
        return ParamFactory(self.seed + (zlib.crc32(key.encode()),), self.dtype, self.materialize)

    def _wrap(self, shape, fill) -> Tensor:
        if not self.materialize:
            data = np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
            return Tensor(data, requires_grad=True, dtype=self.dtype)
        return Tensor(np.asarray(fill(), dtype=self.dtype), requires_grad=True, dtype=self.dtype)

    def zeros(self, shape) -> Tensor:
        return self._wrap(shape, lambda: np.zeros(shape))

    def ones(self, shape) -> Tensor:
        return self._wrap(shape, lambda: np.ones(shape))

    def trunc_normal(self, shape, std: float = 0.02) -> Tensor:
        def fill():
            x = self.rng.standard_normal(shape)
            bad = np.abs(x) > 2.0
            while bad.any():
                x[bad] = self.rng.standard_normal(int(bad.sum()))
                bad = np.abs(x) > 2.0
            return x * std

        return self._wrap(shape, fill)

    def he_normal(self, shape, fan_in: int) -> Tensor:
        return self._wrap(shape, lambda: self.rng.standard_normal(shape) * math.sqrt(2.0 / fan_in))

    def uniform(self, shape, bound: float) -> Tensor:
        return self._wrap(shape, lambda: self.rng.uniform(-bound, bound, size=shape))

    def buffer(self, shape, value: float) -> np.ndarray:
        return np.full(shape, value, dtype=self.dtype)


class Module:
    """Holds named parameters, buffers and child modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters and buffers by hierarchical name (arrays are not copied)."""
        out: Dict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError
