"""Named parameter storage shared by the layer bundles."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import Tensor

INIT_STD = 0.02


class ParamInit:
    """Registers freshly initialised tensors under dotted names, in call order."""

    def __init__(self, seed: int = 0, dtype=np.float64, std: float = INIT_STD, dry_run: bool = False):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.std = std
        # dry runs record shapes only (zero-stride arrays), for inventories of large configs
        self.dry_run = dry_run
        self.weights: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name: str, shape, make) -> Tensor:
        if name in self.weights:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(n) for n in np.atleast_1d(shape))
        if self.dry_run:
            arr = np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
        else:
            arr = np.asarray(make(shape)).astype(self.dtype)
        t = Tensor(arr, requires_grad=True)
        self.weights[name] = t
        return t

    def normal(self, name: str, shape, std: float | None = None) -> Tensor:
        std = self.std if std is None else std
        return self._add(name, shape, lambda s: self.rng.normal(0.0, std, size=s))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, shape, np.zeros)

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, shape, np.ones)


def scoped(weights, prefix: str) -> "Scope":
    return Scope(weights, prefix)


class Scope:
    """Read-only view of ``weights`` restricted to names under ``prefix``."""

    def __init__(self, weights, prefix: str = ""):
        self.weights = weights
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        key = self.prefix + name
        try:
            return self.weights[key]
        except KeyError:
            raise KeyError(f"missing parameter {key!r}") from None

    def __truediv__(self, sub: str) -> "Scope":
        return Scope(self.weights, f"{self.prefix}{sub}.")

    def names(self) -> Iterator[str]:
        return (k for k in self.weights if k.startswith(self.prefix))
