"""Named parameter registry with freezing and batch-norm buffers."""
from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from omrlane.autodiff.conv import RunningStats
from omrlane.autodiff.tensor import Tensor
from omrlane.errors import GraphError


class ParamStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._stats: dict[str, RunningStats] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=name not in self.frozen, name=name)
        self._params[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        if name in self._stats:
            raise KeyError(f"duplicate buffer name {name!r}")
        self._stats[name] = RunningStats(channels)
        return self._stats[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def stats(self, name: str) -> RunningStats:
        return self._stats[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def stat_items(self) -> Iterator[tuple[str, RunningStats]]:
        return iter(self._stats.items())

    def freeze(self, names: Iterable[str]) -> None:
        for name in names:
            self._params[name]  # KeyError on unknown names
            self.frozen.add(name)
            self._params[name].requires_grad = False
            self._params[name].grad = None

    def freeze_prefix(self, *prefixes: str) -> list[str]:
        names = [n for n in self._params if n.startswith(prefixes)]
        self.freeze(names)
        return names

    def unfreeze_all(self) -> None:
        for name in self.frozen:
            self._params[name].requires_grad = True
        self.frozen.clear()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def assign(self, name: str, value: np.ndarray) -> None:
        """Overwrite a parameter's values in place; frozen parameters refuse."""
        if name in self.frozen:
            raise GraphError(f"parameter {name!r} is frozen")
        t = self._params[name]
        if value.shape != t.shape:
            raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
        t.data = np.ascontiguousarray(value, dtype=np.float64)

    def load_arrays(self, params: dict[str, np.ndarray], stats: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        """Bulk restore from a checkpoint; bypasses the freeze guard on purpose."""
        for name, value in params.items():
            t = self._params[name]
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = np.ascontiguousarray(value, dtype=np.float64)
        for name, (mean, var) in stats.items():
            self._stats[name].mean = np.array(mean, dtype=np.float64)
            self._stats[name].var = np.array(var, dtype=np.float64)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}
