from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from ..schemas.core import OptimConfig
from .archive import load_tensor, save_tensor
from .autograd import ShapeError, Tensor


@dataclass
class ParamEntry:
    value: Tensor
    velocity: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad


class ParamSet:
    """Named trainable tensors with their gradients and momentum buffers."""

    def __init__(self) -> None:
        self._entries: Dict[str, ParamEntry] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"parameter already defined: {name}")
        value = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = ParamEntry(value=value, velocity=np.zeros_like(value.data))
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self) -> Iterable[Tuple[str, ParamEntry]]:
        return self._entries.items()

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.value.grad = None

    def copy(self, reset_velocity: bool = False) -> "ParamSet":
        """Deep copy; the result shares no buffers with ``self``."""
        out = ParamSet()
        for name, e in self._entries.items():
            value = out.add(name, e.value.data.copy())
            if not reset_velocity:
                out._entries[name].velocity = e.velocity.copy()
            if e.value.grad is not None:
                value.grad = e.value.grad.copy()
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: e.value.data.copy() for name, e in self._entries.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._entries:
                raise KeyError(f"unknown parameter: {name}")
            cur = self._entries[name].value
            if tuple(arr.shape) != cur.shape:
                raise ShapeError(f"parameter {name}: stored dims {list(arr.shape)} != model dims {cur.dims}")
            cur.data = np.array(arr, dtype=np.float64)

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(e.value.data, other._entries[name].value.data)
            and e.value.data.tobytes() == other._entries[name].value.data.tobytes()
            for name, e in self._entries.items()
        )

    def n_values(self) -> int:
        return int(sum(e.value.data.size for e in self._entries.values()))

    def save(self, directory: Path) -> List[str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for name, e in self._entries.items():
            fname = f"{name}.tge"
            save_tensor(directory / fname, e.value.data)
            files.append(fname)
        return files

    @classmethod
    def load(cls, directory: Path, names: Optional[List[str]] = None) -> "ParamSet":
        directory = Path(directory)
        out = cls()
        if names is None:
            names = sorted(p.stem for p in directory.glob("*.tge"))
        for name in names:
            out.add(name, load_tensor(directory / f"{name}.tge"))
        return out


def sgd_step(params: ParamSet, cfg: OptimConfig, names: Optional[Iterable[str]] = None) -> None:
    """v <- momentum * v + grad (+ weight_decay * value); value <- value - lr * v; grads zeroed."""
    selected = params.names() if names is None else list(names)
    for name in selected:
        e = params.entry(name)
        grad = e.gradient
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * e.value.data
        e.velocity = cfg.momentum * e.velocity + grad
        e.value.data = e.value.data - cfg.learning_rate * e.velocity
        e.value.grad = None


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Centered uniform init with bound gain * sqrt(6 / fan_in)."""
    bound = gain * np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
