"""Named collection of learnable tensors."""

from __future__ import annotations

from collections.abc import Iterator, MutableMapping

import numpy as np

from .tensor import Tensor


class ParamStore(MutableMapping):
    """Ordered ``name -> Tensor`` mapping; every entry requires grad."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._items: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=self.dtype))
        t.requires_grad = True
        self._items[name] = t

    def __delitem__(self, name: str) -> None:
        del self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._items.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._items.items()}

    def copy(self, dtype=None) -> "ParamStore":
        """Independent snapshot, optionally cast (e.g. to float64 for checks)."""
        out = ParamStore(dtype or self.dtype)
        for k, t in self._items.items():
            out[k] = Tensor(np.array(t.data, dtype=out.dtype))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=np.float32) -> "ParamStore":
        store = cls(dtype)
        for k, v in arrays.items():
            store[k] = Tensor(np.array(v, dtype=store.dtype))
        return store


class Initializer:
    """Seeded weight factory used while building a ParamStore."""

    def __init__(self, store: ParamStore, rng: np.random.Generator):
        self.store = store
        self.rng = rng

    def linear(self, name: str, fan_in: int, fan_out: int, gain: float = 2.0,
               zero: bool = False) -> None:
        """He-uniform weights (``gain=2`` for relu, 1 for gates) and zero bias."""
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(3.0 * gain / fan_in)
            w = self.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.store[f"{name}.w"] = w.astype(self.store.dtype)
        self.store[f"{name}.b"] = np.zeros(fan_out, dtype=self.store.dtype)

    def mlp(self, name: str, widths: list[int], final_gain: float = 2.0,
            zero_final: bool = False) -> None:
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.linear(f"{name}.{i}", a, b, gain=final_gain if last else 2.0,
                        zero=zero_final and last)
