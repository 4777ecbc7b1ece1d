"""Named collections of dense float64 tensors (target-model parameters)."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UnknownTensor


class ParamStore:
    """Ordered mapping from tensor name to a dense float64 array.

    Entry order is fixed at construction and defines the flattening order.
    Arithmetic is elementwise and requires the exact same name/shape sets.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: dict[str, np.ndarray]):
        self.entries = {
            name: np.asarray(arr, dtype=np.float64) for name, arr in entries.items()
        }

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zeros_like(cls, other: "ParamStore") -> "ParamStore":
        return cls({k: np.zeros_like(v) for k, v in other.entries.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()})

    # -- inspection ----------------------------------------------------------

    @property
    def dims(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.entries.items()}

    def names(self) -> list[str]:
        return list(self.entries)

    def size(self) -> int:
        return sum(v.size for v in self.entries.values())

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.entries.values())

    def _check_compatible(self, other: "ParamStore") -> None:
        if self.dims != other.dims:
            raise ShapeError(
                f"incompatible stores: {self.dims} vs {other.dims}"
            )

    # -- flatten / unflatten ---------------------------------------------------

    def flatten(self) -> np.ndarray:
        """Concatenate all entries (C order, entry order) into one vector."""
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.entries.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamStore":
        """Inverse of flatten, using this store's names and shapes."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != self.size():
            raise ShapeError(f"expected flat vector of size {self.size()}")
        out = {}
        pos = 0
        for name, arr in self.entries.items():
            out[name] = vec[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return ParamStore(out)

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other: "ParamStore") -> "ParamStore":
        self._check_compatible(other)
        return ParamStore(
            {k: v + other.entries[k] for k, v in self.entries.items()}
        )

    def __sub__(self, other: "ParamStore") -> "ParamStore":
        self._check_compatible(other)
        return ParamStore(
            {k: v - other.entries[k] for k, v in self.entries.items()}
        )

    def __mul__(self, scalar: float) -> "ParamStore":
        return ParamStore({k: v * scalar for k, v in self.entries.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "ParamStore":
        return self * -1.0

    def dot(self, other: "ParamStore") -> float:
        self._check_compatible(other)
        return float(
            sum(
                np.vdot(v, other.entries[k])
                for k, v in self.entries.items()
            )
        )

    def norm(self) -> float:
        return float(np.sqrt(max(self.dot(self), 0.0)))

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{v.shape}" for k, v in self.entries.items())
        return f"ParamStore({shapes})"
