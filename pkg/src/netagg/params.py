"""Named, ordered parameter collections with aggregability flags."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ShapeError

__all__ = ["ParamSet"]


class ParamSet:
    """Ordered map layer-id -> parameter array, each flagged aggregable.

    Conv kernels/biases are aggregable (they participate in the merge
    and forget arithmetic); normalisation scale/shift and classifier
    parameters are not.
    """

    def __init__(self, role: str = "extractor"):
        self.role = role
        self._arrays: dict[str, np.ndarray] = {}
        self._aggregable: dict[str, bool] = {}

    @staticmethod
    def _coerce(array: np.ndarray) -> np.ndarray:
        # storage precision is float32; float64 entries are kept as-is so
        # the aggregation algebra can hand back full-precision results
        dtype = np.float64 if np.asarray(array).dtype == np.float64 else np.float32
        return np.ascontiguousarray(array, dtype=dtype)

    def add(self, name: str, array: np.ndarray, aggregable: bool) -> None:
        if name in self._arrays:
            raise ShapeError(f"duplicate parameter name {name!r}")
        self._arrays[name] = self._coerce(array)
        self._aggregable[name] = bool(aggregable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if self._arrays[name].shape != array.shape:
            raise ShapeError(f"shape mismatch assigning {name!r}")
        self._arrays[name] = self._coerce(array)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self) -> list[str]:
        return list(self._arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._arrays.items())

    def is_aggregable(self, name: str) -> bool:
        return self._aggregable[name]

    def aggregable_keys(self) -> list[str]:
        return [k for k, a in self._aggregable.items() if a]

    def non_aggregable_keys(self) -> list[str]:
        return [k for k, a in self._aggregable.items() if not a]

    def copy(self) -> "ParamSet":
        out = ParamSet(self.role)
        for name, arr in self.items():
            out.add(name, arr.copy(), self._aggregable[name])
        return out

    def signature(self) -> list[tuple[str, tuple[int, ...], bool]]:
        """Key/shape/flag triple list used for compatibility checks."""
        return [(k, self._arrays[k].shape, self._aggregable[k]) for k in self._arrays]

    def require_compatible(self, other: "ParamSet", keys: list[str] | None = None) -> None:
        a = self.signature() if keys is None else [s for s in self.signature() if s[0] in set(keys)]
        b = other.signature() if keys is None else [s for s in other.signature() if s[0] in set(keys)]
        if a != b:
            raise ShapeError(
                f"incompatible ParamSets (roles {self.role!r} vs {other.role!r}): "
                f"{a[:3]}... vs {b[:3]}..."
            )

    def allclose(self, other: "ParamSet", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.keys() != other.keys():
            return False
        return all(np.allclose(self[k], other[k], rtol=rtol, atol=atol) for k in self.keys())
