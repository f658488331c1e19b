"""Ordered, named parameter collections.

A ParameterSet is the unit of aggregation and wire transfer: an ordered list
of (name, float64 array) pairs whose order is fixed by model construction and
identical across peers sharing a model configuration.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np


class ParameterSet:
    """Ordered mapping of unique names to float64 tensors."""

    def __init__(self, items: list[tuple[str, np.ndarray]]):
        names = [name for name, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._names = tuple(names)
        self._tensors = {
            name: np.asarray(t, dtype=np.float64) for name, t in items
        }

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self._names:
            yield name, self._tensors[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: self._tensors[name].shape for name in self._names}

    def total_count(self) -> int:
        """Number of scalar parameters across all tensors."""
        return int(sum(t.size for t in self._tensors.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet([(name, t.copy()) for name, t in self])

    def quantized_f32(self) -> "ParameterSet":
        """Round every value through float32, as the wire format does."""
        return ParameterSet(
            [(name, t.astype(np.float32).astype(np.float64)) for name, t in self]
        )

    def equals(self, other: "ParameterSet") -> bool:
        """Bit-exact equality of names, shapes and values."""
        if self._names != other._names:
            return False
        return all(
            np.array_equal(self._tensors[n], other._tensors[n])
            for n in self._names
        )

    def max_relative_diff(self, other: "ParameterSet") -> float:
        """Largest per-scalar relative difference against ``other``."""
        if self._names != other._names:
            raise ValueError("parameter sets have different names")
        worst = 0.0
        for name in self._names:
            a = self._tensors[name]
            b = other._tensors[name]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-30)
            worst = max(worst, float(np.max(np.abs(a - b) / denom, initial=0.0)))
        return worst
