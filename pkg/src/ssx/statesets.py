"""Exact sets over a finite state index universe, backed by boolean masks."""

from __future__ import annotations

import numpy as np


class StateSet:
    """Immutable-by-convention bitset over ``range(n)``."""

    __slots__ = ("mask",)

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    @classmethod
    def empty(cls, n: int) -> "StateSet":
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def full(cls, n: int) -> "StateSet":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, indices) -> "StateSet":
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(list(indices), dtype=int)] = True
        return cls(mask)

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def count(self) -> int:
        return int(np.sum(self.mask))

    def __contains__(self, state) -> bool:
        return bool(self.mask[int(state)])

    def __or__(self, other) -> "StateSet":
        return StateSet(self.mask | other.mask)

    def __and__(self, other) -> "StateSet":
        return StateSet(self.mask & other.mask)

    def __sub__(self, other) -> "StateSet":
        return StateSet(self.mask & ~other.mask)

    def issubset(self, other) -> bool:
        return bool(np.all(~self.mask | other.mask))

    def __eq__(self, other) -> bool:
        return isinstance(other, StateSet) and bool(np.all(self.mask == other.mask))

    def __hash__(self):  # pragma: no cover - sets are not dict keys in practice
        return hash(self.mask.tobytes())

    def copy(self) -> "StateSet":
        return StateSet(self.mask.copy())

    def __repr__(self):
        ids = self.indices()
        shown = ",".join(map(str, ids[:12]))
        more = "..." if len(ids) > 12 else ""
        return f"StateSet({len(ids)}/{self.n}: {{{shown}{more}}})"

    # line-oriented debug dump used by golden-file operator tests
    def to_lines(self) -> str:
        return "\n".join(str(i) for i in self.indices()) + "\n"

    @classmethod
    def from_lines(cls, n: int, text: str) -> "StateSet":
        ids = [int(t) for t in text.split()]
        return cls.from_indices(n, ids)
