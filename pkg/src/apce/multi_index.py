"""Total-degree multi-index sets in graded lexicographic order.

Indices are emitted by ascending total degree.  Inside one degree block an
index ``a`` is placed before ``b`` when the first nonzero entry of ``a - b``
is positive, so for ``d=2, p=2`` the order is::

    (0,0) (1,0) (0,1) (2,0) (1,1) (0,2)
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np


def basis_count(d: int, p: int) -> int:
    """Dimension of the space of polynomials in ``d`` variables of degree <= ``p``."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if p < 0:
        raise ValueError(f"degree must be >= 0, got {p}")
    n = math.comb(d + p, p)
    if n > sys.maxsize:
        raise OverflowError(f"C({d}+{p}, {p}) has {n.bit_length()} bits and does not fit a machine integer")
    return n


def graded_lex_less(a: Sequence[int], b: Sequence[int]) -> bool:
    """True when ``a`` comes strictly before ``b`` in the ordering."""
    if len(a) != len(b):
        raise ValueError("multi-indices of different length")
    da, db = sum(a), sum(b)
    if da != db:
        return da < db
    for x, y in zip(a, b):
        if x != y:
            return x > y
    return False


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    # first entry descending -> matches graded_lex_less inside a degree block
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass(frozen=True)
class MultiIndexSet:
    """All multi-indices of length ``d`` with total degree at most ``p``.

    Attributes
    ----------
    d, p : int
        Dimension and maximal total degree.
    indices : ndarray, shape (N, d)
        Exponents, one row per basis function, in graded lexicographic order.
    """

    d: int
    p: int
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.indices.setflags(write=False)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, k: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.indices[k])

    def __iter__(self):
        for k in range(self.size):
            yield self[k]

    @cached_property
    def single_of(self) -> dict[tuple[int, ...], int]:
        """Map from multi-index (tuple) to its position."""
        return {self[k]: k for k in range(self.size)}

    def position(self, alpha: Sequence[int]) -> int:
        try:
            return self.single_of[tuple(int(a) for a in alpha)]
        except KeyError:
            raise KeyError(f"{tuple(alpha)} is not in the degree-{self.p} set") from None

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.indices.sum(axis=1)

    @cached_property
    def block_starts(self) -> np.ndarray:
        """Start position of each degree block; ``block_starts[r]`` is the first index of degree r.

        The array has ``p + 2`` entries, the last one equal to ``N``.
        """
        starts = [basis_count(self.d, r - 1) if r > 0 else 0 for r in range(self.p + 1)]
        return np.array(starts + [self.size])

    @cached_property
    def parent(self) -> tuple[np.ndarray, np.ndarray]:
        """For every index with degree >= 1: the position of ``alpha - e_j`` and ``j``.

        ``j`` is the first nonzero coordinate.  Used to build monomials by one
        multiplication per column.  Entries for the constant index are -1.
        """
        par = np.full(self.size, -1, dtype=np.int64)
        dim = np.full(self.size, -1, dtype=np.int64)
        for k in range(1, self.size):
            alpha = list(self[k])
            j = next(i for i, a in enumerate(alpha) if a > 0)
            alpha[j] -= 1
            par[k] = self.single_of[tuple(alpha)]
            dim[k] = j
        return par, dim

    def lowered(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions ``k`` with ``alpha_j >= 1`` and the positions of ``alpha - e_j``."""
        rows = np.nonzero(self.indices[:, j] > 0)[0]
        targets = np.empty_like(rows)
        for n, k in enumerate(rows):
            alpha = list(self[k])
            alpha[j] -= 1
            targets[n] = self.single_of[tuple(alpha)]
        return rows, targets


def graded_lex_set(d: int, p: int) -> MultiIndexSet:
    """Build the total-degree set for ``d`` variables and degree ``p``."""
    n = basis_count(d, p)
    rows = [c for r in range(p + 1) for c in _compositions(r, d)]
    assert len(rows) == n
    return MultiIndexSet(d, p, np.array(rows, dtype=np.int64).reshape(n, d))
