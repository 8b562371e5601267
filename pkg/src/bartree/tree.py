"""Index algebra for the regular binary tree.

Cells carry 1-based labels: the root is 1 and the daughters of cell ``k``
are ``2k`` and ``2k + 1``. Generation ``g`` holds the labels
``2**g .. 2**(g+1) - 1``. Node arrays elsewhere in the package are stored
in this level order, with slot 0 unused, so a label is also an array index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

MAX_GENERATION = 40

IndexKind = Literal["generation", "full_subtree", "shifted_subtree"]


def _check_label(k: int) -> int:
    k = int(k)
    if k < 1:
        raise ValueError(f"cell labels start at 1, got {k}")
    return k


def generation_of(k: int) -> int:
    """Generation of cell ``k``, i.e. ``floor(log2 k)``."""
    return _check_label(k).bit_length() - 1


def mother(k: int) -> int:
    k = _check_label(k)
    if k == 1:
        raise ValueError("the root cell has no mother")
    return k >> 1


def ancestor_chain(k: int, depth: int) -> list[int]:
    """Return ``[k // 2, k // 4, ..., k // 2**depth]``."""
    k = _check_label(k)
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    if depth > generation_of(k):
        raise ValueError(
            f"cell {k} lives in generation {generation_of(k)}; "
            f"it has no ancestor {depth} generations up"
        )
    return [k >> i for i in range(1, depth + 1)]


def generation_size(n: int) -> int:
    return 1 << n


def subtree_size(n: int) -> int:
    """|T_n| = 2**(n+1) - 1; ``n = -1`` gives the empty tree."""
    return (1 << (n + 1)) - 1


@dataclass(frozen=True)
class TreeShape:
    """A complete tree observed up to generation ``n`` for a model of order ``p``."""

    n: int
    p: int = 1

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"model order must be >= 1, got {self.p}")
        if self.n < 0:
            raise ValueError(f"generation index must be >= 0, got {self.n}")
        if self.n > MAX_GENERATION:
            raise ValueError(f"generation {self.n} exceeds the cap {MAX_GENERATION}")

    @property
    def size(self) -> int:
        return subtree_size(self.n)


def shifted_range(n: int, p: int) -> range:
    """Labels of T_{n,p} = {k in T_n : k >= 2**p} as a range."""
    if n < p - 1:
        raise ValueError(f"T_(n,p) needs n >= p - 1, got n={n}, p={p}")
    return range(1 << p, 1 << (n + 1))


def index_set(shape: TreeShape, kind: IndexKind) -> range:
    """Labels of G_n, T_n or T_{n,p}, in increasing order."""
    n, p = shape.n, shape.p
    if kind == "generation":
        return range(1 << n, 1 << (n + 1))
    if kind == "full_subtree":
        return range(1, 1 << (n + 1))
    if kind == "shifted_subtree":
        return shifted_range(n, p)
    raise ValueError(f"unknown index set kind {kind!r}")


def ancestor_matrix(labels: np.ndarray, depth: int) -> np.ndarray:
    """Stack ``labels // 2**j`` for ``j = 0 .. depth-1`` as columns.

    Row ``i`` holds the labels whose values form the regression vector of
    ``labels[i]`` for a model of order ``depth``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    shifts = np.arange(depth, dtype=np.int64)
    return labels[:, None] >> shifts[None, :]
