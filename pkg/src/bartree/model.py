"""BAR(p) parameterization and forward simulation on the binary tree."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng
from .noise import NoiseModel
from .tree import TreeShape, ancestor_matrix, generation_of, subtree_size


class UnstableModel(ValueError):
    """The companion matrices violate the contraction condition."""


def companion(coefs: Sequence[float]) -> np.ndarray:
    """p x p companion matrix with ``coefs`` on the first row and ones below the diagonal."""
    coefs = np.asarray(coefs, dtype=float)
    p = coefs.shape[0]
    C = np.zeros((p, p))
    C[0, :] = coefs
    if p > 1:
        C[np.arange(1, p), np.arange(p - 1)] = 1.0
    return C


def matrix_norm(M: np.ndarray, kind: str = "spectral") -> float:
    if kind == "spectral":
        return float(np.linalg.norm(M, 2))
    if kind == "frobenius":
        return float(np.linalg.norm(M, "fro"))
    raise ValueError(f"unknown matrix norm {kind!r}")


@dataclass(frozen=True)
class BarModel:
    p: int
    a: np.ndarray
    b: np.ndarray
    A: np.ndarray
    B: np.ndarray
    beta: float
    norm: str = "spectral"
    ms_radius: float = 0.0  # spectral radius of (A kron A + B kron B) / 2

    @property
    def mean_radius(self) -> float:
        """Spectral radius of (A + B) / 2."""
        return float(np.max(np.abs(np.linalg.eigvals(0.5 * (self.A + self.B)))))

    @property
    def theta(self) -> np.ndarray:
        """The (p+1) x 2 parameter matrix, columns (a, b)."""
        return np.column_stack([self.a, self.b])

    @property
    def theta_vec(self) -> np.ndarray:
        """vec(theta) = (a_0..a_p, b_0..b_p)."""
        return np.concatenate([self.a, self.b])

    @property
    def stable(self) -> bool:
        """Contraction for p = 1; mean-square stability for p >= 2.

        A companion matrix with p >= 2 maps e_1 to (a_1, 1, 0, ...), so its
        2-norm (and its Frobenius norm) is never below 1 and ``beta < 1``
        cannot hold. For p >= 2 the model is accepted when the second-moment
        map Lambda -> (A Lambda A^t + B Lambda B^t) / 2 and the mean map
        (A + B) / 2 are both contractive in spectral radius, which is what
        the limits Xi and Lambda need.
        """
        if self.p == 1:
            return self.beta < 1.0
        return self.ms_radius < 1.0 and self.mean_radius < 1.0

    def to_dict(self) -> dict:
        return {"p": self.p, "a": self.a.tolist(), "b": self.b.tolist(), "norm": self.norm}


def build_model(
    p: int,
    a: Sequence[float],
    b: Sequence[float],
    allow_nonstable: bool = False,
    norm: str = "spectral",
) -> BarModel:
    """Assemble a BAR(p) model from offsets and lag coefficients.

    ``a = (a_0, ..., a_p)`` drives the even daughter and ``b`` the odd one.
    The contraction constant is ``max(||A||, ||B||)`` in the chosen matrix
    norm. Unstable models (see :attr:`BarModel.stable`) raise
    :class:`UnstableModel` unless ``allow_nonstable`` is set.
    """
    p = int(p)
    if p < 1:
        raise ValueError(f"model order must be >= 1, got {p}")
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    if a.shape != (p + 1,) or b.shape != (p + 1,):
        raise ValueError(
            f"a and b must both have length p+1 = {p + 1}, got {a.shape[0]} and {b.shape[0]}"
        )
    A, B = companion(a[1:]), companion(b[1:])
    beta = max(matrix_norm(A, norm), matrix_norm(B, norm))
    ms = float(np.max(np.abs(np.linalg.eigvals(0.5 * (np.kron(A, A) + np.kron(B, B))))))
    for arr in (a, b, A, B):
        arr.setflags(write=False)
    model = BarModel(p=p, a=a, b=b, A=A, B=B, beta=beta, norm=norm, ms_radius=ms)
    if not model.stable and not allow_nonstable:
        if p == 1:
            raise UnstableModel(f"contraction constant beta = {beta:.6g} >= 1 ({norm} norm)")
        raise UnstableModel(
            f"not mean-square stable: radius of (A kron A + B kron B)/2 = {ms:.6g}, "
            f"radius of (A + B)/2 = {model.mean_radius:.6g} (beta = {beta:.6g})"
        )
    return model


@dataclass(frozen=True)
class InitSpec:
    """How to seed the ancestors X_1 .. X_{2**p - 1}.

    kind is one of ``zero``, ``constant`` (all equal to ``value``),
    ``vector`` (explicit ``values``) or ``gaussian`` (i.i.d. N(0, scale**2)
    drawn from the tree seed).
    """

    kind: str = "zero"
    value: float = 0.0
    values: tuple = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "vector", "gaussian"):
            raise ValueError(f"unknown init kind {self.kind!r}")

    def realize(self, p: int, seed: int) -> np.ndarray:
        count = (1 << p) - 1
        if self.kind == "zero":
            return np.zeros(count)
        if self.kind == "constant":
            return np.full(count, float(self.value))
        if self.kind == "vector":
            vals = np.asarray(self.values, dtype=float)
            if vals.shape != (count,):
                raise ValueError(f"init vector must hold {count} values for p={p}, got {vals.size}")
            return vals.copy()
        return float(self.scale) * _rng.init_stream(seed).standard_normal(count)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "values": list(self.values), "scale": self.scale}


@dataclass(frozen=True)
class SimulatedTree:
    """Level-order values of one simulated lineage.

    ``X[k]`` is the value of cell ``k`` (slot 0 unused, NaN). ``eps[k]`` is
    the noise added at cell ``k`` for ``k >= 2**p``, NaN below; ``eps`` is
    None when noise was not recorded.
    """

    shape: TreeShape
    X: np.ndarray
    eps: Optional[np.ndarray]
    seed: int
    init: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def p(self) -> int:
        return self.shape.p

    @property
    def has_noise(self) -> bool:
        return self.eps is not None


def regression_vector(tree: SimulatedTree, k: int) -> np.ndarray:
    """(X_k, X_{k//2}, ..., X_{k // 2**(p-1)})."""
    p = tree.p
    if k < (1 << (p - 1)):
        raise ValueError(f"regression vector of cell {k} needs k >= 2**(p-1) = {1 << (p - 1)}")
    if generation_of(k) > tree.n:
        raise ValueError(f"cell {k} is beyond generation {tree.n}")
    return tree.X[np.array([k >> j for j in range(p)])]


def regression_matrix(X: np.ndarray, labels: np.ndarray, p: int) -> np.ndarray:
    """Rows are the regression vectors of ``labels``."""
    return X[ancestor_matrix(labels, p)]


def _offspring(coefs: np.ndarray, R: np.ndarray, eps: np.ndarray) -> np.ndarray:
    # fixed evaluation order: a_0 + a_1 x_1 + ... + a_p x_p + eps
    val = np.full(R.shape[0], coefs[0])
    for i in range(R.shape[1]):
        val = val + coefs[i + 1] * R[:, i]
    return val + eps


def simulate(
    model: BarModel,
    noise: Optional[NoiseModel],
    n: int,
    seed: int = 0,
    init: Optional[InitSpec] = None,
    record_noise: bool = True,
) -> SimulatedTree:
    """Simulate X over T_n generation by generation.

    ``noise=None`` runs the deterministic recursion (all noise zero). The
    noise of generation ``g`` is drawn from a stream keyed by ``(seed, g)``,
    so equal inputs give bit-identical trees.
    """
    p = model.p
    shape = TreeShape(n=n, p=p)
    if n < p:
        raise ValueError(f"need at least n = p = {p} generations, got {n}")
    init = init or InitSpec()
    seed = int(seed) & _rng.MASK64
    size = subtree_size(n)
    X = np.full(size + 1, np.nan)
    start = 1 << p
    X[1:start] = init.realize(p, seed)
    eps = np.full(size + 1, np.nan) if record_noise else None

    for g in range(p - 1, n):
        lo, hi = 1 << g, 1 << (g + 1)
        mothers = np.arange(lo, hi, dtype=np.int64)
        R = regression_matrix(X, mothers, p)
        if noise is None:
            e_even = e_odd = np.zeros(mothers.size)
        else:
            e_even, e_odd = noise.sample(X[lo:hi], _rng.generation_stream(seed, g + 1))
        X[2 * lo:2 * hi:2] = _offspring(model.a, R, e_even)
        X[2 * lo + 1:2 * hi:2] = _offspring(model.b, R, e_odd)
        if eps is not None:
            eps[2 * lo:2 * hi:2] = e_even
            eps[2 * lo + 1:2 * hi:2] = e_odd

    X.setflags(write=False)
    if eps is not None:
        eps.setflags(write=False)
    return SimulatedTree(shape=shape, X=X, eps=eps, seed=seed, init=X[1:start].copy())
