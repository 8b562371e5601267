"""Least-squares estimation of a BAR(p) process observed on T_n.

All sums over cells use exactly rounded summation (``math.fsum``) in
increasing label order, so results do not depend on how arrays are blocked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .model import SimulatedTree, regression_matrix
from .tree import subtree_size

COND_LIMIT = 1e12


class SingularDesign(np.linalg.LinAlgError):
    """S_{n-1} is numerically singular; the least-squares problem is degenerate."""


class NoiseNotRecorded(ValueError):
    pass


def _column_fsums(P: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(col) for col in P.T.tolist()])


def _fsum_cols(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Exactly rounded U^t V."""
    P = (U[:, :, None] * V[:, None, :]).reshape(U.shape[0], -1)
    return _column_fsums(P).reshape(U.shape[1], V.shape[1])


def _gram(Y: np.ndarray) -> np.ndarray:
    q = Y.shape[1]
    iu, ju = np.triu_indices(q)
    sums = _column_fsums(Y[:, iu] * Y[:, ju])
    G = np.empty((q, q))
    G[iu, ju] = sums
    G[ju, iu] = sums
    return G


def _check_n(tree: SimulatedTree, n: int, low: int) -> None:
    if n < low:
        raise ValueError(f"n = {n} is below the minimum {low} for p = {tree.p}")
    if n > tree.n:
        raise ValueError(f"tree only reaches generation {tree.n}, asked for {n}")


def mother_labels(p: int, n: int) -> np.ndarray:
    """Labels of T_{n-1,p-1}: every mother whose daughters lie in T_n."""
    return np.arange(1 << (p - 1), 1 << n, dtype=np.int64)


def design(tree: SimulatedTree, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked design ``(labels, Y, Z)`` over the mothers in T_{n-1,p-1}.

    Row ``i`` of ``Y`` is ``(1, X_k, X_{k//2}, ...)`` and row ``i`` of ``Z`` is
    ``(X_2k, X_2k+1)`` for ``k = labels[i]``.
    """
    _check_n(tree, n, tree.p)
    labels = mother_labels(tree.p, n)
    Y = np.column_stack([np.ones(labels.size), regression_matrix(tree.X, labels, tree.p)])
    Z = np.column_stack([tree.X[2 * labels], tree.X[2 * labels + 1]])
    return labels, Y, Z


def s_matrix(tree: SimulatedTree, n: int) -> np.ndarray:
    """S_n, the sum of Y_k Y_k^t over T_{n,p-1}."""
    p = tree.p
    _check_n(tree, n, p - 1)
    labels = np.arange(1 << (p - 1), 1 << (n + 1), dtype=np.int64)
    Y = np.column_stack([np.ones(labels.size), regression_matrix(tree.X, labels, p)])
    return _gram(Y)


def condition_number(S: np.ndarray) -> float:
    w = np.linalg.eigvalsh(S)
    if w[0] <= 0.0:
        return math.inf
    return float(w[-1] / w[0])


def spd_solve(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with one step of iterative refinement."""
    cond = condition_number(S)
    if not cond < COND_LIMIT:
        raise SingularDesign(f"design matrix is singular to working precision (cond = {cond:.3g})")
    try:
        factor = linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from exc
    x = linalg.cho_solve(factor, rhs, check_finite=False)
    r = rhs - S @ x
    return x + linalg.cho_solve(factor, r, check_finite=False)


@dataclass(frozen=True)
class ThetaFit:
    theta_hat: np.ndarray  # vec ordering (a_0..a_p, b_0..b_p)
    S: np.ndarray          # S_{n-1}
    rhs: np.ndarray        # sum of Y_k Z_k^t, (p+1) x 2
    cond: float

    @property
    def matrix(self) -> np.ndarray:
        q = self.S.shape[0]
        return np.column_stack([self.theta_hat[:q], self.theta_hat[q:]])


def theta_hat(tree: SimulatedTree, n: Optional[int] = None) -> ThetaFit:
    """Least-squares estimate of vec(theta) from the cells of T_n.

    The system ``(I_2 kron S_{n-1}) theta = sum vec(Y_k Z_k^t)`` is block
    diagonal, so it is solved as two (p+1)-dimensional systems sharing one
    Cholesky factor of S_{n-1}.
    """
    n = tree.n if n is None else n
    _, Y, Z = design(tree, n)
    S = _gram(Y)
    rhs = _fsum_cols(Y, Z)
    cond = condition_number(S)
    sol = spd_solve(S, rhs)
    return ThetaFit(theta_hat=np.concatenate([sol[:, 0], sol[:, 1]]), S=S, rhs=rhs, cond=cond)


def residuals(tree: SimulatedTree, theta: np.ndarray, n: Optional[int] = None):
    """Residual pairs (eps_hat_2k, eps_hat_2k+1) for every mother in T_{n-1,p-1}."""
    n = tree.n if n is None else n
    _, Y, Z = design(tree, n)
    return _residuals(Y, Z, theta)


def _residuals(Y: np.ndarray, Z: np.ndarray, theta: np.ndarray):
    theta = np.asarray(theta, dtype=float)
    q = Y.shape[1]
    Theta = theta if theta.ndim == 2 else np.column_stack([theta[:q], theta[q:]])
    fitted = np.empty_like(Z)
    for col in range(2):
        # same evaluation order as the simulator
        val = np.full(Y.shape[0], Theta[0, col])
        for i in range(1, q):
            val = val + Theta[i, col] * Y[:, i]
        fitted[:, col] = val
    res = Z - fitted
    return res[:, 0], res[:, 1]


def _normalizer(n: int, count: int, normalize: str) -> int:
    if normalize == "tree":
        return subtree_size(n - 1)
    if normalize == "count":
        return count
    raise ValueError(f"normalize must be 'tree' or 'count', got {normalize!r}")


def sigma2_hat(res_even, res_odd, n: int, normalize: str = "tree") -> float:
    """Residual variance estimate, normalized by 2 |T_{n-1}| by default."""
    res_even, res_odd = np.asarray(res_even, float), np.asarray(res_odd, float)
    total = math.fsum((res_even * res_even).tolist() + (res_odd * res_odd).tolist())
    return total / (2 * _normalizer(n, res_even.size, normalize))


def rho_hat(res_even, res_odd, n: int, normalize: str = "tree") -> float:
    """Sister covariance estimate, normalized by |T_{n-1}| by default."""
    res_even, res_odd = np.asarray(res_even, float), np.asarray(res_odd, float)
    return math.fsum((res_even * res_odd).tolist()) / _normalizer(n, res_even.size, normalize)


def _true_noise_pairs(tree: SimulatedTree, n: int):
    if not tree.has_noise:
        raise NoiseNotRecorded("this tree was simulated without recording its noise")
    _check_n(tree, n, tree.p)
    k = np.arange(1 << tree.p, 1 << n, dtype=np.int64)  # T_{n-1,p}
    return tree.eps[2 * k], tree.eps[2 * k + 1]


def sigma2_bar(tree: SimulatedTree, n: Optional[int] = None) -> float:
    """Noise-based variance statistic over the mothers of T_{n-1,p}."""
    n = tree.n if n is None else n
    e, o = _true_noise_pairs(tree, n)
    return math.fsum((e * e).tolist() + (o * o).tolist()) / (2 * subtree_size(n - 1))


def rho_bar(tree: SimulatedTree, n: Optional[int] = None) -> float:
    n = tree.n if n is None else n
    e, o = _true_noise_pairs(tree, n)
    return math.fsum((e * o).tolist()) / subtree_size(n - 1)


def martingale(tree: SimulatedTree, n: Optional[int] = None, Gamma: Optional[np.ndarray] = None):
    """M_n and, when ``Gamma`` is given, its increasing process Gamma kron S_{n-1}.

    Returns ``(M, bracket)``; ``bracket`` is None without ``Gamma``.
    """
    n = tree.n if n is None else n
    if not tree.has_noise:
        raise NoiseNotRecorded("the martingale needs the recorded noise")
    labels, Y, _ = design(tree, n)
    V = np.column_stack([tree.eps[2 * labels], tree.eps[2 * labels + 1]])
    MV = _fsum_cols(Y, V)  # column c is sum eps_{2k+c} Y_k
    M = np.concatenate([MV[:, 0], MV[:, 1]])
    bracket = None if Gamma is None else np.kron(np.asarray(Gamma, float), _gram(Y))
    return M, bracket


def thest_gap(S: np.ndarray, theta_hat_vec: np.ndarray, theta_vec: np.ndarray, M: np.ndarray) -> float:
    """Norm of (I_2 kron S)(theta_hat - theta) - M; zero up to rounding."""
    q = S.shape[0]
    d = np.asarray(theta_hat_vec) - np.asarray(theta_vec)
    lhs = np.concatenate([S @ d[:q], S @ d[q:]])
    return float(np.linalg.norm(lhs - M))


@dataclass(frozen=True)
class EstimationResult:
    n: int
    p: int
    S: np.ndarray
    theta_hat: np.ndarray
    sigma2_hat: float
    rho_hat: float
    sigma2_bar: Optional[float]
    rho_bar: Optional[float]
    M: Optional[np.ndarray]
    bracket: Optional[np.ndarray]
    cond_S: float
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "seed": self.seed,
            "theta_hat": self.theta_hat.tolist(),
            "sigma2_hat": self.sigma2_hat,
            "rho_hat": self.rho_hat,
            "sigma2_bar": self.sigma2_bar,
            "rho_bar": self.rho_bar,
            "cond_S": self.cond_S,
        }


def estimate(
    tree: SimulatedTree,
    n: Optional[int] = None,
    Gamma: Optional[np.ndarray] = None,
    normalize: str = "tree",
) -> EstimationResult:
    """Every statistic at generation ``n`` in one pass."""
    n = tree.n if n is None else n
    labels, Y, Z = design(tree, n)
    S = _gram(Y)
    cond = condition_number(S)
    sol = spd_solve(S, _fsum_cols(Y, Z))
    th = np.concatenate([sol[:, 0], sol[:, 1]])
    re, ro = _residuals(Y, Z, th)
    if tree.has_noise:
        s2b, rb = sigma2_bar(tree, n), rho_bar(tree, n)
        V = np.column_stack([tree.eps[2 * labels], tree.eps[2 * labels + 1]])
        MV = _fsum_cols(Y, V)
        M = np.concatenate([MV[:, 0], MV[:, 1]])
        bracket = None if Gamma is None else np.kron(np.asarray(Gamma, float), S)
    else:
        s2b = rb = M = bracket = None
    return EstimationResult(
        n=n,
        p=tree.p,
        S=S,
        theta_hat=th,
        sigma2_hat=sigma2_hat(re, ro, n, normalize),
        rho_hat=rho_hat(re, ro, n, normalize),
        sigma2_bar=s2b,
        rho_bar=rb,
        M=M,
        bracket=bracket,
        cond_S=cond,
        seed=tree.seed,
    )
