"""Deterministic limits of the normalized design and the moderate-deviation rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BarModel
from .noise import NoiseModel

FP_TOL = 1e-14
FP_MAX_ITER = 10_000


class LimitError(ValueError):
    pass


def _averages(model: BarModel) -> dict:
    a0, b0 = model.a[0], model.b[0]
    return {
        "abar": 0.5 * (a0 + b0),
        "a2bar": 0.5 * (a0 * a0 + b0 * b0),
        "Abar": 0.5 * (model.A + model.B),
    }


def xi_vector(model: BarModel) -> np.ndarray:
    """Limit of the mean regression vector: abar (I - Abar)^{-1} e_1."""
    p = model.p
    av = _averages(model)
    e1 = np.zeros(p)
    e1[0] = 1.0
    try:
        return av["abar"] * np.linalg.solve(np.eye(p) - av["Abar"], e1)
    except np.linalg.LinAlgError as exc:
        raise LimitError("I - (A+B)/2 is singular") from exc


def t_matrix(model: BarModel, sigma2: float, Xi: np.ndarray) -> np.ndarray:
    """Source term of the second-moment fixed point."""
    p = model.p
    av = _averages(model)
    e1 = np.zeros(p)
    e1[0] = 1.0
    E11 = np.outer(e1, e1)
    AX, BX = model.A @ Xi, model.B @ Xi
    cross = model.a[0] * (np.outer(AX, e1) + np.outer(e1, AX)) + model.b[0] * (
        np.outer(BX, e1) + np.outer(e1, BX)
    )
    return (sigma2 + av["a2bar"]) * E11 + 0.5 * cross


@dataclass(frozen=True)
class FixedPointReport:
    iterations: int
    step: float       # last ||Lambda_{m+1} - Lambda_m||
    residual: float   # ||Lambda - T - (A Lambda A^t + B Lambda B^t)/2||
    steps: tuple      # successive step norms, for contraction diagnostics


def _second_moment_map(model: BarModel, T: np.ndarray, Lam: np.ndarray) -> np.ndarray:
    A, B = model.A, model.B
    return T + 0.5 * (A @ Lam @ A.T + B @ Lam @ B.T)


def lambda_fixed_point(model: BarModel, T: np.ndarray, tol: float = FP_TOL, max_iter: int = FP_MAX_ITER):
    """Solve Lambda = T + (A Lambda A^t + B Lambda B^t) / 2 by iteration from T.

    Successive steps shrink by at most ``beta**2`` in the spectral norm; for
    p >= 2 (where beta >= 1) convergence follows from the spectral radius
    of the map being below one. Returns
    ``(Lambda, FixedPointReport)``.
    """
    Lam = np.array(T, dtype=float)
    steps = []
    for it in range(1, max_iter + 1):
        nxt = _second_moment_map(model, T, Lam)
        nxt = 0.5 * (nxt + nxt.T)
        step = float(np.linalg.norm(nxt - Lam, 2))
        steps.append(step)
        done = step <= tol * (1.0 + float(np.linalg.norm(Lam, 2)))
        Lam = nxt
        if done:
            break
    else:
        raise LimitError(
            f"fixed point did not converge in {max_iter} iterations (last step {steps[-1]:.3g}); "
            f"the model is numerically too close to instability (beta = {model.beta:.6g}, "
            f"mean-square radius = {model.ms_radius:.6g})"
        )
    residual = float(np.linalg.norm(Lam - _second_moment_map(model, T, Lam), 2))
    return Lam, FixedPointReport(iterations=it, step=steps[-1], residual=residual, steps=tuple(steps))


def lambda_linear_system(model: BarModel, T: np.ndarray) -> np.ndarray:
    """Direct solve of the vectorized fixed-point equation (p**2 unknowns)."""
    p = model.p
    A, B = model.A, model.B
    K = np.eye(p * p) - 0.5 * (np.kron(A, A) + np.kron(B, B))
    vec = np.linalg.solve(K, np.asarray(T, float).reshape(-1))
    return vec.reshape(p, p)


def l_matrix(Xi: np.ndarray, Lambda: np.ndarray, check: bool = True) -> np.ndarray:
    """L = [[1, Xi^t], [Xi, Lambda]]; positive definiteness checked by Cholesky."""
    p = Xi.shape[0]
    L = np.empty((p + 1, p + 1))
    L[0, 0] = 1.0
    L[0, 1:] = Xi
    L[1:, 0] = Xi
    L[1:, 1:] = Lambda
    if check:
        try:
            np.linalg.cholesky(L)
        except np.linalg.LinAlgError as exc:
            raise LimitError("limit matrix L is not positive definite (degenerate model)") from exc
    return L


def asymp_cov(Gamma: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Gamma kron L^{-1}, the limit covariance of sqrt(|T_{n-1}|) (theta_hat - theta)."""
    return np.kron(np.asarray(Gamma, float), np.linalg.inv(L))


@dataclass(frozen=True)
class RateCoeffs:
    theta_quadratic: np.ndarray  # Gamma^{-1} kron L
    M_quadratic: np.ndarray      # (Gamma kron L)^{-1}
    sigma2_denom: float          # tau4 - 2 sigma2**2 + nu2
    rho_denom: float             # 2 (nu2 - rho**2)

    def __post_init__(self):
        if not self.sigma2_denom > 0:
            raise LimitError(f"sigma2 rate denominator must be positive, got {self.sigma2_denom}")
        if not self.rho_denom > 0:
            raise LimitError(f"rho rate denominator must be positive, got {self.rho_denom}")

    @classmethod
    def build(cls, noise: NoiseModel, L: np.ndarray) -> "RateCoeffs":
        Gamma = noise.Gamma
        return cls(
            theta_quadratic=np.kron(np.linalg.inv(Gamma), L),
            M_quadratic=np.kron(np.linalg.inv(Gamma), np.linalg.inv(L)),
            sigma2_denom=noise.tau4 - 2.0 * noise.sigma2**2 + noise.nu2,
            rho_denom=2.0 * (noise.nu2 - noise.rho**2),
        )

    def rate_theta(self, x) -> float:
        x = np.asarray(x, float)
        return 0.5 * float(x @ self.theta_quadratic @ x)

    def rate_M(self, x) -> float:
        x = np.asarray(x, float)
        return 0.5 * float(x @ self.M_quadratic @ x)

    def rate_sigma2(self, x):
        return np.asarray(x, float) ** 2 / self.sigma2_denom

    def rate_rho(self, x):
        return np.asarray(x, float) ** 2 / self.rho_denom


@dataclass(frozen=True)
class LimitSet:
    Xi: np.ndarray
    Tmat: np.ndarray
    Lambda: np.ndarray
    L: np.ndarray
    Sigma_norm: float
    asymp_cov: np.ndarray
    abar: float
    a2bar: float
    Abar: np.ndarray
    residual: float
    fixed_point: FixedPointReport
    rates: RateCoeffs

    def to_dict(self) -> dict:
        return {
            "Xi": self.Xi.tolist(),
            "T": self.Tmat.tolist(),
            "Lambda": self.Lambda.tolist(),
            "L": self.L.tolist(),
            "Sigma_norm": self.Sigma_norm,
            "asymp_cov": self.asymp_cov.tolist(),
            "abar": self.abar,
            "a2bar": self.a2bar,
            "Abar": self.Abar.tolist(),
            "fixed_point": {
                "iterations": self.fixed_point.iterations,
                "last_step": self.fixed_point.step,
                "residual": self.fixed_point.residual,
            },
            "rates": {
                "theta_quadratic": self.rates.theta_quadratic.tolist(),
                "M_quadratic": self.rates.M_quadratic.tolist(),
                "sigma2_denom": self.rates.sigma2_denom,
                "sigma2_denom_alt": 2.0 * self.rates.sigma2_denom,
                "rho_denom": self.rates.rho_denom,
            },
        }


def design_limit(model: BarModel, sigma2: float, check: bool = True) -> np.ndarray:
    """The limit L of S_n / |T_n| for noise variance ``sigma2`` (may be 0)."""
    Xi = xi_vector(model)
    Lam, _ = lambda_fixed_point(model, t_matrix(model, sigma2, Xi))
    return l_matrix(Xi, Lam, check=check)


def compute_limits(model: BarModel, noise: NoiseModel) -> LimitSet:
    if not model.stable:
        raise LimitError(f"limits need a stable model, beta = {model.beta:.6g}, "
                         f"mean-square radius = {model.ms_radius:.6g}")
    av = _averages(model)
    Xi = xi_vector(model)
    T = t_matrix(model, noise.sigma2, Xi)
    Lam, report = lambda_fixed_point(model, T)
    L = l_matrix(Xi, Lam)
    return LimitSet(
        Xi=Xi,
        Tmat=T,
        Lambda=Lam,
        L=L,
        Sigma_norm=float(np.linalg.norm(L, 2)),
        asymp_cov=asymp_cov(noise.Gamma, L),
        abar=float(av["abar"]),
        a2bar=float(av["a2bar"]),
        Abar=av["Abar"],
        residual=report.residual,
        fixed_point=report,
        rates=RateCoeffs.build(noise, L),
    )


def p1_closed_form(model: BarModel, sigma2: float) -> tuple[float, float]:
    """(Xi, Lambda) for p = 1 from the scalar formulas."""
    if model.p != 1:
        raise ValueError("closed forms exist for p = 1 only")
    a0, a1 = model.a
    b0, b1 = model.b
    abar = 0.5 * (a0 + b0)
    a2bar = 0.5 * (a0 * a0 + b0 * b0)
    ab = 0.5 * (a0 * a1 + b0 * b1)
    bbar = 0.5 * (a1 + b1)
    b2bar = 0.5 * (a1 * a1 + b1 * b1)
    Xi = abar / (1.0 - bbar)
    Lam = (a2bar + sigma2 + 2.0 * Xi * ab) / (1.0 - b2bar)
    return Xi, Lam
