"""Noise models for the sister pair (eps_2k, eps_2k+1).

Three families are provided:

* ``gaussian_pair``: i.i.d. centred bivariate normal pairs with covariance
  ``[[sigma2, rho], [rho, sigma2]]``.
* ``bounded_pair``: a correlated normal pair truncated to the square
  ``[-bound, bound]**2`` and rescaled to the requested variance. Still i.i.d.
* ``skew_switching_pair``: skewed two-component mixture marginals coupled by
  a Gaussian copula, with the skewness sign following the sign of the
  mother's value. The first four conditional moments do not depend on the
  mother, the law does. This is a non-i.i.d. noise.

Each model reports ``sigma2, rho, tau4, nu2``, computed at construction by
quadrature for the two non-Gaussian families.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import optimize, special

FAMILIES = ("gaussian_pair", "bounded_pair", "skew_switching_pair")

_GL_NODES = 200
_GH_NODES = 64
_TABLE_HALF_WIDTH = 8.5
_TABLE_POINTS = 8501


class CalibrationError(ValueError):
    """No admissible noise law matches the requested moments."""


@dataclass(frozen=True)
class NoiseModel:
    family: str
    sigma2: float
    rho: float
    tau4: float
    nu2: float
    params: dict = field(default_factory=dict)
    # family-specific sampling data filled by the constructors
    _calib: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not abs(self.rho) < self.sigma2:
            raise ValueError(f"need |rho| < sigma2, got rho={self.rho}, sigma2={self.sigma2}")
        if self.tau4 < self.sigma2**2 * (1 - 1e-12):
            raise ValueError(f"tau4={self.tau4} is below sigma2**2; not a valid fourth moment")
        if not self.nu2 > self.rho**2:
            raise ValueError(f"need nu2 > rho**2, got nu2={self.nu2}, rho={self.rho}")
        if not self.nu2 < self.tau4:
            raise ValueError(f"need nu2 < tau4, got nu2={self.nu2}, tau4={self.tau4}")

    @property
    def Gamma(self) -> np.ndarray:
        return np.array([[self.sigma2, self.rho], [self.rho, self.sigma2]])

    @property
    def iid(self) -> bool:
        return self.family != "skew_switching_pair"

    def moments(self) -> dict[str, float]:
        return {"sigma2": self.sigma2, "rho": self.rho, "tau4": self.tau4, "nu2": self.nu2}

    def to_dict(self) -> dict[str, Any]:
        out = {"family": self.family, "sigma2": self.sigma2, "rho": self.rho}
        out.update(self.params)
        return out

    def sample(self, parent_states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw one noise pair per mother; returns ``(eps_even, eps_odd)``."""
        return sample_pair(self, parent_states, rng)


def gaussian_pair(sigma2: float, rho: float = 0.0) -> NoiseModel:
    sigma2, rho = float(sigma2), float(rho)
    return NoiseModel(
        "gaussian_pair", sigma2, rho,
        tau4=3.0 * sigma2**2,
        nu2=sigma2**2 + 2.0 * rho**2,
    )


# partial moments of the standard normal on [lo, hi]: int_lo^hi w**j phi(w) dw
def _normal_partial_moments(lo, hi):
    plo = np.exp(-0.5 * lo**2) / np.sqrt(2 * np.pi)
    phi_ = np.exp(-0.5 * hi**2) / np.sqrt(2 * np.pi)
    p0 = special.ndtr(hi) - special.ndtr(lo)
    p1 = plo - phi_
    p2 = p0 + lo * plo - hi * phi_
    return p0, p1, p2


def _truncated_pair_moments(c: float, bound: float) -> dict[str, float]:
    """Moments of a unit normal pair with correlation ``c`` conditioned on the square."""
    x, wts = np.polynomial.legendre.leggauss(_GL_NODES)
    z = bound * x
    wz = bound * wts * np.exp(-0.5 * z**2) / np.sqrt(2 * np.pi)
    s = np.sqrt(1.0 - c * c)
    lo, hi = (-bound - c * z) / s, (bound - c * z) / s
    p0, p1, p2 = _normal_partial_moments(lo, hi)
    # Z2 = c z + s W
    m0 = p0
    m1 = c * z * p0 + s * p1
    m2 = (c * z) ** 2 * p0 + 2 * c * z * s * p1 + s**2 * p2
    mass = np.sum(wz * m0)
    return {
        "mass": mass,
        "m2": np.sum(wz * z**2 * m0) / mass,
        "m4": np.sum(wz * z**4 * m0) / mass,
        "cross": np.sum(wz * z * m1) / mass,
        "cross22": np.sum(wz * z**2 * m2) / mass,
    }


def bounded_pair(sigma2: float, rho: float = 0.0, bound: float = 6.0) -> NoiseModel:
    sigma2, rho, bound = float(sigma2), float(rho), float(bound)
    if not bound > 0:
        raise ValueError(f"truncation bound must be positive, got {bound}")
    if not abs(rho) < sigma2:
        raise ValueError(f"need |rho| < sigma2, got rho={rho}, sigma2={sigma2}")
    target = rho / sigma2

    def corr(c):
        m = _truncated_pair_moments(c, bound)
        return m["cross"] / m["m2"]

    if target == 0.0:
        c = 0.0
    else:
        lim = 1.0 - 1e-9
        lo_val, hi_val = corr(-lim), corr(lim)
        if not lo_val < target < hi_val:
            raise CalibrationError(f"correlation {target} unreachable with bound {bound}")
        c = optimize.brentq(lambda c: corr(c) - target, -lim, lim, xtol=1e-15, rtol=1e-14)
    m = _truncated_pair_moments(c, bound)
    scale2 = sigma2 / m["m2"]
    calib = {"c": float(c), "scale": float(np.sqrt(scale2)), "bound": bound}
    return NoiseModel(
        "bounded_pair", sigma2, rho,
        tau4=float(scale2**2 * m["m4"]),
        nu2=float(scale2**2 * m["cross22"]),
        params={"bound": bound},
        _calib=calib,
    )


def _mixture_from_moments(sigma2: float, tau4: float, skew: float) -> dict[str, float]:
    """Two-component, equal-variance normal mixture with mean 0 and given moments.

    With ``q`` the share of variance carried by the component means, the
    standardized skewness is ``q**1.5 * g`` and the excess kurtosis is
    ``q**2 * (g**2 - 2)``, where ``g = (1 - 2w) / sqrt(w (1 - w))`` depends on
    the mixture weight ``w`` only. Eliminating ``g`` leaves the decreasing
    equation ``skew**2 / q - 2 q**2 = kurt``, solved for ``q`` on (0, 1).
    """
    kurt = tau4 / sigma2**2 - 3.0
    if not skew > 0:
        raise CalibrationError("skew_switching_pair needs a positive skewness magnitude")
    if not kurt > skew**2 - 2.0:
        raise CalibrationError(
            f"excess kurtosis {kurt:.4g} must exceed skew**2 - 2 = {skew**2 - 2:.4g}"
        )
    f = lambda q: skew**2 / q - 2.0 * q**2 - kurt
    q = optimize.brentq(f, 1e-12, 1.0, xtol=1e-15, rtol=1e-14)
    g = skew / q**1.5
    u = g / np.sqrt(g * g + 4.0)
    w = 0.5 * (1.0 - u)
    d = np.sqrt(q * sigma2 / (w * (1.0 - w)))
    return {"w": w, "mu1": d * (1.0 - w), "mu2": -d * w, "sd": np.sqrt((1.0 - q) * sigma2)}


def _mixture_normal_score(z: np.ndarray, mix: dict[str, float]) -> np.ndarray:
    """Quantile of the mixture at ``ndtr(z)``, by bisection on either tail."""
    z = np.asarray(z, dtype=float)
    w, mu1, mu2, sd = mix["w"], mix["mu1"], mix["mu2"], mix["sd"]
    spread = abs(mu1) + abs(mu2) + sd
    lo = np.minimum(mu2, mu1) + sd * np.minimum(z, 0.0) * 1.5 - spread
    hi = np.maximum(mu2, mu1) + sd * np.maximum(z, 0.0) * 1.5 + spread
    # extend brackets until they straddle the target
    lower = z <= 0
    log_target = np.where(lower, special.log_ndtr(z), special.log_ndtr(-z))

    def log_tail(x):
        a, b = (x - mu1) / sd, (x - mu2) / sd
        left = np.logaddexp(np.log(w) + special.log_ndtr(a), np.log1p(-w) + special.log_ndtr(b))
        right = np.logaddexp(np.log(w) + special.log_ndtr(-a), np.log1p(-w) + special.log_ndtr(-b))
        return np.where(lower, left, right)

    def below(x):
        # True when x is left of the quantile
        t = log_tail(x)
        return np.where(lower, t < log_target, t > log_target)

    for _ in range(60):
        bad_lo = ~below(lo)
        bad_hi = below(hi)
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo - spread * 2, lo)
        hi = np.where(bad_hi, hi + spread * 2, hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        left = below(mid)
        lo = np.where(left, mid, lo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def _copula_moments(c: float, mix: dict[str, float]) -> tuple[float, float]:
    """E[e1 e2] and E[e1**2 e2**2] for the Gaussian-copula pair, by Gauss-Hermite."""
    x, wts = np.polynomial.hermite_e.hermegauss(_GH_NODES)
    wts = wts / np.sqrt(2 * np.pi)
    s = np.sqrt(max(1.0 - c * c, 0.0))
    z2 = c * x[:, None] + s * x[None, :]
    g1 = _mixture_normal_score(x, mix)[:, None]
    g2 = _mixture_normal_score(z2, mix)
    w2 = wts[:, None] * wts[None, :]
    return float(np.sum(w2 * g1 * g2)), float(np.sum(w2 * g1**2 * g2**2))


def skew_switching_pair(
    sigma2: float, rho: float = 0.0, tau4: float | None = None, skew: float = 1.0
) -> NoiseModel:
    sigma2, rho, skew = float(sigma2), float(rho), float(skew)
    tau4 = 4.0 * sigma2**2 if tau4 is None else float(tau4)
    if not abs(rho) < sigma2:
        raise ValueError(f"need |rho| < sigma2, got rho={rho}, sigma2={sigma2}")
    mix = _mixture_from_moments(sigma2, tau4, skew)
    if rho == 0.0:
        c = 0.0
    else:
        lim = 1.0 - 1e-9
        lo_val = _copula_moments(-lim, mix)[0]
        hi_val = _copula_moments(lim, mix)[0]
        if not lo_val < rho < hi_val:
            raise CalibrationError(
                f"rho={rho} outside the copula range ({lo_val:.4g}, {hi_val:.4g})"
            )
        c = optimize.brentq(
            lambda c: _copula_moments(c, mix)[0] - rho, -lim, lim, xtol=1e-14, rtol=1e-13
        )
    nu2 = _copula_moments(c, mix)[1]
    grid = np.linspace(-_TABLE_HALF_WIDTH, _TABLE_HALF_WIDTH, _TABLE_POINTS)
    calib = {"c": c, "mix": mix, "grid": grid, "table": _mixture_normal_score(grid, mix)}
    return NoiseModel(
        "skew_switching_pair", sigma2, rho,
        tau4=tau4, nu2=nu2,
        params={"tau4": tau4, "skew": skew},
        _calib=calib,
    )


def make_noise(family: str, sigma2: float, rho: float = 0.0, **params) -> NoiseModel:
    if family == "gaussian_pair":
        if params:
            raise ValueError(f"gaussian_pair takes no extra parameters, got {sorted(params)}")
        return gaussian_pair(sigma2, rho)
    if family == "bounded_pair":
        return bounded_pair(sigma2, rho, **params)
    if family == "skew_switching_pair":
        return skew_switching_pair(sigma2, rho, **params)
    raise ValueError(f"unknown noise family {family!r}; expected one of {FAMILIES}")


def sample_pair(
    noise: NoiseModel, parent_states: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One noise pair per entry of ``parent_states``, drawn in array order."""
    parent_states = np.asarray(parent_states, dtype=float)
    m = parent_states.shape[0]
    if noise.family == "gaussian_pair":
        z = rng.standard_normal((m, 2))
        sd = np.sqrt(noise.sigma2)
        r = noise.rho / noise.sigma2
        even = sd * z[:, 0]
        odd = sd * (r * z[:, 0] + np.sqrt(1.0 - r * r) * z[:, 1])
        return even, odd

    c = noise._calib["c"]
    s = np.sqrt(1.0 - c * c)
    if noise.family == "bounded_pair":
        bound = noise._calib["bound"]
        out = np.empty((m, 2))
        todo = np.arange(m)
        while todo.size:
            z = rng.standard_normal((todo.size, 2))
            z1 = z[:, 0]
            z2 = c * z[:, 0] + s * z[:, 1]
            ok = (np.abs(z1) <= bound) & (np.abs(z2) <= bound)
            out[todo[ok], 0] = z1[ok]
            out[todo[ok], 1] = z2[ok]
            todo = todo[~ok]
        out *= noise._calib["scale"]
        return out[:, 0], out[:, 1]

    # skew_switching_pair
    z = rng.standard_normal((m, 2))
    z1 = z[:, 0]
    z2 = c * z[:, 0] + s * z[:, 1]
    grid, table = noise._calib["grid"], noise._calib["table"]
    sign = np.where(parent_states < 0, -1.0, 1.0)
    even = sign * np.interp(z1, grid, table)
    odd = sign * np.interp(z2, grid, table)
    return even, odd
