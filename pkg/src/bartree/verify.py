"""Replicated Monte-Carlo checks of the deviation and moderate-deviation theory.

The engine simulates ``R`` independent trees (replicate ``r`` seeded with
``mix(master_seed, r)``), estimates every statistic at each generation of a
grid, and turns the replicate table into tail probabilities, decay-slope
fits, envelope fits, moderate-deviation rate curves and covariance checks.
Reports are pure functions of the inputs: worker count never changes them.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize, stats

from . import rng as _rng
from .estimate import SingularDesign, estimate, s_matrix
from .model import BarModel, InitSpec, simulate
from .noise import NoiseModel
from .tree import subtree_size

WILSON_Z = 1.959963984540054
CRITICAL_TOL = 1e-4
HALF = 0.5
ROOT_HALF = math.sqrt(0.5)


# ---------------------------------------------------------------------------
# replicate engine


@dataclass
class ReplicateSet:
    """Per-replicate statistics on a grid of generations.

    Arrays are indexed ``[replicate, grid position, ...]`` and hold only the
    replicates that produced a nonsingular design at every grid point.
    """

    ns: tuple
    p: int
    seeds: np.ndarray
    theta_hat: np.ndarray   # (R, k, 2(p+1))
    sigma2_hat: np.ndarray  # (R, k)
    rho_hat: np.ndarray
    sigma2_bar: np.ndarray
    rho_bar: np.ndarray
    M: np.ndarray           # (R, k, 2(p+1))
    S_prev: np.ndarray      # (R, k, p+1, p+1): S_{n-1}
    S_cur: Optional[np.ndarray]  # (R, k, p+1, p+1): S_n, when requested
    failed: list = field(default_factory=list)

    @property
    def R(self) -> int:
        return self.seeds.shape[0]

    def at(self, n: int) -> int:
        return self.ns.index(n)


def _one_replicate(args):
    model, noise, init, ns, seed, with_s = args
    tree = simulate(model, noise, max(ns), seed=seed, init=init)
    rows = []
    Gamma = None if noise is None else noise.Gamma
    for n in ns:
        try:
            est = estimate(tree, n, Gamma)
        except SingularDesign:
            return None
        rows.append(
            (
                est.theta_hat,
                est.sigma2_hat,
                est.rho_hat,
                est.sigma2_bar,
                est.rho_bar,
                est.M,
                est.S,
                s_matrix(tree, n) if with_s else None,
            )
        )
    return rows


def _run_chunk(args):
    model, noise, init, ns, seeds, with_s = args
    return [_one_replicate((model, noise, init, ns, s, with_s)) for s in seeds]


def run_replicates(
    model: BarModel,
    noise: Optional[NoiseModel],
    ns: Sequence[int],
    R: int,
    master_seed: int,
    workers: int = 1,
    init: Optional[InitSpec] = None,
    with_s: bool = True,
) -> ReplicateSet:
    """Simulate and estimate ``R`` replicates on the generation grid ``ns``.

    One tree per replicate is simulated up to ``max(ns)``; the statistics at
    smaller ``n`` use its first generations. Replicates with a singular
    design are dropped and listed in ``failed``.
    """
    if R < 1:
        raise ValueError("need at least one replicate")
    if not model.stable:
        raise ValueError(f"replicates need a stable model, beta = {model.beta:.6g}, "
                         f"mean-square radius = {model.ms_radius:.6g}")
    ns = tuple(sorted(int(n) for n in ns))
    if ns[0] < model.p:
        raise ValueError(f"smallest generation {ns[0]} is below p = {model.p}")
    init = init or InitSpec()
    seeds = [_rng.replicate_seed(master_seed, r) for r in range(R)]
    workers = max(1, int(workers))
    if workers == 1 or R < 2 * workers:
        results = _run_chunk((model, noise, init, ns, seeds, with_s))
    else:
        bounds = np.linspace(0, R, workers * 4 + 1).astype(int)
        chunks = [seeds[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_run_chunk, [(model, noise, init, ns, c, with_s) for c in chunks])
            results = [res for part in parts for res in part]

    failed = [r for r, res in enumerate(results) if res is None]
    good = [res for res in results if res is not None]
    keep = np.array([s for s, res in zip(seeds, results) if res is not None], dtype=np.uint64)

    def stack(i, dtype=float):
        if not good:
            return np.empty((0, len(ns)))
        col = [[row[i] for row in res] for res in good]
        if any(v is None for rowset in col for v in rowset):
            return None
        return np.array(col, dtype=dtype)

    q = model.p + 1
    return ReplicateSet(
        ns=ns,
        p=model.p,
        seeds=keep,
        theta_hat=stack(0).reshape(len(good), len(ns), 2 * q),
        sigma2_hat=stack(1),
        rho_hat=stack(2),
        sigma2_bar=stack(3),
        rho_bar=stack(4),
        M=stack(5),
        S_prev=stack(6),
        S_cur=stack(7) if with_s else None,
        failed=failed,
    )


# ---------------------------------------------------------------------------
# tail probabilities


def wilson_interval(count: int, R: int, z: float = WILSON_Z) -> tuple[float, float]:
    p = count / R
    denom = 1.0 + z * z / R
    center = (p + z * z / (2 * R)) / denom
    half = z * math.sqrt(p * (1 - p) / R + z * z / (4 * R * R)) / denom
    lo, hi = max(0.0, center - half), min(1.0, center + half)
    return min(lo, p), max(hi, p)


def empirical_tail(samples, deltas) -> list[dict]:
    """P_hat(stat > delta) with Wilson 95% intervals, one row per delta."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("empirical_tail needs at least one sample")
    R = samples.size
    rows = []
    for d in deltas:
        count = int(np.count_nonzero(samples > d))
        lo, hi = wilson_interval(count, R)
        rows.append({"delta": float(d), "count": count, "R": R, "p_hat": count / R, "ci_lo": lo, "ci_hi": hi})
    return rows


# ---------------------------------------------------------------------------
# regimes, envelopes and decay slopes


def snap_beta(beta: float, tol: float = CRITICAL_TOL) -> float:
    """Map beta within ``tol`` of 1/2 or sqrt(2)/2 onto that critical value."""
    if abs(beta - HALF) <= tol:
        return HALF
    if abs(beta - ROOT_HALF) <= tol:
        return ROOT_HALF
    return float(beta)


def regime_for(case: int, beta: float) -> str:
    if case not in (1, 2):
        raise ValueError(f"case must be 1 or 2, got {case}")
    beta = snap_beta(beta)
    crit = HALF if case == 1 else ROOT_HALF
    if beta == crit:
        return "critical"
    return "sub" if beta < crit else "super"


@dataclass(frozen=True)
class EnvelopeParams:
    case: int
    regime: str
    c1: float
    c2: float
    c3: float
    c4: Optional[float] = None
    b: float = 1.0

    def __post_init__(self):
        if self.case not in (1, 2):
            raise ValueError(f"case must be 1 or 2, got {self.case}")
        if self.regime not in ("sub", "critical", "super"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if not (self.c1 > 0 and self.c2 > 0 and self.c3 >= 0 and self.b > 0):
            raise ValueError("need c1 > 0, c2 > 0, c3 >= 0 and b > 0")
        if self.case == 1 and self.c4 is not None:
            raise ValueError("case 1 envelopes have no c4")
        if self.case == 2:
            if self.c4 is None or self.c4 < 0:
                raise ValueError("case 2 envelopes need c4 >= 0")
            if self.c3 == 0 and self.c4 == 0:
                raise ValueError("case 2 envelopes need (c3, c4) != (0, 0)")

    def to_dict(self) -> dict:
        return {"case": self.case, "regime": self.regime, "c1": self.c1, "c2": self.c2,
                "c3": self.c3, "c4": self.c4, "b": self.b}


def decay_scale(case: int, regime: str, n, beta: Optional[float] = None):
    """Return ``(s(n), prefactor(n))`` of the deviation bound for (case, regime)."""
    n = np.asarray(n, dtype=float)
    m = n - 1.0
    if regime == "super" and beta is None:
        raise ValueError("the super-critical regime needs beta")
    ones = np.ones_like(n)
    if case == 1:
        if regime == "sub":
            return 2.0**n / m**2, ones
        if regime == "critical":
            return 2.0**n / m**2, m
        return 1.0 / (m * beta**n), m
    if regime == "sub":
        return 2.0**n / m**2, ones
    if regime == "critical":
        return 2.0**n / m**3, ones
    return 1.0 / (m**2 * beta ** (2 * n)), ones


def envelope(params: EnvelopeParams, n, delta, beta: Optional[float] = None):
    """Deviation bound on P(||theta_hat_n - theta|| > delta)."""
    if beta is not None and regime_for(params.case, beta) != params.regime:
        raise ValueError(
            f"beta = {beta} is in the {regime_for(params.case, beta)!r} regime for case "
            f"{params.case}, not {params.regime!r}"
        )
    u = np.asarray(delta, dtype=float) * params.b
    c4 = 1.0 if params.case == 1 else params.c4
    coef = params.c2 * u**2 / (params.c3 + c4 * u)
    s, pref = decay_scale(params.case, params.regime, n, beta)
    return params.c1 * pref * np.exp(-coef * s)


class VacuousTail(ValueError):
    """Too few nonzero tail probabilities to fit a decay."""


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_lo: float
    ci_hi: float
    n_used: tuple
    positive: bool  # slope > 0 with 95% confidence

    @property
    def violation(self) -> bool:
        return not self.positive

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "stderr": self.stderr,
                "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "n_used": list(self.n_used),
                "positive": self.positive}


def fit_decay_slope(ns, p_hats, case: int = 1, regime: str = "sub", beta: Optional[float] = None,
                    scale: Optional[Callable] = None) -> SlopeFit:
    """Least-squares slope of -log P_hat (prefactor removed) against s(n).

    ``scale`` overrides the (case, regime) decay scale with a custom
    ``n -> s(n)`` and no prefactor.
    """
    ns = np.asarray(ns, dtype=float)
    p_hats = np.asarray(p_hats, dtype=float)
    keep = p_hats > 0
    if np.count_nonzero(keep) < 3:
        raise VacuousTail("fewer than three generations with a nonzero tail probability")
    ns, p_hats = ns[keep], p_hats[keep]
    if scale is None:
        s, pref = decay_scale(case, regime, ns, beta)
    else:
        s, pref = np.asarray(scale(ns), dtype=float), np.ones_like(ns)
    y = -np.log(p_hats) + np.log(pref)
    fit = stats.linregress(s, y)
    dof = ns.size - 2
    if dof > 0 and np.isfinite(fit.stderr):
        t = stats.t.ppf(0.975, dof)
        lo, hi = fit.slope - t * fit.stderr, fit.slope + t * fit.stderr
    else:
        lo = hi = float("nan")
    return SlopeFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        stderr=float(fit.stderr),
        ci_lo=float(lo),
        ci_hi=float(hi),
        n_used=tuple(int(v) for v in ns),
        positive=bool(lo > 0),
    )


def fit_envelope(table: Sequence[dict], case: int, beta: float, Sigma_norm: float) -> EnvelopeParams:
    """Fit c1..c4 to a tail table ``[{n, delta, p_hat, ci_lo, ci_hi}, ...]``.

    log c1 is profiled out: it is the least-squares value, raised where
    needed so that the bound dominates ``p_hat - half width`` at every row.
    The free constant b is fixed at half its admissible maximum over the
    table's deltas; only the product delta*b enters the bound.
    """
    regime = regime_for(case, beta)
    rows = [r for r in table if r["p_hat"] > 0]
    if not rows:
        raise VacuousTail("no nonzero tail probability to fit")
    n = np.array([r["n"] for r in table], float)
    d = np.array([r["delta"] for r in table], float)
    p = np.array([r["p_hat"] for r in table], float)
    target = np.array([max(r["p_hat"] - 0.5 * (r["ci_hi"] - r["ci_lo"]), 0.0) for r in table])
    b = float(0.5 * Sigma_norm / (1.0 + d.max()))
    s, pref = decay_scale(case, regime, n, beta)
    pos, tpos = p > 0, target > 0

    def unpack(x):
        c2, c3 = math.exp(x[0]), math.exp(x[1])
        c4 = math.exp(x[2]) if case == 2 else None
        return c2, c3, c4

    def shape(x):
        c2, c3, c4 = unpack(x)
        u = d * b
        coef = c2 * u**2 / (c3 + (1.0 if c4 is None else c4) * u)
        return np.log(pref) - coef * s

    def log_c1(g):
        ls = np.mean(np.log(p[pos]) - g[pos])
        need = np.max(np.log(target[tpos]) - g[tpos]) if tpos.any() else -np.inf
        return max(ls, need)

    def loss(x):
        g = shape(x)
        return float(np.sum((log_c1(g) + g[pos] - np.log(p[pos])) ** 2))

    x0 = np.zeros(3 if case == 2 else 2)
    res = optimize.minimize(loss, x0, method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000})
    c2, c3, c4 = unpack(res.x)
    return EnvelopeParams(case=case, regime=regime, c1=math.exp(log_c1(shape(res.x))),
                          c2=c2, c3=c3, c4=c4, b=b)


def envelope_dominance(params: EnvelopeParams, table: Sequence[dict], beta: float) -> list[dict]:
    """Rows where the bound falls below ``p_hat - half width`` (empty means dominance)."""
    out = []
    for r in table:
        bound = float(envelope(params, r["n"], r["delta"], beta))
        need = r["p_hat"] - 0.5 * (r["ci_hi"] - r["ci_lo"])
        if bound < need * (1 - 1e-9):
            out.append({"n": r["n"], "delta": r["delta"], "bound": bound, "needed": need})
    return out


# ---------------------------------------------------------------------------
# scale sequences


@dataclass(frozen=True)
class ScaleSpec:
    """Power-law deviation scale b_N = N**alpha."""

    alpha: float
    case: int
    beta: float

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ValueError(f"need 0 < alpha < 1/2 so that b_N -> inf and b_N/sqrt(N) -> 0, got {self.alpha}")
        if self.case not in (1, 2):
            raise ValueError(f"case must be 1 or 2, got {self.case}")
        if not 0 <= self.beta < 1:
            raise ValueError(f"need 0 <= beta < 1, got {self.beta}")

    def b(self, N):
        return np.asarray(N, dtype=float) ** self.alpha


@dataclass(frozen=True)
class ScaleVerdict:
    passed: bool
    regime: str
    threshold: float  # alpha must be strictly below this


def scale_admissible(scale: ScaleSpec) -> ScaleVerdict:
    """Exponent form of the scale conditions for b_N = N**alpha.

    With N = |T_n| ~ 2**(n+1) and r_N ~ log2 N, every logarithmic factor is
    negligible against a power of N, so each branch reduces to a strict
    upper bound on alpha.
    """
    beta = snap_beta(scale.beta)
    if scale.case == 1:
        if beta < HALF:
            return ScaleVerdict(scale.alpha < 0.5, "beta<1/2", 0.5)
        if beta == HALF:
            return ScaleVerdict(scale.alpha < 0.5, "beta=1/2", 0.5)
        thr = 0.25 if beta == ROOT_HALF else -math.log2(beta) / 2.0
        return ScaleVerdict(scale.alpha < thr, "beta>1/2", thr)
    if beta < ROOT_HALF:
        return ScaleVerdict(scale.alpha < 0.5, "beta^2<1/2", 0.5)
    if beta == ROOT_HALF:
        return ScaleVerdict(scale.alpha < 0.5, "beta^2=1/2", 0.5)
    thr = -math.log2(beta)
    return ScaleVerdict(scale.alpha < thr, "beta^2>1/2", thr)


def scale_table(cases, betas, alphas) -> list[dict]:
    rows = []
    for case in cases:
        for beta in betas:
            for alpha in alphas:
                v = scale_admissible(ScaleSpec(alpha=alpha, case=case, beta=beta))
                rows.append({"case": case, "beta": beta, "alpha": alpha, "pass": v.passed,
                             "regime": v.regime, "threshold": v.threshold})
    return rows


# ---------------------------------------------------------------------------
# moderate deviations


def mdp_rate_curve(samples, N: int, alpha: float, xs, rate: Optional[Callable] = None) -> list[dict]:
    """Empirical rate R_hat(x) = -log P(sqrt(N)/b_N |stat| > x) / b_N**2.

    ``samples`` are centred errors (estimator minus truth). Grid points with
    no exceedance are censored and carry the lower bound log(R) / b_N**2.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    R = samples.size
    if R == 0:
        raise ValueError("mdp_rate_curve needs samples")
    bN = float(N) ** alpha
    z = math.sqrt(N) / bN * np.abs(samples)
    rows = []
    for x in xs:
        count = int(np.count_nonzero(z > x))
        censored = count == 0
        p_hat = count / R
        r_hat = (math.log(R) if censored else -math.log(p_hat)) / bN**2
        rows.append({
            "x": float(x), "b_N": bN, "count": count, "p_hat": p_hat, "R_hat": r_hat,
            "censored": censored, "I_theory": None if rate is None else float(rate(x)),
        })
    return rows


@dataclass(frozen=True)
class QuadraticFit:
    c: float
    min_ratio: float
    max_ratio: float
    nondecreasing: bool
    points: int

    @property
    def within_factor_two(self) -> bool:
        return self.points > 0 and self.min_ratio >= 0.5 and self.max_ratio <= 2.0

    def to_dict(self) -> dict:
        return {"c": self.c, "min_ratio": self.min_ratio, "max_ratio": self.max_ratio,
                "nondecreasing": self.nondecreasing, "points": self.points,
                "within_factor_two": self.within_factor_two}


def fit_quadratic_rate(rows: Sequence[dict]) -> QuadraticFit:
    """Fit R_hat(x) ~ c x**2 on the uncensored points (least squares in log scale)."""
    pts = [(r["x"], r["R_hat"]) for r in rows if not r["censored"] and r["R_hat"] > 0 and r["x"] > 0]
    if not pts:
        return QuadraticFit(float("nan"), float("nan"), float("nan"), True, 0)
    x = np.array([t[0] for t in pts])
    y = np.array([t[1] for t in pts])
    c = float(np.exp(np.mean(np.log(y) - 2 * np.log(x))))
    ratio = y / (c * x * x)
    order = np.argsort(x)
    nondecreasing = bool(np.all(np.diff(y[order]) >= 0))
    return QuadraticFit(c, float(ratio.min()), float(ratio.max()), nondecreasing, len(pts))


# ---------------------------------------------------------------------------
# covariance, bracket and isometry checks


@dataclass(frozen=True)
class CovCheck:
    rel_error: float
    C_hat: np.ndarray
    low_power: bool
    degenerate: bool


def covariance_check(errors, N: int, limit: np.ndarray) -> CovCheck:
    """Frobenius relative error of cov(sqrt(N) errors) against ``limit``."""
    errors = np.asarray(errors, dtype=float)
    if errors.ndim != 2 or errors.shape[0] < 2:
        raise ValueError("covariance_check needs at least two replicates")
    C = np.cov(math.sqrt(N) * errors, rowvar=False, ddof=1)
    C = np.atleast_2d(C)
    limit = np.asarray(limit, float)
    rel = float(np.linalg.norm(C - limit) / np.linalg.norm(limit))
    return CovCheck(rel_error=rel, C_hat=C, low_power=errors.shape[0] < 50,
                    degenerate=bool(np.all(C == 0)))


def bracket_convergence(S_by_n: dict, L: np.ndarray) -> list[dict]:
    """Per-generation distribution of ||S_n / |T_n| - L||_F across replicates."""
    rows = []
    Lnorm = float(np.linalg.norm(L))
    for n in sorted(S_by_n):
        S = np.asarray(S_by_n[n], dtype=float)
        dev = np.linalg.norm(S / subtree_size(n) - L, axis=(-2, -1))
        q10, med, q90 = np.quantile(dev, [0.1, 0.5, 0.9])
        rows.append({"n": int(n), "median": float(med), "q10": float(q10), "q90": float(q90),
                     "rel_median": float(med / Lnorm)})
    return rows


def martingale_isometry(M: np.ndarray, brackets: np.ndarray) -> dict:
    """Compare mean(M M^t) with mean(<M>) entrywise.

    Entry (i, j) is scaled by sqrt(B_ii B_jj) of the mean bracket ``B``, a
    correlation-type normalization that stays meaningful for small
    off-diagonal entries.
    """
    M = np.asarray(M, float)
    E_MM = np.einsum("ri,rj->ij", M, M) / M.shape[0]
    B = np.asarray(brackets, float).mean(axis=0)
    d = np.sqrt(np.diag(B))
    rel = np.abs(E_MM - B) / np.outer(d, d)
    return {"max_rel": float(rel.max()), "rel": rel, "E_MM": E_MM, "E_bracket": B}
