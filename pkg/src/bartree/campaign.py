"""The full Monte-Carlo verification campaign behind ``bartree montecarlo``."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import verify as V
from .config import RunConfig
from .limits import compute_limits
from .tree import subtree_size


@dataclass
class MonteCarloReport:
    report: dict
    tails: list
    rates: list
    cov: list

    @property
    def checks(self) -> list:
        return self.report["checks"]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def json_text(self) -> str:
        return json.dumps(self.report, indent=2, allow_nan=True) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "report.json": self.json_text(),
            "tails.csv": _csv(["n", "delta", "count", "R", "p_hat", "ci_lo", "ci_hi"], self.tails),
            "rates.csv": _csv(["stat", "x", "b_N", "p_hat", "R_hat", "censored", "I_theory"], self.rates),
            "cov.csv": _csv(["i", "j", "empirical", "theory"], self.cov),
        }
        paths = []
        for name, text in files.items():
            path = out / name
            path.write_text(text)
            paths.append(path)
        return paths


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _auto_deltas(norms: np.ndarray) -> list[float]:
    lo, hi = np.quantile(norms, [0.5, 0.99])
    return [float(v) for v in np.geomspace(lo, hi, 6)]


def _auto_xs(errors: np.ndarray, N: int, bN: float) -> list[float]:
    sd = float(np.std(math.sqrt(N) * errors))
    return [float(v) for v in np.linspace(1.0, 3.5, 8) * sd / bN]


def _check(name, passed, **detail) -> dict:
    return {"name": name, "passed": bool(passed), **detail}


def run_campaign(cfg: RunConfig) -> MonteCarloReport:
    model = cfg.build_model()
    noise = cfg.build_noise()
    exp = cfg.experiment
    case = cfg.case
    limits = compute_limits(model, noise)
    ns = exp.ns
    reps = V.run_replicates(model, noise, ns, exp.replicates, exp.master_seed,
                            workers=exp.workers, init=cfg.init)
    theta = model.theta_vec
    n_max = ns[-1]
    last = reps.at(n_max)
    N = subtree_size(n_max - 1)
    checks = []

    # per-replicate records at the deepest generation
    S_cur = reps.S_cur
    L = limits.L
    records = []
    for r in range(reps.R):
        dev = float(np.linalg.norm(S_cur[r, last] / subtree_size(n_max) - L))
        records.append({
            "seed": int(reps.seeds[r]),
            "theta_hat": reps.theta_hat[r, last].tolist(),
            "sigma2_hat": float(reps.sigma2_hat[r, last]),
            "rho_hat": float(reps.rho_hat[r, last]),
            "sigma2_bar": float(reps.sigma2_bar[r, last]),
            "rho_bar": float(reps.rho_bar[r, last]),
            "bracket_dev": dev,
        })

    # deviation tails of ||theta_hat - theta|| per generation
    norms = np.linalg.norm(reps.theta_hat - theta, axis=2)  # (R, k)
    deltas = list(exp.deltas) if exp.deltas else _auto_deltas(norms[:, 0])
    tails = []
    for i, n in enumerate(ns):
        for row in V.empirical_tail(norms[:, i], deltas):
            tails.append({"n": n, **row})
    mono = all(
        all(a["p_hat"] >= b["p_hat"] for a, b in zip(rows, rows[1:]))
        for rows in ([t for t in tails if t["n"] == n] for n in ns)
    )
    checks.append(_check("tail_monotone_in_delta", mono))
    checks.append(_check("tail_ci_contains_estimate",
                         all(t["ci_lo"] <= t["p_hat"] <= t["ci_hi"] for t in tails)))

    regime = V.regime_for(case, model.beta)
    slopes = []
    for d in deltas:
        ps = [t["p_hat"] for t in tails if t["delta"] == d]
        try:
            fit = V.fit_decay_slope(ns, ps, case, regime, model.beta)
            slopes.append({"delta": d, "vacuous": False, **fit.to_dict()})
        except V.VacuousTail:
            slopes.append({"delta": d, "vacuous": True})
    live = [s for s in slopes if not s["vacuous"]]
    if live:
        best = max(live, key=lambda s: (len(s["n_used"]), -s["delta"]))
        ok = all(s["slope"] > 0 for s in live) and best["positive"]
    else:
        ok = False
    checks.append(_check("decay_slope_positive", ok, fits=len(live)))

    envelope = None
    try:
        params = V.fit_envelope(tails, case, model.beta, limits.Sigma_norm)
        violations = V.envelope_dominance(params, tails, model.beta)
        envelope = {"params": params.to_dict(), "violations": violations}
        checks.append(_check("envelope_dominates", not violations))
    except V.VacuousTail:
        checks.append(_check("envelope_dominates", False, reason="vacuous tail table"))

    # moderate-deviation rate curves for the noise statistics
    bN = float(N) ** exp.alpha
    rates, rate_fits = [], {}
    stat_defs = {
        "sigma2_bar": (reps.sigma2_bar[:, last] - noise.sigma2, limits.rates.rate_sigma2,
                       limits.rates.sigma2_denom),
        "rho_bar": (reps.rho_bar[:, last] - noise.rho, limits.rates.rate_rho, limits.rates.rho_denom),
    }
    for name, (errs, rate, denom) in stat_defs.items():
        xs = list(exp.xs) if exp.xs else _auto_xs(errs, N, bN)
        rows = V.mdp_rate_curve(errs, N, exp.alpha, xs, rate)
        rates.extend({"stat": name, **r} for r in rows)
        qf = V.fit_quadratic_rate(rows)
        rate_fits[name] = {**qf.to_dict(), "c_theory": 1.0 / denom}
        if name == "sigma2_bar":
            rate_fits[name]["c_alt"] = 1.0 / (2.0 * denom)
        checks.append(_check(f"rate_{name}_nondecreasing", qf.nondecreasing))
        checks.append(_check(f"rate_{name}_quadratic_shape", qf.within_factor_two))

    # limit covariance of sqrt(N) (theta_hat - theta)
    cov_rows = []
    if reps.R >= 2:
        cc = V.covariance_check(reps.theta_hat[:, last] - theta, N, limits.asymp_cov)
        d = cc.C_hat.shape[0]
        for i in range(d):
            for j in range(d):
                cov_rows.append({"i": i, "j": j, "empirical": float(cc.C_hat[i, j]),
                                 "theory": float(limits.asymp_cov[i, j])})
        cov = {"rel_error": cc.rel_error, "low_power": cc.low_power, "degenerate": cc.degenerate}
        checks.append(_check("covariance_limit", cc.rel_error < exp.cov_tol and not cc.degenerate,
                             rel_error=cc.rel_error, tol=exp.cov_tol))
    else:
        cov = None

    bracket = V.bracket_convergence({n: S_cur[:, i] for i, n in enumerate(ns)}, L)
    meds = [b["median"] for b in bracket]
    checks.append(_check("bracket_median_decreasing", all(x > y for x, y in zip(meds, meds[1:]))))

    brackets = np.array([np.kron(noise.Gamma, S) for S in reps.S_prev[:, last]])
    iso = V.martingale_isometry(reps.M[:, last], brackets)
    checks.append(_check("martingale_isometry", iso["max_rel"] < exp.isometry_tol,
                         max_rel=iso["max_rel"], tol=exp.isometry_tol))

    verdict = V.scale_admissible(V.ScaleSpec(alpha=exp.alpha, case=case, beta=model.beta))
    checks.append(_check("scale_admissible", verdict.passed, regime=verdict.regime,
                         threshold=verdict.threshold))

    report = {
        "config": cfg.to_dict(),
        "case": case,
        "beta": model.beta,
        "regime": regime,
        "ns": list(ns),
        "N": N,
        "replicates": {"requested": exp.replicates, "used": reps.R, "singular": len(reps.failed),
                       "failed_indices": reps.failed},
        "noise_moments": noise.moments(),
        "limits": limits.to_dict(),
        "records": records,
        "tails": tails,
        "slopes": slopes,
        "envelope": envelope,
        "rates": rates,
        "rate_fits": rate_fits,
        "covariance": cov,
        "bracket": bracket,
        "isometry": {"max_rel": iso["max_rel"], "E_MM": iso["E_MM"].tolist(),
                     "E_bracket": iso["E_bracket"].tolist()},
        "scale": {"alpha": exp.alpha, "pass": verdict.passed, "regime": verdict.regime,
                  "threshold": verdict.threshold},
        "checks": checks,
    }
    return MonteCarloReport(report=report, tails=tails, rates=rates, cov=cov_rows)
