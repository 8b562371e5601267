import math

import numpy as np
import pytest
from scipy import stats

from bartree import build_model, compute_limits, estimate, make_noise, simulate
from bartree import verify as V
from bartree.rng import replicate_seed
from bartree.tree import subtree_size


def test_empirical_tail_examples():
    assert V.empirical_tail(np.zeros(10), [0.1])[0]["p_hat"] == 0
    row = V.empirical_tail([1.0, 2.0, 3.0], [1.5])[0]
    assert row["p_hat"] == pytest.approx(2 / 3) and row["count"] == 2
    u = np.random.default_rng(0).uniform(size=10**4)
    assert abs(V.empirical_tail(u, [0.5])[0]["p_hat"] - 0.5) < 0.015
    with pytest.raises(ValueError):
        V.empirical_tail([], [0.1])


def test_tail_table_invariants():
    x = np.random.default_rng(1).exponential(size=500)
    rows = V.empirical_tail(x, np.linspace(0, 6, 25))
    ps = [r["p_hat"] for r in rows]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    for r in rows:
        assert 0 <= r["ci_lo"] <= r["p_hat"] <= r["ci_hi"] <= 1


def test_wilson_reference_value():
    # 7 successes in 20 trials, score interval worked from the closed form
    lo, hi = V.wilson_interval(7, 20)
    z = 1.959963984540054
    p, n = 0.35, 20
    c = (p + z * z / (2 * n)) / (1 + z * z / n)
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    assert (lo, hi) == pytest.approx((c - h, c + h), abs=1e-15)
    assert V.wilson_interval(0, 50)[0] == 0.0


def test_regimes():
    assert V.regime_for(1, 0.4) == "sub"
    assert V.regime_for(1, 0.5) == "critical"
    assert V.regime_for(1, 0.50005) == "critical"
    assert V.regime_for(1, 0.6) == "super"
    assert V.regime_for(2, 0.6) == "sub"
    assert V.regime_for(2, 0.7071) == "critical"
    assert V.regime_for(2, 0.8) == "super"
    with pytest.raises(ValueError):
        V.regime_for(3, 0.4)


def _params(case, regime, c4=None, **kw):
    base = {"c1": 1.0, "c2": 1.0, "c3": 1.0, "b": 1.0}
    base.update(kw)
    return V.EnvelopeParams(case=case, regime=regime, c4=c4, **base)


def test_envelope_hand_value():
    bound = V.envelope(_params(1, "sub"), 11, 1.0, beta=0.4)
    assert bound == pytest.approx(math.exp(-10.24), rel=1e-14)


def test_envelope_branches_literal():
    n, d, beta = 9.0, 0.7, 0.6
    u = d
    for case, regime, beta, want in [
        (1, "sub", 0.3, math.exp(-u * u / (1 + u) * 2**n / (n - 1) ** 2)),
        (1, "critical", 0.5, (n - 1) * math.exp(-u * u / (1 + u) * 2**n / (n - 1) ** 2)),
        (1, "super", 0.6, (n - 1) * math.exp(-u * u / (1 + u) / ((n - 1) * 0.6**n))),
        (2, "sub", 0.6, math.exp(-u * u / (1 + 2 * u) * 2**n / (n - 1) ** 2)),
        (2, "critical", math.sqrt(0.5), math.exp(-u * u / (1 + 2 * u) * 2**n / (n - 1) ** 3)),
        (2, "super", 0.8, math.exp(-u * u / (1 + 2 * u) / ((n - 1) ** 2 * 0.8 ** (2 * n)))),
    ]:
        p = _params(case, regime, c4=2.0 if case == 2 else None)
        assert V.envelope(p, n, d, beta=beta) == pytest.approx(want, rel=1e-12)


def test_envelope_monotone_and_origin():
    vals = [V.envelope(_params(1, "sub", c2=c2), 8, 0.5) for c2 in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert V.envelope(_params(1, "sub", c1=1.3), 8, 0.0) == 1.3


def test_envelope_regime_mismatch():
    with pytest.raises(ValueError):
        V.envelope(_params(1, "sub"), 8, 0.5, beta=0.7)


def test_envelope_params_validation():
    with pytest.raises(ValueError):
        _params(1, "sub", c4=1.0)
    with pytest.raises(ValueError):
        _params(2, "sub", c4=0.0, c3=0.0)
    with pytest.raises(ValueError):
        _params(2, "sub")
    with pytest.raises(ValueError):
        _params(1, "lukewarm")


def test_decay_slope_synthetic():
    ns = np.arange(6, 12)
    s, _ = V.decay_scale(1, "sub", ns)
    fit = V.fit_decay_slope(ns, np.exp(-s))
    assert fit.slope == pytest.approx(1.0, abs=1e-12) and fit.positive
    noise = np.random.default_rng(2).normal(scale=0.01, size=ns.size)
    assert V.fit_decay_slope(ns, np.exp(-2 * s + noise)).slope == pytest.approx(2.0, abs=0.05)
    flat = V.fit_decay_slope(ns, np.full(ns.size, 0.2) * (1 + 0.01 * noise))
    assert abs(flat.slope) < 0.01 and flat.violation
    with pytest.raises(V.VacuousTail):
        V.fit_decay_slope(ns, np.zeros(ns.size))


def test_envelope_fit_dominates_synthetic():
    rows = []
    for n in range(6, 12):
        s = 2.0**n / (n - 1) ** 2
        for d in (0.3, 0.5):
            p = min(1.0, 0.8 * math.exp(-1.5 * d * d / (0.5 + d) * s))
            count = round(p * 10**4)
            lo, hi = V.wilson_interval(count, 10**4)
            rows.append({"n": n, "delta": d, "p_hat": count / 10**4, "ci_lo": lo, "ci_hi": hi})
    params = V.fit_envelope(rows, 1, 0.4, Sigma_norm=2.0)
    assert params.regime == "sub"
    assert V.envelope_dominance(params, rows, 0.4) == []


def test_scale_examples():
    v = V.scale_admissible(V.ScaleSpec(0.25, 1, 0.4))
    assert v.passed and v.regime == "beta<1/2"
    v = V.scale_admissible(V.ScaleSpec(0.25, 1, 0.8))
    assert not v.passed and v.threshold == pytest.approx(0.161, abs=5e-4)
    assert V.scale_admissible(V.ScaleSpec(0.10, 1, 0.8)).passed
    with pytest.raises(ValueError):
        V.ScaleSpec(0.5, 1, 0.4)
    with pytest.raises(ValueError):
        V.ScaleSpec(0.2, 3, 0.4)


def test_mdp_zero_stat_censored():
    rows = V.mdp_rate_curve(np.zeros(100), 1023, 0.25, [0.1, 0.5])
    assert all(r["censored"] for r in rows)
    assert rows[0]["R_hat"] == pytest.approx(math.log(100) / 1023**0.5)


def test_mdp_censoring_iff_zero_count():
    x = np.random.default_rng(3).normal(size=300) / 30
    rows = V.mdp_rate_curve(x, 1023, 0.25, np.linspace(0.01, 0.5, 30))
    assert all(r["censored"] == (r["count"] == 0) for r in rows)


def test_mdp_gaussian_oracle():
    # stat ~ N(0, v/N): R_hat(x) matches the exact normal tail, which tends to x^2/(2v)
    v, N, alpha, R = 2.0, 4095, 0.2, 10**5
    stat = np.random.default_rng(4).normal(scale=math.sqrt(v / N), size=R)
    b = N**alpha
    for r in V.mdp_rate_curve(stat, N, alpha, [0.3, 0.5, 0.7]):
        exact = -math.log(2 * stats.norm.sf(r["x"] * b / math.sqrt(v))) / b**2
        assert r["R_hat"] == pytest.approx(exact, rel=0.05)
    for big in (1e2, 1e4, 1e6):
        exact = -stats.norm.logsf(0.5 * big / math.sqrt(v)) / big**2
        assert exact <= 0.25 / (2 * v) + 2 * math.log(big) / big**2
    assert -stats.norm.logsf(0.5e6 / math.sqrt(v)) / 1e12 == pytest.approx(0.25 / (2 * v), rel=1e-6)


def test_quadratic_fit():
    xs = np.linspace(0.1, 1.0, 10)
    rows = [{"x": x, "R_hat": 0.7 * x * x, "censored": False} for x in xs]
    q = V.fit_quadratic_rate(rows)
    assert q.c == pytest.approx(0.7) and q.within_factor_two and q.nondecreasing
    rows[3]["R_hat"] = 10.0
    assert not V.fit_quadratic_rate(rows).nondecreasing


def test_covariance_check_cases():
    rng = np.random.default_rng(5)
    limit = np.array([[2.0, 0.5], [0.5, 1.0]])
    N = 1000
    errors = rng.multivariate_normal(np.zeros(2), limit / N, size=10**4)
    assert V.covariance_check(errors, N, limit).rel_error < 0.05
    assert V.covariance_check(errors[:2], N, limit).low_power
    zero = V.covariance_check(np.zeros((50, 2)), N, limit)
    assert zero.degenerate and zero.rel_error == 1.0
    with pytest.raises(ValueError):
        V.covariance_check(errors[:1], N, limit)


def test_bracket_zero_noise():
    from bartree.estimate import s_matrix

    # p = 1: S_n sums over all of T_n, so S_n / |T_n| = e1 e1^t exactly
    t = simulate(build_model(1, [0.0, 0.5], [0.0, 0.5]), None, 10)
    rows = V.bracket_convergence({n: s_matrix(t, n)[None] for n in range(2, 11)}, np.diag([1.0, 0.0]))
    assert all(r["median"] == 0.0 for r in rows)
    # p = 2: the root is left out, giving a deviation of exactly 1 / |T_n|
    t = simulate(build_model(2, [0.0, 0.3, 0.1], [0.0, 0.2, 0.1]), None, 10)
    rows = V.bracket_convergence({n: s_matrix(t, n)[None] for n in range(2, 11)}, np.diag([1.0, 0.0, 0.0]))
    for r in rows:
        assert r["median"] == pytest.approx(1 / subtree_size(r["n"]), rel=1e-12)


def test_single_replicate_matches_direct(ref_model, ref_noise):
    reps = V.run_replicates(ref_model, ref_noise, [7], 1, master_seed=3)
    t = simulate(ref_model, ref_noise, 7, seed=replicate_seed(3, 0))
    res = estimate(t, 7, ref_noise.Gamma)
    assert np.array_equal(reps.theta_hat[0, 0], res.theta_hat)
    assert reps.sigma2_hat[0, 0] == res.sigma2_hat and reps.rho_bar[0, 0] == res.rho_bar


def test_parallel_is_deterministic(ref_model, ref_noise):
    a = V.run_replicates(ref_model, ref_noise, [5, 6], 24, master_seed=4, workers=1)
    b = V.run_replicates(ref_model, ref_noise, [5, 6], 24, master_seed=4, workers=3)
    for name in ("theta_hat", "sigma2_hat", "rho_hat", "M", "S_prev", "S_cur"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_mean_theta_clt_oracle(ref_model, ref_noise):
    R, n = 200, 10
    reps = V.run_replicates(ref_model, ref_noise, [n], R, master_seed=5, with_s=False)
    cov = compute_limits(ref_model, ref_noise).asymp_cov
    radius = 3 * math.sqrt(np.trace(cov) / subtree_size(n - 1) / R)
    assert np.linalg.norm(reps.theta_hat[:, 0].mean(axis=0) - ref_model.theta_vec) < radius


def test_singular_replicates_recorded():
    m = build_model(1, [0.0, 0.5], [0.0, 0.5])
    nz = make_noise("gaussian_pair", 1.0)
    reps = V.run_replicates(m, nz, [1], 3, master_seed=0)
    assert reps.R == 0 and reps.failed == [0, 1, 2]


def test_replicate_preconditions(ref_noise):
    m = build_model(1, [0.0, 1.5], [0.0, 0.5], allow_nonstable=True)
    with pytest.raises(ValueError):
        V.run_replicates(m, ref_noise, [5], 2, 0)
    with pytest.raises(ValueError):
        V.run_replicates(build_model(1, [0, 0.1], [0, 0.1]), ref_noise, [5], 0, 0)


def test_isometry_on_exact_draws():
    rng = np.random.default_rng(6)
    B = np.array([[2.0, 0.3], [0.3, 1.0]])
    M = rng.multivariate_normal(np.zeros(2), B, size=20000)
    out = V.martingale_isometry(M, np.repeat(B[None], 20000, axis=0))
    assert out["max_rel"] < 0.05
