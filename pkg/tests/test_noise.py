import numpy as np
import pytest

from bartree.noise import CalibrationError, NoiseModel, make_noise, sample_pair
from bartree.rng import generation_stream, init_stream, mix, replicate_seed

DRAWS = 10**6


def _draw(noise, seed=3, parents=None):
    parents = np.ones(DRAWS) if parents is None else parents
    return sample_pair(noise, parents, generation_stream(seed, 1))


def _assert_moments(noise, e, o, k=5.0):
    n = e.size
    checks = {
        "sigma2": 0.5 * (e * e + o * o),
        "rho": e * o,
        "tau4": 0.5 * (e**4 + o**4),
        "nu2": e * e * o * o,
    }
    for name, values in checks.items():
        target = noise.moments()[name]
        se = values.std() / np.sqrt(n)
        assert abs(values.mean() - target) < k * se, (name, values.mean(), target, se)


def test_gaussian_covariance_identity():
    e, o = _draw(make_noise("gaussian_pair", 1.0, 0.0))
    C = np.cov(np.vstack([e, o]))
    assert np.allclose(C, np.eye(2), atol=0.01)


def test_gaussian_sister_covariance():
    e, o = _draw(make_noise("gaussian_pair", 1.0, 0.5))
    assert abs(np.mean(e * o) - 0.5) < 0.01


def test_gaussian_moment_identities():
    nz = make_noise("gaussian_pair", 2.0, 0.6)
    assert nz.tau4 == 3 * 2.0**2
    assert nz.nu2 == pytest.approx(2.0**2 + 2 * 0.6**2)
    assert np.array_equal(nz.Gamma, [[2.0, 0.6], [0.6, 2.0]])


@pytest.mark.parametrize(
    "family, kwargs",
    [
        ("gaussian_pair", {}),
        ("bounded_pair", {}),
        ("bounded_pair", {"bound": 2.0}),
        ("skew_switching_pair", {}),
        ("skew_switching_pair", {"tau4": 5.0, "skew": 0.5}),
    ],
)
def test_moment_calibration(family, kwargs):
    nz = make_noise(family, 1.3, 0.4, **kwargs)
    parents = np.where(np.arange(DRAWS) % 3 == 0, -1.0, 1.0)
    e, o = _draw(nz, parents=parents)
    _assert_moments(nz, e, o)


def test_bounded_support():
    nz = make_noise("bounded_pair", 1.0, 0.3, bound=2.0)
    e, o = _draw(nz)
    lim = 2.0 * nz._calib["scale"]
    assert np.abs(e).max() <= lim and np.abs(o).max() <= lim


def test_skew_flips_with_parent_sign():
    nz = make_noise("skew_switching_pair", 1.0, 0.2)
    ep, _ = _draw(nz, parents=np.ones(DRAWS))
    en, _ = _draw(nz, parents=-np.ones(DRAWS))
    skew = lambda x: np.mean(x**3)
    assert skew(ep) > 0.5 and skew(en) < -0.5
    # second moments do not depend on the parent
    assert abs(np.mean(ep**2) - np.mean(en**2)) < 0.02
    assert not nz.iid


@pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
def test_degenerate_rho_rejected(rho):
    with pytest.raises(ValueError):
        make_noise("gaussian_pair", 1.0, rho)


def test_invalid_moments_rejected():
    with pytest.raises(ValueError):
        NoiseModel("gaussian_pair", 1.0, 0.0, tau4=0.5, nu2=0.2)
    with pytest.raises(ValueError):
        NoiseModel("gaussian_pair", 1.0, 0.5, tau4=3.0, nu2=0.2)
    with pytest.raises(ValueError):
        make_noise("laplace_pair", 1.0)
    with pytest.raises(ValueError):
        make_noise("gaussian_pair", 1.0, 0.0, bound=3.0)


def test_unreachable_correlation():
    with pytest.raises(CalibrationError):
        make_noise("bounded_pair", 1.0, 0.9999999999, bound=0.5)


def test_streams_are_reproducible():
    a = generation_stream(42, 3).standard_normal(5)
    b = generation_stream(42, 3).standard_normal(5)
    c = generation_stream(42, 4).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert not np.array_equal(init_stream(42).standard_normal(5), a)


def _splitmix64(x):
    m = 2**64 - 1
    z = x & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def test_mix_recipe():
    for seed, idx in [(0, 0), (1, 7), (2**64 - 1, 3), (12345, 2**40)]:
        expected = _splitmix64(seed + (idx + 1) * 0x9E3779B97F4A7C15)
        assert mix(seed, idx) == expected
    assert replicate_seed(9, 4) == mix(9, 4)
    assert len({mix(0, r) for r in range(10000)}) == 10000
