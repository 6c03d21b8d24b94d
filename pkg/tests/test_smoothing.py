import math

import numpy as np
import pytest
from scipy import integrate

from steinentropy import rng
from steinentropy.chaos import ChaosElement, ChaoticVector, sample_batch
from steinentropy.errors import UnreliableRegionError
from steinentropy.malliavin import stein_coupling_exact
from steinentropy.smoothing import (BinnedMixture1D, conditional_dual_check, density_route_rows, kernel_sums_direct,
                                    make_interpolation, score_density_route, score_stein_route, shift_decay_probe,
                                    smoothed_density, weighted_rms_gap)

H = ChaosElement.hermite
F2 = H(2, 1, 1) / math.sqrt(2)


def _phi(x, var=1.0):
    return np.exp(-0.5 * x * x / var) / math.sqrt(2 * math.pi * var)


@pytest.fixture(scope="module")
def h2_setup():
    vec = ChaoticVector([F2])
    b = sample_batch(vec, 100_000, 21)
    T = stein_coupling_exact(vec).evaluate(b.gaussians)
    base = make_interpolation(b.f_matrix(1), 0.0, 1.0, seed=21, B=1.0)
    return base, T


@pytest.fixture(scope="module")
def gauss_setup():
    f = rng.gaussian_rows(2, rng.STREAM_CHAOS, 100_000, 1)
    return make_interpolation(f, 0.0, 1.0, seed=2, B=1.0)


# interpolation point ---------------------------------------------------------

def test_interpolation_recomputes_exactly(h2_setup):
    base, _ = h2_setup
    p = base.at(0.37)
    np.testing.assert_array_equal(p.combined, math.sqrt(0.37) * p.f_samples + math.sqrt(0.63) * p.z_samples)
    assert not p.f_samples.flags.writeable
    np.testing.assert_allclose(p.gamma_t, 0.37 * p.B + 0.63 * p.C)


def test_noise_stream_independent_of_chaos_stream():
    f = rng.gaussian_rows(9, rng.STREAM_CHAOS, 1000, 1)
    p = make_interpolation(f, 0.5, 1.0, seed=9)
    assert abs(np.corrcoef(p.f_samples[:, 0], p.z_samples[:, 0])[0, 1]) < 0.1
    assert not np.array_equal(p.f_samples, p.z_samples)


# density ---------------------------------------------------------------------

def test_density_gaussian_fixed_point(gauss_setup):
    p = gauss_setup.at(0.6)
    x = np.array([-1.5, 0.0, 0.7, 2.0])
    f, se = smoothed_density(p, x)
    assert np.all(np.abs(f - _phi(x)) <= 5 * se)


def test_density_t0_exact():
    f = np.random.default_rng(0).uniform(-3, 3, (500, 2))
    C = np.array([[2.0, 0.3], [0.3, 1.0]])
    p = make_interpolation(f, 0.0, C, seed=0)
    x = np.array([[0.5, -0.2]])
    dens, se = smoothed_density(p, x)
    prec = np.linalg.inv(C)
    exact = math.exp(-0.5 * x[0] @ prec @ x[0]) / (2 * math.pi * math.sqrt(np.linalg.det(C)))
    assert dens[0] == pytest.approx(exact, rel=1e-14) and se[0] == 0.0


def test_density_h2_matches_quadrature_oracle(h2_setup):
    base, _ = h2_setup
    t = 0.99
    p = base.at(t)
    s = math.sqrt(1 - t)
    g = np.linspace(-12, 12, 1_000_001)
    fz = (g * g - 1) / math.sqrt(2)
    oracle = integrate.trapezoid(_phi(g) * _phi((0.0 - math.sqrt(t) * fz) / s) / s, g)
    f, se = smoothed_density(p, [0.0])
    assert abs(f[0] - oracle) <= 3 * se[0]


def test_density_rejects_t1(h2_setup):
    with pytest.raises(ValueError):
        smoothed_density(h2_setup[0].at(1.0), [0.0])


def test_binned_mixture_matches_direct_sums():
    gen = np.random.default_rng(1)
    c = gen.standard_normal(5000)
    x = np.linspace(-3, 3, 41)
    s = 0.2
    direct = kernel_sums_direct(c[:, None], np.array([[s * s]]), x[:, None])
    binned = BinnedMixture1D(c, s).sums(x)
    np.testing.assert_allclose(binned.s0, direct.s0, rtol=5e-4, atol=1e-8)


# scores ----------------------------------------------------------------------

def test_density_score_gaussian(gauss_setup):
    p = gauss_setup.at(0.5)
    x = np.array([-1.0, 0.0, 1.2])
    est = score_density_route(p, x)
    assert np.all(np.abs(est.value[:, 0] + x) <= 5 * est.se[:, 0] + 0.02)


def test_density_score_multivariate_gaussian():
    C = np.array([[1.5, 0.4], [0.4, 0.8]])
    g = rng.gaussian_rows(3, rng.STREAM_CHAOS, 40_000, 2) @ np.linalg.cholesky(C).T
    p = make_interpolation(g, 0.5, C, seed=3, B=C)
    x = np.array([[0.3, -0.2], [-0.5, 0.4]])
    est = score_density_route(p, x)
    np.testing.assert_allclose(est.value, -x @ np.linalg.inv(C), atol=0.08)


def test_density_score_symmetric_law_is_odd():
    e = H(3, 1, 1) / math.sqrt(6)
    b = sample_batch(e, 100_000, 4)
    p = make_interpolation(b.f_matrix(1), 0.5, 1.0, seed=4, B=1.0)
    est = score_density_route(p, [0.0])
    assert abs(est.value[0, 0]) <= 5 * est.se[0, 0] + 0.01


def test_density_score_rejects_tail(gauss_setup):
    with pytest.raises(UnreliableRegionError):
        score_density_route(gauss_setup.at(0.99), [12.0])


def test_stein_route_gaussian_is_linear(gauss_setup):
    p = gauss_setup.at(0.6)
    T = np.ones((p.m, 1, 1))
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(score_stein_route(p, T, x)[:, 0], -x, atol=1e-12)


def test_stein_route_small_t_limit(h2_setup):
    base, T = h2_setup
    x = np.linspace(-1, 2, 7)
    rho = score_stein_route(base.at(1e-6), T, x)[:, 0]
    np.testing.assert_allclose(rho, -x, atol=1e-3)


@pytest.mark.parametrize("t", [0.3, 0.5, 0.8])
def test_route_agreement(h2_setup, t):
    base, T = h2_setup
    rms, frac = weighted_rms_gap(base.at(t), T)
    assert rms < 0.05 and frac > 0.9


def test_route_agreement_tolerance_schedule():
    # tolerance 0.05 at m = 1e5, shrinking like m^{-1/5}
    vec = ChaoticVector([F2])
    for m in (10_000, 30_000, 100_000):
        b = sample_batch(vec, m, 31)
        T = stein_coupling_exact(vec).evaluate(b.gaussians)
        p = make_interpolation(b.f_matrix(1), 0.5, 1.0, seed=31, B=1.0)
        assert weighted_rms_gap(p, T)[0] < 0.05 * (m / 1e5) ** -0.2


@pytest.mark.parametrize("route", ["density", "stein"])
def test_score_characterization_and_centering(h2_setup, route):
    base, T = h2_setup
    p = base.at(0.5)
    idx = np.arange(20_000)
    y = p.combined[idx, 0]
    if route == "density":
        rho = density_route_rows(p, idx).rho[:, 0]
    else:
        rho = score_stein_route(p, T, y)[:, 0]
    n = rho.size
    for g, gp in ((lambda v: v, lambda v: np.ones_like(v)), (np.tanh, lambda v: 1 - np.tanh(v) ** 2)):
        diff = rho * g(y) + gp(y)
        assert abs(diff.mean()) <= 5 * diff.std(ddof=1) / math.sqrt(n)
    assert abs(rho.mean()) <= 5 * rho.std(ddof=1) / math.sqrt(n)


# duality check and shift probe ------------------------------------------------

def test_dual_check_independent():
    g = rng.gaussian_rows(5, rng.STREAM_CHAOS, 20_000, 2)
    lhs, rhs, gap = conditional_dual_check(g[:, 0], g[:, 1])
    assert lhs < 0.05 and rhs < 0.05


def test_dual_check_sign():
    y = rng.gaussian_rows(6, rng.STREAM_CHAOS, 20_000, 1)[:, 0]
    lhs, rhs, gap = conditional_dual_check(np.sign(y), y)
    assert lhs == pytest.approx(1.0, abs=0.02)
    assert 0.8 < rhs <= 1.0 and gap >= -0.01


def test_dual_check_identity():
    y = rng.gaussian_rows(7, rng.STREAM_CHAOS, 50_000, 1)[:, 0]
    lhs, _, _ = conditional_dual_check(y, y)
    assert lhs == pytest.approx(math.sqrt(2 / math.pi), abs=0.01)


def test_shift_decay_probe_reports_fit(h2_setup):
    base, T = h2_setup
    out = shift_decay_probe(base, T, [0.5, 0.7, 0.9, 0.97])
    assert np.all(out["value"] > 0) and out["c"] > 0 and np.isfinite(out["delta"])


def test_dual_check_dictionary_growth():
    # dictionaries are nested (counter-based rows), so the lower bound can only grow
    y = rng.gaussian_rows(8, rng.STREAM_CHAOS, 20_000, 1)[:, 0]
    x = np.sign(y)
    rhs = [conditional_dual_check(x, y, n_funcs=n, k=200)[1] for n in (8, 64, 256)]
    assert rhs[0] <= rhs[1] <= rhs[2] <= 1.0
