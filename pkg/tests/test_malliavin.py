import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steinentropy import rng
from steinentropy.chaos import ChaosElement, ChaoticVector, evaluate_chaos, exact_moment, random_chaos, sample_batch
from steinentropy.errors import DegenerateSampleError, SampleSizeError
from steinentropy.malliavin import (apply_L, apply_L_inverse, apply_ou_semigroup, expected_det_gamma, gamma_matrix,
                                    ibp_difference_variance, integration_by_parts_exact, integration_by_parts_sides,
                                    malliavin_derivative, stein_coupling_exact, stein_matrix_regress)

H = ChaosElement.hermite
F2 = H(2, 1, 1) / math.sqrt(2)


# derivative ------------------------------------------------------------------

def test_derivative_examples():
    g = malliavin_derivative(H(1, 1, 3))
    assert g.components[0].allclose(ChaosElement.constant(1.0, 3))
    assert all(c.allclose(ChaosElement.zero(3)) for c in g.components[1:])
    g2 = malliavin_derivative(H(2, 1, 2))
    assert g2.components[0].allclose(2 * H(1, 1, 2))
    assert malliavin_derivative(ChaosElement.constant(4.0, 2)).components[1].allclose(ChaosElement.zero(2))


def test_derivative_lowers_pure_order():
    e = random_chaos(3, 3, 5, np.random.default_rng(1))
    for comp in malliavin_derivative(e).components:
        assert comp.max_order <= 2
        assert not comp.coeffs or comp.is_pure(2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bd=st.integers(1, 4), q=st.integers(1, 4))
def test_derivative_vs_finite_differences(seed, bd, q):
    gen = np.random.default_rng(seed)
    e = random_chaos(list(range(1, q + 1)), bd, 5, gen)
    x = gen.standard_normal((4, bd))
    g = malliavin_derivative(e).evaluate(x)
    h = 1e-5
    for k in range(bd):
        step = np.zeros(bd)
        step[k] = h
        num = (evaluate_chaos(e, x + step) - evaluate_chaos(e, x - step)) / (2 * h)
        assert np.all(np.abs(num - g[:, k]) <= 1e-5 * np.maximum(1.0, np.abs(g[:, k])))


# OU semigroup and generator --------------------------------------------------

def test_semigroup_examples():
    e = random_chaos([0, 1, 2], 2, 6, np.random.default_rng(2))
    assert apply_ou_semigroup(e, 0.0) == e
    pure = random_chaos(2, 3, 4, np.random.default_rng(3))
    assert apply_ou_semigroup(pure, 0.5).allclose(pure * math.exp(-1.0), atol=1e-15)
    far = apply_ou_semigroup(e, 60.0)
    assert far.allclose(ChaosElement.constant(e.mean, 2), atol=1e-20)


def test_semigroup_rejects_negative_time():
    with pytest.raises(ValueError):
        apply_ou_semigroup(H(1, 1, 1), -0.1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(0, 3), t=st.floats(0, 3))
def test_semigroup_law(seed, s, t):
    e = random_chaos([0, 1, 2, 3, 4], 3, 6, np.random.default_rng(seed))
    lhs = apply_ou_semigroup(apply_ou_semigroup(e, t), s)
    assert lhs.allclose(apply_ou_semigroup(e, s + t), atol=1e-15 * max(1.0, max(map(abs, e.coeffs.values()))))


def test_mehler_formula():
    gen = np.random.default_rng(8)
    e = random_chaos([1, 2, 3], 2, 5, gen)
    t = 0.7
    g = np.array([0.4, -1.1])
    gp = rng.gaussian_rows(3, rng.STREAM_OU_COPY, 200_000, 2)
    vals = evaluate_chaos(e, math.exp(-t) * g + math.sqrt(1 - math.exp(-2 * t)) * gp)
    exact = evaluate_chaos(apply_ou_semigroup(e, t), g)
    assert abs(vals.mean() - exact) <= 5 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_L_inverse_examples():
    pure = H(2, 1, 1)
    assert apply_L_inverse(pure).allclose(-pure / 2)
    mixed = H(1, 1, 1) + H(3, 1, 1)
    assert apply_L_inverse(mixed).allclose(-H(1, 1, 1) - H(3, 1, 1) / 3)
    with pytest.raises(ValueError):
        apply_L_inverse(mixed + 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bd=st.integers(1, 4))
def test_L_of_L_inverse(seed, bd):
    e = random_chaos([1, 2, 3, 4], bd, 6, np.random.default_rng(seed))
    assert apply_L(apply_L_inverse(e)).allclose(e, atol=1e-15)


# Malliavin matrix and Stein coupling -----------------------------------------

def test_gamma_examples():
    assert gamma_matrix(ChaoticVector([H(1, 1, 1)]))[0, 0].allclose(ChaosElement.constant(1.0, 1))
    g = gamma_matrix(ChaoticVector([F2]))[0, 0]
    assert g.allclose(2.0 + 2 * H(2, 1, 1))
    gi = gamma_matrix(ChaoticVector([H(1, 1, 2), H(1, 2, 2)]))
    np.testing.assert_allclose(gi.mean(), np.eye(2))
    assert gi[0, 1].allclose(ChaosElement.zero(2))


def test_coupling_examples():
    assert stein_coupling_exact(ChaoticVector([H(1, 1, 1)]))[0, 0].allclose(ChaosElement.constant(1.0, 1))
    t = stein_coupling_exact(ChaoticVector([F2]))[0, 0]
    assert t.allclose(1.0 + math.sqrt(2) * F2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 3))
def test_coupling_mean_is_covariance(seed, d):
    gen = np.random.default_rng(seed)
    qs = sorted(int(gen.integers(1, 4)) for _ in range(d))
    vec = ChaoticVector([random_chaos(q, 4, 3, gen) for q in qs], orders=qs)
    np.testing.assert_allclose(stein_coupling_exact(vec).mean(), vec.covariance, atol=1e-12)


def test_coupling_rejects_uncentered():
    with pytest.raises(ValueError):
        stein_coupling_exact(ChaoticVector([H(1, 1, 1) + 1.0], orders=[None]))


# integration by parts --------------------------------------------------------

@pytest.mark.parametrize("power", [1, 2, 3])
def test_ibp_exact(power):
    e = random_chaos([1, 2, 3], 2, 5, np.random.default_rng(power))
    lhs, rhs = integration_by_parts_exact(e, power)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


def test_ibp_monte_carlo_sin():
    e = random_chaos([2], 3, 4, np.random.default_rng(12))
    b = sample_batch(e, 100_000, 4)
    lhs, rhs, se = integration_by_parts_sides(e, np.sin, np.cos, b)
    assert abs(lhs - rhs) <= 5 * se


def test_ibp_difference_variance_matches_quadrature():
    g, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / math.sqrt(2 * math.pi)
    f = (g * g - 1) / math.sqrt(2)
    tau = 1 + math.sqrt(2) * f
    diff = f ** 3 - 2 * tau * f
    var = np.sum(w * diff ** 2) - np.sum(w * diff) ** 2
    assert ibp_difference_variance(F2, 2) == pytest.approx(var, rel=1e-10)


def test_hypercontractivity_ratio_bounded():
    gen = np.random.default_rng(77)
    for q in (1, 2, 3, 4):
        ratios = []
        for _ in range(50):
            e = random_chaos(q, 4, int(gen.integers(1, 5)), gen)
            ratios.append(exact_moment([e] * 4) ** 0.25 / exact_moment([e, e]) ** 0.5)
        # (p-1)^{q/2} with p = 4 bounds the L4/L2 ratio on the q-th chaos
        assert max(ratios) <= 3 ** (q / 2) + 1e-9


# regression estimator --------------------------------------------------------

def test_regress_tracks_exact_coupling():
    vec = ChaoticVector([F2])
    b = sample_batch(vec, 100_000, 3)
    T = stein_coupling_exact(vec).evaluate(b.gaussians)
    est = stein_matrix_regress(b, T)
    # RMS under the law of F restricted to |x| <= 2
    f = b["F1"][:20_000]
    x = f[np.abs(f) <= 2]
    fitted = est.evaluate(x)[:, 0, 0]
    assert math.sqrt(np.mean((fitted - (1 + math.sqrt(2) * x)) ** 2)) <= 0.1
    se = est.fit_meta["fitted_mean_se"][0, 0]
    assert abs(est.fit_meta["fitted_mean"][0, 0] - 1.0) <= 5 * se + 1e-3


def test_regress_gaussian_constant():
    vec = ChaoticVector([H(1, 1, 2), H(1, 2, 2)])
    b = sample_batch(vec, 5000, 1)
    T = np.broadcast_to(np.array([[2.0, 0.5], [0.5, 1.0]]), (5000, 2, 2))
    est = stein_matrix_regress(b, T)
    np.testing.assert_allclose(est.evaluate(np.zeros((3, 2))), np.broadcast_to(T[0], (3, 2, 2)), atol=1e-12)


def test_regress_errors():
    vec = ChaoticVector([F2])
    with pytest.raises(SampleSizeError):
        stein_matrix_regress(sample_batch(vec, 500, 0), np.ones(500))
    const = ChaoticVector([ChaosElement.constant(0.0, 1)], orders=[None])
    with pytest.raises(DegenerateSampleError):
        stein_matrix_regress(sample_batch(const, 2000, 0), np.ones(2000))


# det Gamma --------------------------------------------------------------------

def test_expected_det_gamma_examples():
    b1 = sample_batch(H(1, 1, 1), 10_000, 0)
    est, se, verdict = expected_det_gamma(ChaoticVector([H(1, 1, 1)]), b1)
    assert est == pytest.approx(1.0) and se == 0.0 and verdict == "density exists"
    vec = ChaoticVector([F2])
    est, se, verdict = expected_det_gamma(vec, sample_batch(vec, 100_000, 1))
    assert abs(est - 2.0) <= 5 * se and verdict == "density exists"
    assert expected_det_gamma(vec, exact=True)[0] == pytest.approx(2.0)
    deg = ChaoticVector([H(1, 1, 1), H(1, 1, 1)])
    est, se, verdict = expected_det_gamma(deg, sample_batch(deg, 10_000, 2))
    assert abs(est) < 1e-12 and verdict == "inconclusive"


@pytest.mark.parametrize("elem", [H(3, 1, 1) / math.sqrt(6), ChaosElement.from_terms(2, {((1, 1), (2, 1)): 1.0})])
def test_regress_fitted_mean_reproduces_covariance(elem):
    vec = ChaoticVector([elem])
    b = sample_batch(vec, 100_000, 5)
    est = stein_matrix_regress(b, stein_coupling_exact(vec).evaluate(b.gaussians))
    se = est.fit_meta["fitted_mean_se"][0, 0]
    assert abs(est.fit_meta["fitted_mean"][0, 0] - vec.covariance[0, 0]) <= 5 * se
