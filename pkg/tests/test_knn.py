import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from steinentropy.errors import DegenerateSampleError, SampleSizeError
from steinentropy.knn import KNNRegressor, default_k


def test_default_k():
    assert default_k(100_000, 1) == 10_000
    assert default_k(10, 4) == 4
    assert default_k(5, 1) == 4  # capped at m - 1


def _brute(x, y, q, k, exclude=None):
    out = []
    for i, qq in enumerate(q):
        dist = np.abs(x - qq)
        if exclude is not None:
            dist[exclude[i]] = np.inf
        idx = np.argsort(dist, kind="stable")[:k]
        out.append(y[idx].mean())
    return np.array(out)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 30))
def test_1d_window_matches_brute_force(seed, k):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal(200)
    y = gen.standard_normal(200)
    q = gen.standard_normal(25) * 1.5
    reg = KNNRegressor(x, y, k, scale=False)
    np.testing.assert_allclose(reg.predict(q), _brute(x, y, q, k), atol=1e-12)


def test_1d_leave_one_out():
    gen = np.random.default_rng(3)
    x = gen.standard_normal(300)
    y = x ** 2 + gen.standard_normal(300)
    reg = KNNRegressor(x, y, 7, scale=False)
    loo = reg.predict(x, loo=True)
    np.testing.assert_allclose(loo, _brute(x, y, x, 7, exclude=np.arange(300)), atol=1e-12)


def test_nd_matches_kdtree_mean():
    gen = np.random.default_rng(4)
    x = gen.standard_normal((500, 2))
    y = gen.standard_normal(500)
    q = gen.standard_normal((20, 2))
    reg = KNNRegressor(x, y, 9, scale=False)
    _, idx = cKDTree(x).query(q, k=9)
    np.testing.assert_allclose(reg.predict(q), y[idx].mean(axis=1), atol=1e-12)


@pytest.mark.parametrize("d", [1, 2])
def test_local_linear_reproduces_linear_functions(d):
    gen = np.random.default_rng(5)
    x = gen.standard_normal((2000, d))
    beta = np.arange(1, d + 1, dtype=float)
    y = 0.5 + x @ beta
    reg = KNNRegressor(x, y, 40)
    q = gen.standard_normal((50, d))
    np.testing.assert_allclose(reg.predict(q, degree=1), 0.5 + q @ beta, atol=1e-8)


def test_constant_response():
    x = np.random.default_rng(6).standard_normal(1000)
    reg = KNNRegressor(x, np.full(1000, 3.25), 50)
    np.testing.assert_allclose(reg.predict(np.linspace(-3, 3, 11)), 3.25)


def test_errors():
    x = np.random.default_rng(7).standard_normal(100)
    with pytest.raises(SampleSizeError):
        KNNRegressor(x, x, 100)
    with pytest.raises(DegenerateSampleError):
        KNNRegressor(np.ones(100), x, 5)
    with pytest.raises(ValueError):
        KNNRegressor(x, x[:50], 5)
