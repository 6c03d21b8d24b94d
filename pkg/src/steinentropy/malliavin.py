"""Malliavin operators on finite-basis chaos elements.

The derivative acts factor-wise through H_m' = m H_{m-1}; the OU semigroup,
generator L and its pseudo-inverse are diagonal on chaoses.  Matrices of
chaos elements (Malliavin matrix, Stein coupling) are :class:`ChaosMatrix`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chaos import (ChaosElement, ChaoticVector, MultiIndex, SampleBatch,
                    chaos_product, evaluate_chaos, exact_moment)
from .errors import DegenerateSampleError, SampleSizeError
from .knn import KNNRegressor, default_k

MIN_REGRESSION_SAMPLES = 1000


@dataclass(frozen=True)
class GradientElement:
    """DF as basis_dim coordinates <DF, e_k>."""

    components: tuple[ChaosElement, ...]

    @property
    def basis_dim(self) -> int:
        return len(self.components)

    def __getitem__(self, k: int) -> ChaosElement:
        return self.components[k]

    def inner(self, other: "GradientElement") -> ChaosElement:
        """<self, other>_h = sum_k self_k * other_k."""
        out = ChaosElement.zero(self.basis_dim)
        for a, b in zip(self.components, other.components):
            if len(a) and len(b):
                out = out + chaos_product(a, b)
        return out

    def scale_by_order(self, factor) -> "GradientElement":
        return GradientElement(tuple(c.scale_by_order(factor) for c in self.components))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return np.column_stack([evaluate_chaos(c, points) for c in self.components])


def malliavin_derivative(elem: ChaosElement) -> GradientElement:
    n = elem.basis_dim
    parts: list[dict[MultiIndex, float]] = [dict() for _ in range(n)]
    for key, c in elem.coeffs.items():
        ent = key.entries
        for pos, (i, e) in enumerate(ent):
            new = ent[:pos] + (((i, e - 1),) if e > 1 else ()) + ent[pos + 1:]
            k = MultiIndex._raw(new)
            d = parts[i - 1]
            d[k] = d.get(k, 0.0) + c * e
    return GradientElement(tuple(ChaosElement._raw(n, p) for p in parts))


def apply_ou_semigroup(elem: ChaosElement, t: float) -> ChaosElement:
    """P_t: weight-q coefficients times e^{-qt}; t = inf keeps only the mean."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if math.isinf(t):
        return ChaosElement.constant(elem.mean, elem.basis_dim)
    return elem.scale_by_order(lambda q: math.exp(-q * t))


def apply_L(elem: ChaosElement) -> ChaosElement:
    return elem.scale_by_order(lambda q: -float(q))


def apply_L_inverse(elem: ChaosElement) -> ChaosElement:
    if not elem.is_centered():
        raise ValueError(f"L^-1 needs a centered element; constant term is {elem.mean!r}")
    return elem.scale_by_order(lambda q: -1.0 / q)


class ChaosMatrix:
    """Square matrix of chaos elements."""

    def __init__(self, entries: Sequence[Sequence[ChaosElement]]):
        self.entries = tuple(tuple(r) for r in entries)
        self.d = len(self.entries)
        if any(len(r) != self.d for r in self.entries):
            raise ValueError("ChaosMatrix must be square")

    def __getitem__(self, ij) -> ChaosElement:
        i, j = ij
        return self.entries[i][j]

    def mean(self) -> np.ndarray:
        return np.array([[e.mean for e in r] for r in self.entries])

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """(m, d, d) array of entry values."""
        points = np.asarray(points, dtype=float)
        out = np.empty((points.shape[0], self.d, self.d))
        cache: dict[int, np.ndarray] = {}
        for i in range(self.d):
            for j in range(self.d):
                e = self.entries[i][j]
                key = id(e)
                if key not in cache:
                    cache[key] = evaluate_chaos(e, points)
                out[:, i, j] = cache[key]
        return out

    def max_order(self) -> int:
        return max(e.max_order for r in self.entries for e in r)

    def determinant(self) -> ChaosElement:
        """det as a chaos element by the Leibniz expansion (d <= 3)."""
        if self.d > 3:
            raise ValueError("exact determinant expansion is limited to d <= 3")
        n = self.entries[0][0].basis_dim
        out = ChaosElement.zero(n)
        for perm in itertools.permutations(range(self.d)):
            sign = _perm_sign(perm)
            term = ChaosElement.constant(float(sign), n)
            for i, j in enumerate(perm):
                term = chaos_product(term, self.entries[i][j])
            out = out + term
        return out


def _perm_sign(perm: Sequence[int]) -> int:
    sign, p = 1, list(perm)
    for i in range(len(p)):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            sign = -sign
    return sign


def gamma_matrix(vec: ChaoticVector) -> ChaosMatrix:
    """Gamma_ij = <DF_i, DF_j>."""
    grads = [malliavin_derivative(c) for c in vec.components]
    d = vec.d
    rows = [[None] * d for _ in range(d)]
    for i in range(d):
        for j in range(i, d):
            rows[i][j] = rows[j][i] = grads[i].inner(grads[j])
    return ChaosMatrix(rows)


def stein_coupling_exact(vec: ChaoticVector) -> ChaosMatrix:
    """T_ij = <-D L^{-1} F_i, D F_j>; E[T] equals the covariance."""
    for c in vec.components:
        if not c.is_centered():
            raise ValueError("stein coupling needs centered components")
    grads = [malliavin_derivative(c) for c in vec.components]
    pre = [malliavin_derivative(apply_L_inverse(c)) for c in vec.components]
    d = vec.d
    rows = []
    for i in range(d):
        neg = GradientElement(tuple(-x for x in pre[i].components))
        rows.append([neg.inner(grads[j]) for j in range(d)])
    return ChaosMatrix(rows)


@dataclass(frozen=True)
class SteinMatrixEstimate:
    """kNN fit of x -> E[coupling | F = x] (local linear on the k neighbours by default)."""

    regressor: KNNRegressor
    d: int
    fit_meta: dict = field(default_factory=dict)
    degree: int = 1

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """(q, d, d) fitted matrices at query rows ``x`` (shape (q, d) or (q,) when d = 1)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.d == 1 else x[None, :]
        return self.regressor.predict(x, degree=self.degree).reshape(-1, self.d, self.d)

    __call__ = evaluate


def stein_matrix_regress(batch: SampleBatch, coupling_columns: np.ndarray, d: int | None = None,
                         k: int | None = None, degree: int = 1) -> SteinMatrixEstimate:
    """Regress evaluated coupling entries (m, d, d) on the F-columns of ``batch``.

    A plain neighbour mean with the default k shrinks the sparse tails of
    F, so its fitted values no longer average to E[tau] = C; the local
    linear fit on the same neighbours removes that first-order bias.
    """
    cc = np.asarray(coupling_columns, dtype=float)
    if cc.ndim == 1:
        cc = cc[:, None, None]
    m = cc.shape[0]
    d = d or cc.shape[1]
    if m < MIN_REGRESSION_SAMPLES:
        raise SampleSizeError(f"stein matrix regression needs >= {MIN_REGRESSION_SAMPLES} rows, got {m}")
    if batch.m != m:
        raise ValueError("coupling columns and batch have different lengths")
    f = batch.f_matrix(d)
    if np.any(f.std(axis=0) == 0):
        raise DegenerateSampleError("an F-column has zero variance")
    k = k or default_k(m, d)
    y = cc.reshape(m, d * d)
    reg = KNNRegressor(f, y, k)
    loo = reg.predict(f, loo=True, degree=degree)
    resid = float(np.mean(np.sum((y - loo) ** 2, axis=1)))
    fitted_mean = loo.mean(axis=0).reshape(d, d)
    fitted_se = (loo.std(axis=0) / math.sqrt(m)).reshape(d, d)
    meta = {"k": k, "m": m, "degree": degree, "residual": resid,
            "fitted_mean": fitted_mean, "fitted_mean_se": fitted_se,
            "coupling_mean": y.mean(axis=0).reshape(d, d)}
    return SteinMatrixEstimate(reg, d, meta, degree)


def expected_det_gamma(vec: ChaoticVector, batch: SampleBatch | None = None,
                       exact: bool = False) -> tuple[float, float, str]:
    """Monte Carlo (or exact, d <= 3) E[det Gamma] with a density verdict."""
    gam = gamma_matrix(vec)
    if exact:
        est, se = gam.determinant().mean, 0.0
    else:
        if batch is None:
            raise ValueError("a sample batch is required unless exact=True")
        dets = np.linalg.det(gam.evaluate(batch.gaussians))
        est = float(dets.mean())
        se = float(dets.std(ddof=1) / math.sqrt(dets.size)) if dets.size > 1 else 0.0
    verdict = "density exists" if est > 3.0 * se and est > 1e-12 else "inconclusive"
    return est, se, verdict


def integration_by_parts_sides(vec_component: ChaosElement, g: Callable, g_prime: Callable,
                               batch: SampleBatch, power: int | None = None) -> tuple[float, float, float]:
    """Monte Carlo E[F g(F)] and E[<-DL^{-1}F, DF> g'(F)] with the SE of their difference.

    When g(x) = x^power the difference is itself a chaos element and its
    exact variance replaces the sample one; sample variances of high-degree
    polynomials are badly skewed at finite m.
    """
    vec = ChaoticVector([vec_component], orders=[None])
    tau = stein_coupling_exact(vec)[0, 0]
    f = evaluate_chaos(vec_component, batch.gaussians)
    t = evaluate_chaos(tau, batch.gaussians)
    a = f * g(f)
    b = t * g_prime(f)
    diff = a - b
    if power is None:
        se = float(diff.std(ddof=1) / math.sqrt(diff.size))
    else:
        se = math.sqrt(max(ibp_difference_variance(vec_component, power), 0.0) / diff.size)
    return float(a.mean()), float(b.mean()), se


def ibp_difference_variance(vec_component: ChaosElement, power: int) -> float:
    """Exact Var(F^{p+1} - p tau F^{p-1}) for g(x) = x^p."""
    vec = ChaoticVector([vec_component], orders=[None])
    tau = stein_coupling_exact(vec)[0, 0]
    cap = 10**6
    lhs = _power(vec_component, power + 1, cap)
    diff = lhs if power == 0 else lhs - power * chaos_product(tau, _power(vec_component, power - 1, cap), cap)
    return exact_moment([diff, diff], order_cap=cap) - diff.mean ** 2


def _power(e: ChaosElement, p: int, cap: int) -> ChaosElement:
    out = ChaosElement.constant(1.0, e.basis_dim)
    for _ in range(p):
        out = chaos_product(out, e, cap)
    return out


def integration_by_parts_exact(vec_component: ChaosElement, power: int) -> tuple[float, float]:
    """Exact E[F^{p+1}] and E[tau * p F^{p-1}] for g(x) = x^p."""
    vec = ChaoticVector([vec_component], orders=[None])
    tau = stein_coupling_exact(vec)[0, 0]
    lhs = exact_moment([vec_component] * (power + 1), order_cap=10**6)
    if power == 0:
        return lhs, 0.0
    rhs = power * exact_moment([tau] + [vec_component] * (power - 1), order_cap=10**6)
    return lhs, rhs
