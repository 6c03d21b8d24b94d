"""Fourth-moment discrepancies, explicit entropy bounds and their inputs.

Bounds are only evaluated inside their hypothesis gates; outside them the
evaluators raise :class:`HypothesisViolation` instead of extrapolating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, ndimage, special

from . import rng
from .chaos import (ChaosElement, ChaoticVector, SampleBatch, exact_moment, fourth_moment_norm, inner_product,
                    isserlis_fourth_norm)
from .errors import DegenerateSampleError, HypothesisViolation, SampleSizeError
from .knn import KNNRegressor, default_k
from .malliavin import ChaosMatrix, gamma_matrix, stein_coupling_exact
from .smoothing import BinnedMixture1D


# ---------------------------------------------------------------------------
# discrepancies

def delta_fourth(vec: ChaoticVector) -> tuple[float, float]:
    """(E||F||^4 - E||Z||^4, sum_jk Cov(F_j^2, F_k^2) - 2 C_jk^2).

    The first value goes through the chaos expansion of ||F||^2, the second
    through four-fold exact moments; they must coincide.
    """
    if not vec.chaotic or not vec.centered:
        raise ValueError("delta_fourth needs centered pure-chaos components")
    C = vec.covariance
    d_moment = fourth_moment_norm(vec.components) - isserlis_fourth_norm(C)
    d_cov = 0.0
    for j in range(vec.d):
        for k in range(vec.d):
            fj, fk = vec[j], vec[k]
            cov_sq = exact_moment([fj, fj, fk, fk]) - C[j, j] * C[k, k]
            d_cov += cov_sq - 2.0 * C[j, k] ** 2
    return float(d_moment), float(d_cov)


def stein_discrepancy(vec: ChaoticVector, coupling: ChaosMatrix | None = None) -> float:
    """sum_jk E[(C_jk - T_jk)^2] for the unconditioned coupling, exactly."""
    T = coupling if coupling is not None else stein_coupling_exact(vec)
    C = vec.covariance
    n = vec[0].basis_dim
    out = 0.0
    for j in range(vec.d):
        for k in range(vec.d):
            diff = T[j, k] - ChaosElement.constant(C[j, k], n)
            out += inner_product(diff, diff)
    return float(out)


def stein_discrepancy_conditioned(f_samples: np.ndarray, coupling_values: np.ndarray, C,
                                  k: int | None = None) -> tuple[float, float]:
    """Cross-fitted E||C - E[T | F]||^2 with its standard error."""
    f = np.asarray(f_samples, dtype=float)
    f = f[:, None] if f.ndim == 1 else f
    m, d = f.shape
    C = np.atleast_2d(C)
    y = (C[None] - np.asarray(coupling_values, dtype=float).reshape(m, d, d)).reshape(m, d * d)
    reg = KNNRegressor(f, y, k or default_k(m, d))
    fit = reg.predict(f, loo=True).reshape(m, d * d)
    val = np.sum(y * fit, axis=1)
    psi = 2.0 * val - np.sum(fit * fit, axis=1)
    return float(val.mean()), float(psi.std(ddof=1) / math.sqrt(m))


def stein_l1(tau_values: np.ndarray) -> tuple[float, float]:
    """Monte Carlo E|1 - tau| and its standard error."""
    a = np.abs(1.0 - np.asarray(tau_values, dtype=float).ravel())
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def stein_tv_bound(discrepancy_l1: float) -> float:
    """2 E|1 - tau_F(F)|, a bound on sup_A |P(F in A) - P(Z in A)|."""
    if discrepancy_l1 < 0:
        raise ValueError("E|1 - tau| cannot be negative")
    return 2.0 * float(discrepancy_l1)


def tau_abs_moments(vec: ChaoticVector, eta: float, batch: SampleBatch | None = None,
                    coupling: ChaosMatrix | None = None) -> np.ndarray:
    """Table E|T_jk|^{eta+2}; exact when eta + 2 is an even integer, else Monte Carlo."""
    T = coupling if coupling is not None else stein_coupling_exact(vec)
    p = eta + 2.0
    out = np.empty((vec.d, vec.d))
    even = abs(p - round(p)) < 1e-12 and int(round(p)) % 2 == 0
    vals = None if even else T.evaluate(_need(batch).gaussians)
    for j in range(vec.d):
        for k in range(vec.d):
            if even:
                cap = max(16, int(round(p)) * T[j, k].max_order)
                out[j, k] = exact_moment([T[j, k]] * int(round(p)), order_cap=cap)
            else:
                out[j, k] = float(np.mean(np.abs(vals[:, j, k]) ** p))
    return out


def _need(batch):
    if batch is None:
        raise ValueError("a sample batch is required for non-even moment exponents")
    return batch


# ---------------------------------------------------------------------------
# entropy bounds

def gaussian_abs_moment(p: float) -> float:
    """E|N(0,1)|^p = 2^{p/2} Gamma((p+1)/2) / sqrt(pi)."""
    return 2.0 ** (p / 2.0) * math.gamma((p + 1.0) / 2.0) / math.sqrt(math.pi)


def _l1_moments(C: np.ndarray) -> tuple[float, float]:
    """E||Z||_1 and E||Z||_1^2 for Z ~ N(0, C)."""
    sd = np.sqrt(np.diag(C))
    e1 = math.sqrt(2.0 / math.pi) * sd.sum()
    e2 = 0.0
    for j in range(len(sd)):
        for k in range(len(sd)):
            r = float(np.clip(C[j, k] / (sd[j] * sd[k]), -1.0, 1.0))
            e2 += (2.0 / math.pi) * sd[j] * sd[k] * (math.sqrt(1.0 - r * r) + r * math.asin(r))
    return e1, e2


@dataclass
class BoundInputs:
    delta: float
    eta: float = 2.0
    alpha: float = 0.5
    kappa: float = 1.0
    tau_moments: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    C: np.ndarray = field(default_factory=lambda: np.eye(1))

    def __post_init__(self):
        self.tau_moments = np.atleast_2d(np.asarray(self.tau_moments, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.eta <= 0 or self.kappa <= 0:
            raise ValueError("eta and kappa must be positive")
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 1/2]")
        if not np.all(np.isfinite(self.tau_moments)):
            raise ValueError("tau moments must be finite")
        if self.tau_moments.shape != self.C.shape:
            raise ValueError("tau moment table must match C")

    @property
    def d(self) -> int:
        return self.C.shape[0]

    @property
    def multi_threshold(self) -> float:
        return 2.0 ** (-(self.eta + 1.0) / (self.alpha * self.eta))

    @property
    def gate_1d(self) -> bool:
        return self.d == 1 and self.delta <= 1.0

    @property
    def gate_multi(self) -> bool:
        return self.delta <= self.multi_threshold


def _dlogd(delta: float) -> float:
    return 0.0 if delta == 0 else delta * abs(math.log(delta))


def coefficients_1d(inp: BoundInputs) -> tuple[float, float]:
    """(leading coefficient, coefficient of the linear term)."""
    eta = inp.eta
    lead = (eta + 1.0) / (min(1.0, 2.0 * inp.alpha) * eta)
    c_eta = (2.0 * (4.0 * inp.kappa + 4.0) ** (eta / (eta + 1.0))
             * gaussian_abs_moment(eta + 2.0) ** (1.0 / (eta + 1.0))
             * (1.0 + float(inp.tau_moments[0, 0])) ** (1.0 / (eta + 1.0)))
    return lead, c_eta * lead


def bound_entropy_1d(inp: BoundInputs) -> float:
    if inp.d != 1:
        raise ValueError("bound_entropy_1d needs scalar inputs")
    if inp.delta > 1.0:
        raise HypothesisViolation(f"one-dimensional bound needs delta <= 1, got {inp.delta!r}")
    a, b = coefficients_1d(inp)
    return a * _dlogd(inp.delta) + b * inp.delta


def coefficients_multi(inp: BoundInputs) -> tuple[float, float]:
    eta, d, C = inp.eta, inp.d, inp.C
    cinv = np.linalg.inv(C)
    lam = float(np.linalg.eigvalsh(cinv).max())
    ztl_var = float(np.diag(cinv).max())
    lead = d * (eta + 1.0) * lam / (2.0 * inp.alpha * eta) * ztl_var
    e1, e2 = _l1_moments(C)
    ztl_mom = ztl_var ** ((eta + 2.0) / 2.0) * gaussian_abs_moment(eta + 2.0)
    tail = sum((abs(C[j, k]) ** (eta + 2.0) + inp.tau_moments[j, k]) ** (1.0 / (eta + 1.0))
               for j in range(d) for k in range(d))
    c_d = (2.0 * d * d * (2.0 * inp.kappa * (e1 + e2) + math.sqrt(float(np.diag(C).max())))
           * ztl_mom ** (1.0 / (eta + 1.0)) * tail)
    return lead, c_d * (eta + 1.0) * lam / (2.0 * inp.alpha * eta)


def bound_entropy_multi(inp: BoundInputs) -> float:
    if not inp.gate_multi:
        raise HypothesisViolation(
            f"multivariate bound needs delta <= {inp.multi_threshold:.6g}, got {inp.delta!r}")
    a, b = coefficients_multi(inp)
    return a * _dlogd(inp.delta) + b * inp.delta


# ---------------------------------------------------------------------------
# sums of i.i.d. variables

@dataclass
class BaseDensity:
    pdf: Callable[[np.ndarray], np.ndarray]
    support: tuple[float, float]
    sampler: Callable[[int, int], np.ndarray]
    name: str = "custom"


def uniform_base() -> BaseDensity:
    r = math.sqrt(3.0)
    pdf = lambda x: np.where(np.abs(x) <= r, 1.0 / (2 * r), 0.0)
    samp = lambda m, seed: r * (2.0 * rng.uniform_rows(seed, rng.STREAM_CHAOS, m, 1)[:, 0] - 1.0)
    return BaseDensity(pdf, (-r, r), samp, "uniform")


def gaussian_base() -> BaseDensity:
    pdf = lambda x: np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    samp = lambda m, seed: rng.gaussian_rows(seed, rng.STREAM_CHAOS, m, 1)[:, 0]
    return BaseDensity(pdf, (-12.0, 12.0), samp, "gaussian")


def stein_factor_grid(base: BaseDensity, n_grid: int = 20001) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x, f(x), tau(x) = f(x)^{-1} int_x^inf z f(z) dz on a grid over the support."""
    a, b = base.support
    x = np.linspace(a, b, n_grid)
    f = base.pdf(x)
    right = integrate.cumulative_trapezoid((x * f)[::-1], -x[::-1], initial=0.0)[::-1]
    # mean zero: int_x^inf z f = -int_-inf^x z f, which is the accurate side for x < 0
    left = -integrate.cumulative_trapezoid(x * f, x, initial=0.0)
    tail = np.where(x < 0, left, right)
    keep = f > 1e-12 * f.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(keep, tail / f, np.nan)
    return x, f, tau


@dataclass
class SumExample:
    n: int
    var_tau: float
    mean_tau: float
    tv_bound: float
    projection: float | None = None
    projection_se: float | None = None

    @property
    def projection_ok(self) -> bool | None:
        if self.projection is None:
            return None
        return self.projection <= self.var_tau / self.n + 3.0 * self.projection_se


def sum_example(base: BaseDensity, n: int, m_mc: int = 0, seed: int = 0, n_grid: int = 20001) -> SumExample:
    """Var(tau_F(F)), the bound 2 sqrt(Var/n) and optionally E[(1 - tau_{S_n})^2] by cross-fit."""
    x, f, tau = stein_factor_grid(base, n_grid)
    ok = np.isfinite(tau) & (f > 0)
    w = np.where(ok, f, 0.0)
    mass = integrate.trapezoid(w, x)
    mean_tau = integrate.trapezoid(np.where(ok, tau * f, 0.0), x) / mass
    second = np.where(ok, tau * tau * f, 0.0)
    # an infinite second moment shows up as mass at the truncated edges
    idx = np.flatnonzero(ok)
    edge = max(second[idx[0]], second[idx[-1]])
    fe = max(f[idx[0]], f[idx[-1]])
    if fe < 1e-6 * f.max() and edge > 1e-6 * second.max():
        raise ValueError("Var(tau_F(F)) does not appear finite on this base density")
    var = integrate.trapezoid(second, x) / mass - mean_tau ** 2
    var = max(var, 0.0) if abs(var) < 1e-9 else var
    if not np.isfinite(var) or var < 0:
        raise ValueError("Var(tau_F(F)) is not finite")
    out = SumExample(n, float(var), float(mean_tau), 2.0 * math.sqrt(var) / math.sqrt(n))
    if m_mc:
        draws = base.sampler(m_mc * n, seed).reshape(m_mc, n)
        tvals = np.interp(draws, x[ok], tau[ok])
        s = draws.sum(axis=1) / math.sqrt(n)
        y = 1.0 - tvals.mean(axis=1)
        reg = KNNRegressor(s, y, default_k(m_mc, 1))
        fit = reg.predict(s, loo=True)
        val = y * fit
        psi = 2.0 * val - fit * fit
        out.projection = float(val.mean())
        out.projection_se = float(psi.std(ddof=1) / math.sqrt(m_mc))
    return out


# ---------------------------------------------------------------------------
# small-ball envelopes

@dataclass
class SmallBallFit:
    degree: float
    exponent: float
    coef: float
    levels: np.ndarray
    probs: np.ndarray
    passed: bool


def small_ball_probability(values: np.ndarray, level: float) -> float:
    return float(np.mean(np.asarray(values) <= level))


def carbery_wright_envelope(values: np.ndarray, degree: float, p_grid=None, tol: float = 0.1,
                            scale: float = 1.0, absolute: bool = True) -> SmallBallFit:
    """Fit log P(|Q| <= a) against log a on a quantile grid of small probabilities.

    The envelope c a^{1/degree} dominates the empirical curve at small a when
    the fitted exponent is at least 1/degree - tol; ``coef`` is the smallest c
    that makes it dominate on the grid (after dividing a by ``scale``).
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 100_000:
        raise SampleSizeError(f"small-ball fits need >= 100000 draws, got {v.size}")
    q = np.abs(v) if absolute else v
    if np.ptp(q) <= 1e-12 * (1.0 + np.abs(q).max()):
        raise DegenerateSampleError("polynomial is almost surely constant")
    p = np.logspace(-3, -1, 9) if p_grid is None else np.asarray(p_grid, dtype=float)
    qs = np.sort(q)
    levels = qs[np.clip(np.ceil(p * q.size).astype(int) - 1, 0, q.size - 1)]
    probs = np.searchsorted(qs, levels, side="right") / q.size
    pos = levels > 0
    slope = float(np.polyfit(np.log(levels[pos]), np.log(probs[pos]), 1)[0])
    coef = float(np.max(probs[pos] / (levels[pos] / scale) ** (1.0 / degree)))
    return SmallBallFit(degree, slope, coef, levels, probs, slope >= 1.0 / degree - tol)


def det_gamma_envelope(vec: ChaoticVector, batch: SampleBatch, p_grid=None, tol: float = 0.1) -> SmallBallFit:
    """Small-ball envelope of det Gamma with N = 2d(q-1), scaled by E[det Gamma]."""
    gam = gamma_matrix(vec)
    q = max(c.max_order for c in vec.components)
    N = 2 * vec.d * (q - 1)
    if N == 0:
        raise DegenerateSampleError("det Gamma is constant for first-chaos vectors")
    dets = np.linalg.det(gam.evaluate(batch.gaussians))
    mean = gam.determinant().mean if vec.d <= 3 else float(dets.mean())
    fit = carbery_wright_envelope(dets, N, p_grid, tol, scale=mean, absolute=False)
    fit.coef /= N
    return fit


# ---------------------------------------------------------------------------
# total variation estimates

def _bandwidth(x: np.ndarray) -> float:
    return 0.5 * float(np.std(x)) * x.shape[0] ** (-0.2)


def _smoothed_l1_1d(a: np.ndarray, b_pts: np.ndarray | None, bw: float, ref_pdf=None) -> float:
    lo = min(a.min(), b_pts.min() if b_pts is not None else a.min()) - 8 * bw
    hi = max(a.max(), b_pts.max() if b_pts is not None else a.max()) + 8 * bw
    grid = np.linspace(lo, hi, int(math.ceil((hi - lo) / (bw / 10))) + 1)
    fa = BinnedMixture1D(a, bw).sums(grid).s0
    fb = BinnedMixture1D(b_pts, bw).sums(grid).s0 if b_pts is not None else ref_pdf(grid)
    return 0.5 * float(integrate.trapezoid(np.abs(fa - fb), grid))


def _smoothed_l1_2d(a: np.ndarray, b: np.ndarray, bw: float, cells: int = 256) -> float:
    lo = np.minimum(a.min(axis=0), b.min(axis=0)) - 5 * bw
    hi = np.maximum(a.max(axis=0), b.max(axis=0)) + 5 * bw
    edges = [np.linspace(lo[i], hi[i], cells + 1) for i in range(2)]
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], edges)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], edges)
    sig = [bw / (edges[i][1] - edges[i][0]) for i in range(2)]
    ha = ndimage.gaussian_filter(ha / a.shape[0], sig, mode="constant")
    hb = ndimage.gaussian_filter(hb / b.shape[0], sig, mode="constant")
    return 0.5 * float(np.abs(ha - hb).sum())


def tv_shift_estimate(f_samples: np.ndarray, x, t: float, bandwidth: float | None = None) -> float:
    """TV(law of sqrt(t) F + sqrt(1-t) x, law of F) from smoothed densities at one bandwidth."""
    f = np.asarray(f_samples, dtype=float)
    f = f[:, None] if f.ndim == 1 else f
    d = f.shape[1]
    if d > 2:
        raise ValueError("tv_shift_estimate is limited to d <= 2")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0:
        return 0.0
    x = np.broadcast_to(np.asarray(x, dtype=float), (d,))
    g = math.sqrt(t) * f + math.sqrt(1.0 - t) * x[None, :]
    bw = bandwidth or _bandwidth(f[:, 0])
    if d == 1:
        return _smoothed_l1_1d(g[:, 0], f[:, 0], bw)
    return _smoothed_l1_2d(g, f, bw)


def tv_to_gaussian_1d(f_samples: np.ndarray, bandwidth: float | None = None) -> float:
    """TV(F * k, Z * k) for a Gaussian kernel k; never exceeds TV(F, Z)."""
    f = np.asarray(f_samples, dtype=float).ravel()
    bw = bandwidth or _bandwidth(f)
    s2 = 1.0 + bw * bw
    ref = lambda y: np.exp(-0.5 * y * y / s2) / math.sqrt(2 * math.pi * s2)
    return _smoothed_l1_1d(f, None, bw, ref)


def ks_to_gaussian(f_samples: np.ndarray) -> float:
    """sup_x |F_m(x) - Phi(x)| (a lower bound on TV)."""
    x = np.sort(np.asarray(f_samples, dtype=float).ravel())
    n = x.size
    cdf = special.ndtr(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


@dataclass
class ShiftFit:
    kappa: float
    alpha: float
    kappa_1d: float
    xs: np.ndarray
    ts: np.ndarray
    tv: np.ndarray          # (len(xs), len(ts))
    dominates: bool


def tv_shift_fit(f_samples: np.ndarray, xs=None, ts=None, bandwidth: float | None = None) -> ShiftFit:
    """Fit TV(sqrt(t)F + sqrt(1-t)x, F) <= kappa (1 + ||x||_1)(1-t)^alpha over a grid with t in [1/2, 1)."""
    f = np.asarray(f_samples, dtype=float)
    f = f[:, None] if f.ndim == 1 else f
    d = f.shape[1]
    xs = np.array([0.0, 0.5, 1.0, 2.0]) if xs is None else np.asarray(xs, dtype=float)
    ts = np.array([0.5, 0.7, 0.85, 0.93, 0.97, 0.99]) if ts is None else np.asarray(ts, dtype=float)
    if np.any((ts < 0.5) | (ts >= 1.0)):
        raise ValueError("shift grid needs t in [1/2, 1)")
    tv = np.array([[tv_shift_estimate(f, np.full(d, xv), tv_, bandwidth) for tv_ in ts] for xv in xs])
    norm1 = (1.0 + d * np.abs(xs))[:, None]
    lu = np.broadcast_to(np.log(1.0 - ts)[None, :], tv.shape)
    ratio = tv / norm1
    pos = ratio > 0
    if pos.sum() >= 2:
        slope = float(np.polyfit(lu[pos], np.log(ratio[pos]), 1)[0])
    else:
        slope = 0.5
    alpha = float(np.clip(slope, 1e-3, 0.5))
    env = norm1 * (1.0 - ts)[None, :] ** alpha
    kappa = float(max(np.max(tv / env), 1e-12))
    # the one-dimensional form carries an extra 1/t; t < 1/2 needs kappa >= 2^{alpha-1}
    env1 = env / ts[None, :]
    kappa_1d = float(max(np.max(tv / env1), 2.0 ** (alpha - 1.0)))
    dominates = bool(np.all(tv <= kappa * env * (1 + 1e-12)))
    return ShiftFit(kappa, alpha, kappa_1d, xs, ts, tv, dominates)
