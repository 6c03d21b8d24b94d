"""Gaussian interpolation F_t = sqrt(t) F + sqrt(1-t) Z and its score.

Two independent score estimators are provided:

* density route: the exact Gaussian-mixture representation of the law of
  F_t (one kernel per F-draw) gives f_t and grad f_t; the score is their
  ratio.  For d = 1 the mixture is binned on a fine grid and convolved by
  FFT, otherwise kernel sums are taken directly.
* Stein route: a nearest-neighbour regression, on the combined rows, of
  (I - C^{-1} T) C^{-1} Z, where T is a Stein coupling evaluated on the
  same rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

from . import rng
from .errors import SampleSizeError, UnreliableRegionError
from .knn import KNNRegressor, default_k

BULK_SE_RATIO = 10.0
MAX_DENSITY_DIM = 3
MIN_STEIN_SAMPLES = 1000


def _as_matrix(c, d: int) -> np.ndarray:
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if c.shape == (1, 1) and d > 1:
        c = c[0, 0] * np.eye(d)
    if c.shape != (d, d):
        raise ValueError(f"covariance shape {c.shape} does not match d={d}")
    return c


def _rows(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if d == 1 else x[None, :]
    if x.shape[1] != d:
        raise ValueError(f"query dimension {x.shape[1]} != {d}")
    return x


@dataclass(frozen=True)
class InterpolationPoint:
    """F-draws, independent Z ~ N(0, C) draws and the combined rows at time t."""

    t: float
    f_samples: np.ndarray
    z_samples: np.ndarray
    C: np.ndarray
    B: np.ndarray

    @property
    def m(self) -> int:
        return self.f_samples.shape[0]

    @property
    def d(self) -> int:
        return self.f_samples.shape[1]

    @property
    def combined(self) -> np.ndarray:
        return math.sqrt(self.t) * self.f_samples + math.sqrt(1.0 - self.t) * self.z_samples

    @property
    def gamma_t(self) -> np.ndarray:
        return self.t * self.B + (1.0 - self.t) * self.C

    def at(self, t: float) -> "InterpolationPoint":
        """Same F and Z rows at another time."""
        return InterpolationPoint(float(t), self.f_samples, self.z_samples, self.C, self.B)


def gaussian_noise(m: int, C: np.ndarray, seed: int, stream: int = rng.STREAM_SMOOTHING) -> np.ndarray:
    """m rows of N(0, C) from a stream independent of the chaos draws."""
    C = np.atleast_2d(C)
    g = rng.gaussian_rows(seed, stream, m, C.shape[0])
    return g @ np.linalg.cholesky(C).T


def make_interpolation(f_samples: np.ndarray, t: float, C=None, seed: int = 0, B=None,
                       z_samples: np.ndarray | None = None) -> InterpolationPoint:
    f = np.asarray(f_samples, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    m, d = f.shape
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    C = _as_matrix(np.eye(d) if C is None else C, d)
    B = _as_matrix(np.cov(f, rowvar=False) if B is None else B, d)
    z = gaussian_noise(m, C, seed) if z_samples is None else np.asarray(z_samples, dtype=float).reshape(m, d)
    for a in (f, z):
        a.setflags(write=False)
    return InterpolationPoint(float(t), f, z, C, B)


# ---------------------------------------------------------------------------
# mixture kernel sums

@dataclass
class KernelSums:
    """Per-query means over kernels of k, k r, k^2, k^2 r, k^2 r r^T with r = grad log k."""

    n: int
    s0: np.ndarray
    s1: np.ndarray
    s00: np.ndarray
    s01: np.ndarray
    s11: np.ndarray

    def density(self) -> tuple[np.ndarray, np.ndarray]:
        var = np.maximum(self.s00 - self.s0 ** 2, 0.0)
        return self.s0, np.sqrt(var / self.n)

    def score(self) -> tuple[np.ndarray, np.ndarray]:
        """Ratio estimate of grad f / f and its delta-method covariance (q, d, d)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = self.s1 / self.s0[:, None]
            num = (self.s11 - self.s01[:, :, None] * rho[:, None, :] - rho[:, :, None] * self.s01[:, None, :]
                   + self.s00[:, None, None] * rho[:, :, None] * rho[:, None, :])
            cov = num / (self.n * self.s0[:, None, None] ** 2)
        return rho, cov


def kernel_sums_direct(centers: np.ndarray, cov: np.ndarray, x: np.ndarray,
                       self_offsets: np.ndarray | None = None, budget: int = 4_000_000) -> KernelSums:
    """Exact sums of N(c_j, cov) kernels over all centers at queries x.

    ``self_offsets`` (q, d) marks leave-one-out queries x_i = c_i + offset_i;
    the query's own kernel is then removed analytically.
    """
    m, d = centers.shape
    prec = np.linalg.inv(cov)
    norm = 1.0 / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))
    q = x.shape[0]
    s0 = np.zeros(q)
    s1 = np.zeros((q, d))
    s00 = np.zeros(q)
    s01 = np.zeros((q, d))
    s11 = np.zeros((q, d, d))
    step = max(1, budget // max(1, q * d))
    for a in range(0, m, step):
        diff = x[:, None, :] - centers[None, a:a + step, :]
        r = -diff @ prec
        k = norm * np.exp(0.5 * np.einsum("qjd,qjd->qj", diff, r))
        k2 = k * k
        s0 += k.sum(axis=1)
        s1 += np.einsum("qj,qjd->qd", k, r)
        s00 += k2.sum(axis=1)
        s01 += np.einsum("qj,qjd->qd", k2, r)
        s11 += np.einsum("qj,qjd,qje->qde", k2, r, r)
    n = m
    if self_offsets is not None:
        r = -self_offsets @ prec
        k = norm * np.exp(0.5 * np.einsum("qd,qd->q", self_offsets, r))
        s0 -= k
        s1 -= k[:, None] * r
        s00 -= k * k
        s01 -= (k * k)[:, None] * r
        s11 -= (k * k)[:, None, None] * r[:, :, None] * r[:, None, :]
        n = m - 1
    return KernelSums(n, s0 / n, s1 / n, s00 / n, s01 / n, s11 / n)


class BinnedMixture1D:
    """Linearly binned Gaussian mixture on a grid of spacing s / ``grid_ratio``.

    Leave-one-out removal subtracts the query's own kernel exactly as it
    enters the binned and interpolated tables, so isolated draws leave no
    interpolation residue behind.
    """

    def __init__(self, centers: np.ndarray, s: float, grid_ratio: int = 20, cut: float = 8.0):
        c = np.asarray(centers, dtype=float).ravel()
        self.m, self.s = c.size, float(s)
        h = self.s / grid_ratio
        lo = c.min() - cut * self.s
        ng = int(math.ceil((c.max() + cut * self.s - lo) / h)) + 2
        pos = (c - lo) / h
        i0 = np.floor(pos).astype(np.int64)
        w1 = pos - i0
        w = np.bincount(i0, 1.0 - w1, ng) + np.bincount(i0 + 1, w1, ng)
        half = int(math.ceil(cut * grid_ratio))
        u = np.arange(-half, half + 1) * h / self.s
        k0 = np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * self.s)
        r = -u / self.s
        self.lo, self.h, self.ng, self._half = lo, h, ng, half
        self.grid = lo + h * np.arange(ng)
        self._kernels = {"s0": k0, "s1": k0 * r, "s00": k0 * k0, "s01": k0 * k0 * r, "s11": k0 * k0 * r * r}
        self._tables = {name: fftconvolve(w, ker, mode="same") for name, ker in self._kernels.items()}
        # float noise floor of the FFT tables
        self._floor = {name: 1e-13 * np.abs(v).max() for name, v in self._tables.items()}

    def _own(self, x: np.ndarray, c: np.ndarray) -> dict:
        pc = (c - self.lo) / self.h
        i0 = np.floor(pc).astype(np.int64)
        w1 = pc - i0
        px = np.clip((x - self.lo) / self.h, 0, self.ng - 1 - 1e-9)
        j = np.floor(px).astype(np.int64)
        a = px - j
        out = {}
        for name, ker in self._kernels.items():
            def kv(off):
                idx = off + self._half
                ok = (idx >= 0) & (idx < ker.size)
                return np.where(ok, ker[np.clip(idx, 0, ker.size - 1)], 0.0)
            tj = (1 - w1) * kv(j - i0) + w1 * kv(j - i0 - 1)
            tj1 = (1 - w1) * kv(j + 1 - i0) + w1 * kv(j - i0)
            out[name] = (1 - a) * tj + a * tj1
        return out

    def sums(self, x: np.ndarray, self_offsets: np.ndarray | None = None) -> KernelSums:
        x = np.asarray(x, dtype=float).ravel()
        vals = {k: np.interp(x, self.grid, v) for k, v in self._tables.items()}
        n = self.m
        if self_offsets is not None:
            own = self._own(x, x - np.asarray(self_offsets, dtype=float).ravel())
            vals = {k: v - own[k] for k, v in vals.items()}
            n = self.m - 1
        vals = {k: np.where(np.abs(v) > self._floor[k], v, 0.0) for k, v in vals.items()}
        vals = {k: np.maximum(v, 0.0) if k in ("s0", "s00", "s11") else v for k, v in vals.items()}
        return KernelSums(n, vals["s0"] / n, vals["s1"][:, None] / n, vals["s00"] / n,
                          vals["s01"][:, None] / n, vals["s11"][:, None, None] / n)


def _mixture_cov(point: InterpolationPoint) -> np.ndarray:
    return (1.0 - point.t) * point.C


def smoothed_density(point: InterpolationPoint, x) -> tuple[np.ndarray, np.ndarray]:
    """Mixture estimate of f_t at x with its standard error."""
    if point.t >= 1.0:
        raise ValueError("smoothed density needs t < 1")
    x = _rows(x, point.d)
    if point.t == 0.0:
        prec = np.linalg.inv(point.C)
        norm = 1.0 / math.sqrt((2 * math.pi) ** point.d * np.linalg.det(point.C))
        val = norm * np.exp(-0.5 * np.einsum("qd,de,qe->q", x, prec, x))
        return val, np.zeros_like(val)
    ks = kernel_sums_direct(math.sqrt(point.t) * point.f_samples, _mixture_cov(point), x)
    return ks.density()


@dataclass(frozen=True)
class ScoreEstimate:
    value: np.ndarray
    se: np.ndarray


def score_density_route(point: InterpolationPoint, x) -> ScoreEstimate:
    """grad f_t / f_t at x; refuses queries outside the 10-standard-error bulk."""
    if point.t >= 1.0:
        raise ValueError("density-route score needs t < 1")
    if point.d > MAX_DENSITY_DIM:
        raise ValueError(f"density-route score is limited to d <= {MAX_DENSITY_DIM}")
    x = _rows(x, point.d)
    if point.t == 0.0:
        val = -x @ np.linalg.inv(point.C).T
        return ScoreEstimate(val, np.zeros_like(val))
    ks = kernel_sums_direct(math.sqrt(point.t) * point.f_samples, _mixture_cov(point), x)
    f, fse = ks.density()
    bad = ~(f > BULK_SE_RATIO * fse)
    if np.any(bad):
        raise UnreliableRegionError(
            f"density not resolved at {x[bad][:3].tolist()} (f_t below {BULK_SE_RATIO:g} standard errors)")
    rho, cov = ks.score()
    return ScoreEstimate(rho, np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0)))


@dataclass(frozen=True)
class RowScores:
    """Leave-one-out density-route quantities at combined rows.

    ``level[i] = j`` means row i was evaluated with the kernel covariance
    widened by ``widen**j`` (0 for the exact mixture).
    """

    rows: np.ndarray
    rho: np.ndarray
    cov: np.ndarray
    f: np.ndarray
    f_se: np.ndarray
    level: np.ndarray | None = None

    @property
    def bulk(self) -> np.ndarray:
        return self.f > BULK_SE_RATIO * self.f_se


def _loo_sums(centers, var, y, offsets, grid_ratio):
    if centers.shape[1] == 1:
        return BinnedMixture1D(centers[:, 0], math.sqrt(var[0, 0]), grid_ratio).sums(y[:, 0], offsets[:, 0])
    return kernel_sums_direct(centers, var, y, self_offsets=offsets)


def density_route_rows(point: InterpolationPoint, rows: np.ndarray | None = None,
                       grid_ratio: int = 20, adaptive: bool = False, min_ratio: float = 3.0,
                       widen: float = 2.0, max_levels: int = 16) -> RowScores:
    """Leave-one-out density-route scores at the combined rows (all, or ``rows``).

    With ``adaptive`` a row whose leave-one-out density is below ``min_ratio``
    standard errors (an isolated tail draw) is re-evaluated with the kernel
    covariance widened geometrically until it is resolved.  Only such rows
    change; they then carry the score of a slightly smoother law.
    """
    if point.t >= 1.0:
        raise ValueError("density-route score needs t < 1")
    d = point.d
    if d > MAX_DENSITY_DIM:
        raise ValueError(f"density-route score is limited to d <= {MAX_DENSITY_DIM}")
    idx = np.arange(point.m) if rows is None else np.asarray(rows)
    y = point.combined[idx]
    level = np.zeros(idx.size, dtype=np.int64)
    if point.t == 0.0:
        f, _ = smoothed_density(point, y)
        return RowScores(idx, -y @ np.linalg.inv(point.C).T, np.zeros((idx.size, d, d)), f,
                         np.zeros_like(f), level)
    offsets = math.sqrt(1.0 - point.t) * point.z_samples[idx]
    centers = math.sqrt(point.t) * point.f_samples
    ks = _loo_sums(centers, _mixture_cov(point), y, offsets, grid_ratio)
    rho, cov = ks.score()
    f, fse = ks.density()
    if adaptive:
        todo = ~((f > min_ratio * fse) & (fse > 0))
        j = 0
        while todo.any() and j < max_levels:
            j += 1
            sub = np.flatnonzero(todo)
            ks = _loo_sums(centers, _mixture_cov(point) * widen ** j, y[sub], offsets[sub], grid_ratio)
            r2, c2 = ks.score()
            f2, s2 = ks.density()
            rho[sub], cov[sub], f[sub], fse[sub], level[sub] = r2, c2, f2, s2, j
            todo[sub] = ~((f2 > min_ratio * s2) & (s2 > 0))
    return RowScores(idx, rho, cov, f, fse, level)


def stein_regressor(point: InterpolationPoint, coupling: np.ndarray, k: int | None = None,
                    antithetic: bool = True) -> KNNRegressor:
    """kNN regression of (I - C^{-1}T) C^{-1} Z on the combined rows.

    With ``antithetic`` every row also enters with Z reflected: (F, -Z) has
    the same law as (F, Z), so the doubled design estimates the same
    conditional expectation with much smaller variance.
    """
    if point.m < MIN_STEIN_SAMPLES:
        raise SampleSizeError(f"Stein-route score needs >= {MIN_STEIN_SAMPLES} rows, got {point.m}")
    w = stein_weights(point, coupling)
    x = point.combined
    if antithetic:
        x = np.vstack([x, math.sqrt(point.t) * point.f_samples - math.sqrt(1.0 - point.t) * point.z_samples])
        w = np.vstack([w, -w])
    return KNNRegressor(x, w, k or default_k(x.shape[0], point.d))


def score_stein_route(point: InterpolationPoint, coupling: np.ndarray, x, k: int | None = None,
                      star: bool = False, degree: int = 1, antithetic: bool = True) -> np.ndarray:
    """-(t/sqrt(1-t)) E[(I - C^{-1}T) C^{-1} Z | F_t = x] - C^{-1} x (times Gamma_t if ``star``)."""
    if not 0.0 < point.t < 1.0:
        raise ValueError("Stein-route score needs 0 < t < 1")
    d = point.d
    x = _rows(x, d)
    reg = stein_regressor(point, coupling, k, antithetic)
    cinv = np.linalg.inv(point.C)
    rho = -(point.t / math.sqrt(1.0 - point.t)) * reg.predict(x, degree=degree).reshape(-1, d) - x @ cinv.T
    return rho @ point.gamma_t.T if star else rho


def stein_weights(point: InterpolationPoint, coupling: np.ndarray, centered_on: str = "I") -> np.ndarray:
    """Per-row (I - C^{-1} T) C^{-1} Z, or (C - T) C^{-1} Z when ``centered_on == "C"``."""
    d = point.d
    T = np.asarray(coupling, dtype=float).reshape(point.m, d, d)
    cinv = np.linalg.inv(point.C)
    zt = point.z_samples @ cinv.T
    if centered_on == "C":
        A = point.C[None] - T
    else:
        A = np.eye(d)[None] - np.einsum("ij,mjk->mik", cinv, T)
    return np.einsum("mij,mj->mi", A, zt)


@dataclass(frozen=True)
class ScoreField:
    t: float
    method: str
    evaluate: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.evaluate(x)


def density_score_field(point: InterpolationPoint) -> ScoreField:
    return ScoreField(point.t, "density-route", lambda x: score_density_route(point, x).value)


def stein_score_field(point: InterpolationPoint, coupling: np.ndarray, k: int | None = None) -> ScoreField:
    return ScoreField(point.t, "stein-route", lambda x: score_stein_route(point, coupling, x, k))


def weighted_rms_gap(point: InterpolationPoint, coupling: np.ndarray, n_query: int = 20000,
                     k: int | None = None) -> tuple[float, float]:
    """f_t-weighted RMS distance between the two score routes.

    Queries are combined rows (so the average is under f_t) inside the
    density-route bulk.  Returns (rms, fraction of queries used).
    """
    idx = np.arange(min(n_query, point.m))
    dens = density_route_rows(point, idx)
    y = point.combined[idx]
    rho_s = score_stein_route(point, coupling, y, k)
    diff = (dens.rho - rho_s)[dens.bulk]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1)))), float(dens.bulk.mean())


# ---------------------------------------------------------------------------
# duality check and shift-decay probe

def tanh_dictionary(n_funcs: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded slopes (n_funcs, dim) and offsets for g(y) = tanh(a.y + b)."""
    g = rng.gaussian_rows(seed, rng.STREAM_DICTIONARY, n_funcs, dim + 2)
    direction = g[:, :dim] / np.linalg.norm(g[:, :dim], axis=1, keepdims=True)
    steep = np.exp(1.5 * g[:, dim] + 1.0)
    return direction * steep[:, None], 0.3 * g[:, dim + 1]


def conditional_dual_check(x_column: np.ndarray, y_columns: np.ndarray, n_funcs: int = 64,
                           seed: int = 0, k: int | None = None) -> tuple[float, float, float]:
    """E|E[X|Y]| by kNN versus the best dictionary value of E[X g(Y)], ||g||_inf <= 1.

    The regression is local linear; without an explicit ``k`` the neighbour
    count is picked by leave-one-out error over m^{0.4}, ..., m^{4/(4+d)},
    since a discontinuous E[X|Y] and a pure-noise X want opposite ends.
    """
    x = np.asarray(x_column, dtype=float).ravel()
    y = np.asarray(y_columns, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    m, d = y.shape
    if m < 10_000:
        raise SampleSizeError("duality check needs >= 1e4 samples")
    cands = [k] if k else sorted({max(10, math.ceil(m ** p)) for p in (0.4, 0.5, 0.6, 0.7)} | {default_k(m, d)})
    best = None
    for kk in cands:
        fit = KNNRegressor(y, x, kk).predict(y, loo=True, degree=1)
        err = float(np.mean((fit - x) ** 2))
        if best is None or err < best[0]:
            best = (err, fit)
    lhs = float(np.mean(np.abs(best[1])))
    a, b = tanh_dictionary(n_funcs, d, seed)
    ys = (y - y.mean(axis=0)) / y.std(axis=0)
    vals = np.tanh(ys @ a.T + b[None, :])
    rhs = float(np.max(np.abs(x @ vals) / m))
    return lhs, rhs, lhs - rhs


def shift_decay_probe(point: InterpolationPoint, coupling: np.ndarray, ts, k: int | None = None) -> dict:
    """E|E[Z(1 - tau(F)) | F_t]| over ``ts`` (d = 1) with a fitted c t^{-1} (1-t)^delta."""
    ts = np.asarray(ts, dtype=float)
    w = point.z_samples[:, 0] * (1.0 - np.asarray(coupling, dtype=float).reshape(point.m))
    vals = []
    for t in ts:
        p = point.at(t)
        reg = KNNRegressor(p.combined, w, k or default_k(point.m, 1))
        vals.append(float(np.mean(np.abs(reg.predict(p.combined, loo=True)))))
    vals = np.array(vals)
    # log(v t) = log c + delta log(1-t)
    A = np.column_stack([np.ones_like(ts), np.log1p(-ts)])
    coef, *_ = np.linalg.lstsq(A, np.log(vals * ts), rcond=None)
    return {"t": ts, "value": vals, "c": float(math.exp(coef[0])), "delta": float(coef[1])}
