"""Relative entropy to a Gaussian along the interpolation F_t.

The de Bruijn representation used here is

    D(F || Z) = int_0^1 tr(C Gamma_t^{-1} J_st(F_t)) / (2t) dt
                + (tr(C^{-1}B) - d) / 2 + log(|C| / |B|) / 2,

where the last term is the closed form of the integral of
tr(C Gamma_t^{-1} - I) / (2t).  Every node of the t-quadrature reuses the same
F and Z rows, so the statistical error of the whole integral is taken from
per-row aggregates of the integrand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import HypothesisViolation
from .knn import KNNRegressor, default_k
from .smoothing import (BinnedMixture1D, InterpolationPoint, density_route_rows, kernel_sums_direct,
                        make_interpolation, stein_weights)

LOG_2PI_E = math.log(2 * math.pi * math.e)


def _check_pd(C, name: str = "C") -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != C.shape[1] or not np.allclose(C, C.T, atol=1e-12 * (1 + np.abs(C).max())):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(C).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return C


def gaussian_entropy(C) -> float:
    C = _check_pd(C)
    return 0.5 * (C.shape[0] * LOG_2PI_E + np.linalg.slogdet(C)[1])


def gaussian_kl_terms(B, C) -> tuple[float, float]:
    """((tr(C^{-1}B) - d)/2, log(|C|/|B|)/2)."""
    B, C = _check_pd(B, "B"), _check_pd(C, "C")
    if B.shape != C.shape:
        raise ValueError("B and C must have the same shape")
    d = C.shape[0]
    return (0.5 * (np.trace(np.linalg.solve(C, B)) - d),
            0.5 * (np.linalg.slogdet(C)[1] - np.linalg.slogdet(B)[1]))


def gaussian_kl_closed_form(B, C) -> float:
    """D(N(0,B) || N(0,C))."""
    a, b = gaussian_kl_terms(B, C)
    return a + b


def pinsker_tv(D: float, tol: float = 0.0) -> float:
    """sqrt(D/2), a bound on TV = sup_A |P(A) - Q(A)|."""
    if D < -tol:
        raise ValueError(f"negative relative entropy {D!r} beyond tolerance {tol!r}")
    return math.sqrt(max(D, 0.0) / 2.0)


# ---------------------------------------------------------------------------
# reports

@dataclass
class FisherCurve:
    grid: np.ndarray
    values: np.ndarray        # (n, d, d) J_st(F_t)
    stderr: np.ndarray        # (n, d, d)
    integrand: np.ndarray     # tr(C Gamma_t^{-1} J_st) / (2t)
    weights: np.ndarray

    def csv_rows(self) -> tuple[list[str], list[list[float]]]:
        d = self.values.shape[1]
        names = [f"J{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        header = ["t", "weight", "integrand"] + names + [f"se_{n}" for n in names]
        rows = []
        for n, t in enumerate(self.grid):
            rows.append([t, self.weights[n], self.integrand[n]]
                        + list(self.values[n].ravel()) + list(self.stderr[n].ravel()))
        return header, rows


@dataclass
class EntropyReport:
    relative_entropy: float
    error: float
    method: str
    correction_terms: tuple[float, float] = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)
    fisher_curve: FisherCurve | None = None

    @property
    def pinsker_tv(self) -> float:
        return pinsker_tv(self.relative_entropy, tol=math.inf)

    def to_record(self) -> str:
        items = {"method": self.method, "relative_entropy": self.relative_entropy, "error": self.error,
                 "correction_trace": self.correction_terms[0], "correction_logdet": self.correction_terms[1],
                 "pinsker_tv": self.pinsker_tv}
        items.update({k: v for k, v in self.diagnostics.items() if np.isscalar(v)})
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


# ---------------------------------------------------------------------------
# quadrature

@dataclass
class QuadConfig:
    n_nodes: int = 24
    eps: float | None = None
    delta: float | None = None
    eta: float = 2.0
    alpha: float = 0.5
    u_min: float = 1e-4
    tail_fit_nodes: int = 4
    quad_error: bool = True

    def split(self) -> float:
        """epsilon of the split near t = 1."""
        if self.eps is not None:
            return float(self.eps)
        if self.delta is not None and self.delta > 0:
            e = self.delta ** ((self.eta + 1.0) / (self.alpha * self.eta))
            if self.u_min < e < 0.5:
                return e
        return 1e-2


def _gl(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def quadrature_nodes(cfg: QuadConfig, t_max: float | None = None, n_nodes: int | None = None):
    """t-nodes and weights: Gauss-Legendre in t on [0, 1/2], then in log(1-t)."""
    n = n_nodes or cfg.n_nodes
    eps = cfg.split()
    u_end = cfg.u_min if t_max is None else max(cfg.u_min, 1.0 - t_max)
    t_top = 1.0 - u_end
    segs: list[tuple[str, float, float]] = []
    if t_top <= 0.5:
        segs.append(("t", 0.0, t_top))
    else:
        segs.append(("t", 0.0, 0.5))
        if u_end < eps < 0.5:
            segs += [("log", 0.5, eps), ("log", eps, u_end)]
        else:
            segs.append(("log", 0.5, u_end))
    counts = [n // len(segs)] * len(segs)
    for i in range(n - sum(counts)):
        counts[-1 - i] += 1
    ts, ws = [], []
    for (kind, a, b), c in zip(segs, counts):
        if kind == "t":
            x, w = _gl(c, a, b)
            ts.append(x)
            ws.append(w)
        else:
            v, w = _gl(c, math.log(a), math.log(b))
            u = np.exp(v)
            ts.append(1.0 - u)
            ws.append(-w * u)  # dt = -u dv, and v decreases from log a to log b
    t = np.concatenate(ts)
    w = np.concatenate(ws)
    order = np.argsort(t)
    return t[order], w[order], eps


# ---------------------------------------------------------------------------
# Fisher information at one node

@dataclass
class FisherNode:
    t: float
    rows: np.ndarray      # per-row contributions to tr(C Gamma_t^{-1} J_st)
    J: np.ndarray
    J_se: np.ndarray
    n_bad: int = 0


def fisher_density_node(point: InterpolationPoint, m_query: int | None = None,
                        grid_ratio: int = 20) -> FisherNode:
    """J_st(F_t) from leave-one-out mixture scores, with a ratio-variance correction."""
    d = point.d
    if d == 1 or m_query is None or m_query >= point.m:
        rows = None
    else:
        rows = np.arange(m_query)
    dens = density_route_rows(point, rows, grid_ratio=grid_ratio, adaptive=True)
    y = point.combined[dens.rows]
    G = point.gamma_t
    v = dens.rho + y @ np.linalg.inv(G).T
    V = dens.cov
    bad = ~np.all(np.isfinite(v), axis=1) | ~np.all(np.isfinite(V.reshape(len(v), -1)), axis=1)
    v[bad] = 0.0
    V[bad] = 0.0
    outer = v[:, :, None] * v[:, None, :] - V
    C = point.C
    contrib = np.einsum("qi,ij,qj->q", v, C, v) - np.einsum("ij,qji->q", C, V)
    J = G @ outer.mean(axis=0)
    J_se = np.abs(G) @ (outer.std(axis=0) / math.sqrt(len(v)))
    return FisherNode(point.t, contrib, J, J_se, int(bad.sum()))


def stein_k(m_rows: int, d: int, t: float, c: float = 0.05, floor: int = 50) -> int:
    """Neighbour count for cross-fitted Stein integrands, shrinking as t -> 1."""
    return int(min(default_k(m_rows, d), max(floor, math.ceil(c * m_rows * math.sqrt(1.0 - t)))))


# ---------------------------------------------------------------------------
# de Bruijn quadrature

def _as_samples(F, m: int | None, seed: int) -> np.ndarray:
    if isinstance(F, np.ndarray):
        f = F
    else:
        from .chaos import ChaoticVector, ChaosElement, sample_batch
        if isinstance(F, ChaosElement):
            F = ChaoticVector([F], orders=[None])
        if m is None:
            raise ValueError("sample size m is required when F is a chaos object")
        f = sample_batch(F, m, seed).f_matrix(F.d)
    return f[:, None] if f.ndim == 1 else f


def _tail_residual(t: np.ndarray, g: np.ndarray, u_min: float, n_fit: int) -> tuple[float, float, float]:
    """Integral over (1 - u_min, 1) of a fitted K u^{a-1} envelope; returns (value, K, a)."""
    u = 1.0 - t[-n_fit:]
    gg = g[-n_fit:]
    if np.any(gg <= 0) or n_fit < 2:
        return 0.0, 0.0, 1.0
    slope, icpt = np.polyfit(np.log(u), np.log(gg), 1)
    a = float(np.clip(slope + 1.0, 0.05, 1.0))
    # anchor the envelope at the node closest to 1
    K = float(gg[-1] / u[-1] ** (a - 1.0))
    return K * u_min ** a / a, K, a


def _integrate(t, w, rows_per_node, cfg: QuadConfig, full: bool):
    agg = np.zeros_like(rows_per_node[0])
    integrand = np.empty(len(t))
    for n, r in enumerate(rows_per_node):
        g = r / (2.0 * t[n]) if t[n] > 0 else np.zeros_like(r)
        agg += w[n] * g
        integrand[n] = g.mean()
    core = float(agg.mean())
    stat = float(agg.std(ddof=1) / math.sqrt(agg.size))
    resid, K, a = (0.0, 0.0, 1.0)
    if full:
        resid, K, a = _tail_residual(t, integrand, cfg.u_min, cfg.tail_fit_nodes)
    return core, stat, resid, integrand, {"tail_K": K, "tail_a": a}


def de_bruijn_entropy(F, C=None, quad: QuadConfig | None = None, B=None, m: int | None = None,
                      seed: int = 0, t_max: float | None = None, m_query: int | None = 4000,
                      z_samples: np.ndarray | None = None, n_batches: int = 10) -> EntropyReport:
    """D(F || N(0, C)) by quadrature of the Fisher curve (or D(F_{t_max} || Z) if t_max < 1).

    The statistical error is the larger of the per-row spread and the spread
    of ``n_batches`` independent sub-sample integrals: every row's mixture
    score depends on all other draws, which the per-row spread misses.
    """
    quad = quad or QuadConfig()
    f = _as_samples(F, m, seed)
    d = f.shape[1]
    C = _check_pd(np.eye(d) if C is None else C)
    if B is None:
        B = np.cov(f, rowvar=False).reshape(d, d) if not hasattr(F, "covariance") else F.covariance
    B = _check_pd(B, "B")
    base = make_interpolation(f, 0.0, C, seed=seed, B=B, z_samples=z_samples)
    t, w, eps = quadrature_nodes(quad, t_max)
    nodes = [fisher_density_node(base.at(tn), m_query) for tn in t]
    full = t_max is None or t_max >= 1.0
    core, stat, resid, integrand, tail = _integrate(t, w, [nd.rows for nd in nodes], quad, full)
    batch_se = 0.0
    if n_batches >= 2:
        mb = f.shape[0] // n_batches
        mq = None if m_query is None else max(1, m_query // n_batches)
        subs = []
        for b in range(n_batches):
            sl = slice(b * mb, (b + 1) * mb)
            pb = make_interpolation(base.f_samples[sl], 0.0, C, B=B, z_samples=base.z_samples[sl])
            rows = [fisher_density_node(pb.at(tn), mq).rows for tn in t]
            subs.append(_integrate(t, w, rows, quad, False)[0])
        batch_se = float(np.std(subs, ddof=1) / math.sqrt(n_batches))
    stat = max(stat, batch_se)
    quad_err = 0.0
    if quad.quad_error:
        t2, w2, _ = quadrature_nodes(quad, t_max, n_nodes=max(3, quad.n_nodes // 2))
        nodes2 = [fisher_density_node(base.at(tn), m_query) for tn in t2]
        core2 = _integrate(t2, w2, [nd.rows for nd in nodes2], quad, False)[0]
        quad_err = abs(core - core2)
    Bp = B if full else (t_max * B + (1.0 - t_max) * C)
    c1, c2 = gaussian_kl_terms(Bp, C)
    value = core + resid / 2.0 + c1 + c2
    error = math.sqrt(stat ** 2 + quad_err ** 2) + resid / 2.0
    curve = FisherCurve(t, np.array([nd.J for nd in nodes]), np.array([nd.J_se for nd in nodes]),
                        integrand, w)
    diag = {"eps": eps, "n_nodes": len(t), "core": core, "stat_error": stat, "batch_error": batch_se,
            "quad_error": quad_err, "tail_residual": resid, "t_max": 1.0 if full else t_max, "m": f.shape[0],
            "bad_rows": int(sum(nd.n_bad for nd in nodes)),
            "fisher_dominates": bool(stat > 0.5 * abs(core) and abs(core) > 0), **tail}
    return EntropyReport(value, error, "de-bruijn", (c1, c2), diag, curve)


@dataclass
class SteinIntegralReport:
    A1: float
    A2: float
    A1_error: float
    A2_error: float
    bracket_A1: tuple[float, float]
    bracket_A2: tuple[float, float]
    value: float
    error: float
    diagnostics: dict = field(default_factory=dict)

    def report(self) -> EntropyReport:
        return EntropyReport(self.value, self.error, "stein-integral", (0.0, 0.0), self.diagnostics)


def stein_integral_entropy(F, coupling: np.ndarray, C=None, quad: QuadConfig | None = None, B=None,
                           m: int | None = None, seed: int = 0, t_max: float | None = None,
                           z_samples: np.ndarray | None = None, c_k: float = 0.05,
                           b_tol: float = 1e-8) -> SteinIntegralReport:
    """A1, A2 and the entropy brackets from cross-fitted Stein conditional moments (B = C)."""
    quad = quad or QuadConfig()
    f = _as_samples(F, m, seed)
    mrows, d = f.shape
    C = _check_pd(np.eye(d) if C is None else C)
    if B is None:
        B = np.cov(f, rowvar=False).reshape(d, d) if not hasattr(F, "covariance") else F.covariance
    B = np.atleast_2d(B)
    if not np.allclose(B, C, atol=b_tol, rtol=0):
        raise HypothesisViolation("stein_integral_entropy requires Cov(F) = C")
    coupling = np.asarray(coupling, dtype=float).reshape(mrows, d, d)
    base = make_interpolation(f, 0.0, C, seed=seed, B=B, z_samples=z_samples)
    cinv = np.linalg.inv(C)
    mats = {"A1": cinv @ cinv, "A2": np.eye(d), "D": cinv}
    t, w, eps = quadrature_nodes(quad, t_max)
    full = t_max is None or t_max >= 1.0

    def run(tt, ww, fit_tail):
        per = {key: [] for key in mats}
        inf = {key: [] for key in mats}
        for tn in tt:
            p = base.at(tn)
            wts = stein_weights(p, coupling, centered_on="C")
            x = p.combined
            xa = np.vstack([x, math.sqrt(tn) * p.f_samples - math.sqrt(1.0 - tn) * p.z_samples])
            wa = np.vstack([wts, -wts])
            twin = np.concatenate([np.arange(mrows, 2 * mrows), np.arange(mrows)])[:, None]
            reg = KNNRegressor(xa, wa, stein_k(2 * mrows, d, tn, c_k))
            mh = reg.predict(xa, loo=True, degree=1, exclude=twin).reshape(2 * mrows, d)
            for key, M in mats.items():
                val = np.einsum("qi,ij,qj->q", wa, M, mh)
                # influence rows of E[m^T M m]: 2 W^T M m - m^T M m
                psi = 2.0 * val - np.einsum("qi,ij,qj->q", mh, M, mh)
                val = 0.5 * (val[:mrows] + val[mrows:])
                psi = 0.5 * (psi[:mrows] + psi[mrows:])
                # integrand t/(1-t) E[...] / 2 written as rows / (2t) with rows = t^2/(1-t) E[...]
                fac = tn * tn / (1.0 - tn)
                per[key].append(val * fac)
                inf[key].append(psi * fac)
        out = {}
        for key in mats:
            core, _, resid, integrand, tail = _integrate(tt, ww, per[key], quad, fit_tail)
            stat = _integrate(tt, ww, inf[key], quad, False)[1]
            out[key] = (core, stat, resid, integrand, tail)
        return out

    res = run(t, w, full)
    quad_err = {key: 0.0 for key in mats}
    if quad.quad_error:
        t2, w2, _ = quadrature_nodes(quad, t_max, n_nodes=max(3, quad.n_nodes // 2))
        res2 = run(t2, w2, False)
        quad_err = {key: abs(res[key][0] - res2[key][0]) for key in mats}
    vals, errs = {}, {}
    for key, (core, stat, resid, _, _) in res.items():
        vals[key] = core + resid / 2.0
        errs[key] = math.sqrt(stat ** 2 + quad_err[key] ** 2) + resid / 2.0
    ev = np.linalg.eigvalsh(C)
    b1 = (ev.min() * vals["A1"], ev.max() * vals["A1"])
    b2 = (vals["A2"] / ev.max(), vals["A2"] / ev.min())
    diag = {"eps": eps, "n_nodes": len(t), "t_max": 1.0 if full else t_max, "m": mrows,
            "tail_residual": res["D"][2], "stat_error": res["D"][1], "quad_error": quad_err["D"],
            "identity_case": bool(np.allclose(C, np.eye(d)))}
    return SteinIntegralReport(vals["A1"], vals["A2"], errs["A1"], errs["A2"], b1, b2,
                               vals["D"], errs["D"], diag)


def stein_integral_relative_entropy(F, coupling: np.ndarray, C=None, quad: QuadConfig | None = None,
                                    B=None, m: int | None = None, seed: int = 0, t_max: float | None = None,
                                    z_samples: np.ndarray | None = None) -> EntropyReport:
    """D(F || N(0, C)) for any C: the Stein integral against N(0, B) plus the Gaussian term.

    log(phi_B / phi_C) is quadratic, so its mean under F equals its mean
    under N(0, B) and D(F || N_C) = D(F || N_B) + D(N_B || N_C).
    """
    f = _as_samples(F, m, seed)
    d = f.shape[1]
    C = _check_pd(np.eye(d) if C is None else C)
    if B is None:
        B = np.cov(f, rowvar=False).reshape(d, d) if not hasattr(F, "covariance") else F.covariance
    B = _check_pd(B, "B")
    matched = t_max is not None and t_max < 1.0
    if matched and not np.allclose(B, C):
        # F_t would interpolate towards N(0, B), not towards the reference N(0, C)
        raise HypothesisViolation("matched-level Stein integral needs B = C")
    si = stein_integral_entropy(f, coupling, B, quad, B=B, seed=seed, t_max=t_max, z_samples=z_samples)
    c1, c2 = (0.0, 0.0) if matched else gaussian_kl_terms(B, C)
    diag = dict(si.diagnostics, A1=si.A1, A2=si.A2)
    return EntropyReport(si.value + c1 + c2, si.error, "stein-integral", (c1, c2), diag)


# ---------------------------------------------------------------------------
# direct estimator

def relative_entropy_direct(F, C=None, t0: float = 0.995, m: int | None = None, seed: int = 0,
                            m_query: int = 5000, z_samples: np.ndarray | None = None,
                            grid_ratio: int = 20) -> EntropyReport:
    """D(F_{t0} || Z) as the mean log ratio of a leave-one-out mixture density to phi_C."""
    if not 0.995 <= t0 < 1.0:
        raise ValueError("t0 must lie in [0.995, 1)")
    f = _as_samples(F, m, seed)
    mrows, d = f.shape
    if d > 2:
        raise ValueError("direct relative entropy is limited to d <= 2")
    C = _check_pd(np.eye(d) if C is None else C)
    p = make_interpolation(f, t0, C, seed=seed, B=np.eye(d), z_samples=z_samples)
    offsets = math.sqrt(1.0 - t0) * p.z_samples
    centers = math.sqrt(t0) * p.f_samples
    if d == 1:
        s = math.sqrt((1.0 - t0) * C[0, 0])
        ks = BinnedMixture1D(centers[:, 0], s, grid_ratio).sums(p.combined[:, 0], offsets[:, 0])
        y = p.combined
    else:
        q = np.arange(min(m_query, mrows))
        y = p.combined[q]
        ks = kernel_sums_direct(centers, (1.0 - t0) * C, y, self_offsets=offsets[q])
    fh, fse = ks.density()
    ok = fh > 0
    # second-order correction for the log of a noisy density estimate
    logf = np.log(np.where(ok, fh, 1.0)) + 0.5 * (fse / np.where(ok, fh, 1.0)) ** 2
    prec = np.linalg.inv(C)
    logphi = -0.5 * (d * math.log(2 * math.pi) + np.linalg.slogdet(C)[1]) \
        - 0.5 * np.einsum("qi,ij,qj->q", y, prec, y)
    r = (logf - logphi)[ok]
    value = float(r.mean())
    err = float(r.std(ddof=1) / math.sqrt(r.size))
    diag = {"t0": t0, "m": mrows, "queries": int(r.size), "dropped": int((~ok).sum())}
    return EntropyReport(value, err, "direct", (0.0, 0.0), diag)


# ---------------------------------------------------------------------------
# Fisher matrix and trace sandwich

@dataclass
class FisherEstimate:
    J: np.ndarray
    se: np.ndarray
    variant: str


def fisher_standardized(point: InterpolationPoint, variant: str = "rho", m_query: int | None = 4000,
                        score_rows=None) -> FisherEstimate:
    """J_st(F_t) = Gamma_t E[(rho + Gamma_t^{-1}F_t)(...)^T], or its rho-star form."""
    if point.t >= 1.0:
        raise ValueError("fisher_standardized needs t < 1")
    if variant not in ("rho", "rho_star"):
        raise ValueError("variant must be 'rho' or 'rho_star'")
    if score_rows is None:
        rows = None if point.d == 1 or m_query is None or m_query >= point.m else np.arange(m_query)
        score_rows = density_route_rows(point, rows, adaptive=True)
    y = point.combined[score_rows.rows]
    G = point.gamma_t
    rho, V = score_rows.rho.copy(), score_rows.cov.copy()
    bad = ~np.all(np.isfinite(rho), axis=1)
    rho[bad], V[bad] = 0.0, 0.0
    if variant == "rho":
        v = rho + y @ np.linalg.inv(G).T
        outer = v[:, :, None] * v[:, None, :] - V
        J_rows = np.einsum("ij,qjk->qik", G, outer)
    else:
        vs = rho @ G.T + y
        Vs = np.einsum("ij,qjk,lk->qil", G, V, G)
        outer = vs[:, :, None] * vs[:, None, :] - Vs
        J_rows = np.einsum("qij,jk->qik", outer, np.linalg.inv(G))
    n = J_rows.shape[0]
    return FisherEstimate(J_rows.mean(axis=0), J_rows.std(axis=0, ddof=1) / math.sqrt(n), variant)


@dataclass
class SandwichResult:
    lower: float
    middle: float
    upper: float
    lower_star: float
    upper_star: float
    se: float

    def holds(self, n_se: float = 3.0) -> bool:
        tol = n_se * self.se
        return (self.lower <= self.middle + tol and self.middle <= self.upper + tol
                and self.lower_star <= self.middle + tol and self.middle <= self.upper_star + tol)


def trace_sandwich_check(point: InterpolationPoint, m_query: int | None = 4000, b_tol: float = 1e-8,
                         score_rows=None) -> SandwichResult:
    """Eigenvalue brackets of tr J_st by the rho and rho-star second moments (B = C)."""
    if not np.allclose(point.B, point.C, atol=b_tol, rtol=0):
        raise HypothesisViolation("trace sandwich requires B = C")
    if score_rows is None:
        rows = None if point.d == 1 or m_query is None or m_query >= point.m else np.arange(m_query)
        score_rows = density_route_rows(point, rows, adaptive=True)
    y = point.combined[score_rows.rows]
    C = point.C
    cinv = np.linalg.inv(C)
    rho, V = score_rows.rho.copy(), score_rows.cov.copy()
    bad = ~np.all(np.isfinite(rho), axis=1)
    rho[bad], V[bad] = 0.0, 0.0
    a = rho + y @ cinv.T
    # same corrected second-moment estimate M = E[a a^T] feeds every term
    M_rows = a[:, :, None] * a[:, None, :] - V
    M = M_rows.mean(axis=0)
    s_rho = float(np.trace(M))
    s_star = float(np.trace(C @ M @ C))
    middle = float(np.trace(C @ M))
    ev = np.linalg.eigvalsh(C)
    se = float(np.einsum("ij,qji->q", C, M_rows).std(ddof=1) / math.sqrt(len(a)))
    return SandwichResult(ev.min() * s_rho, middle, ev.max() * s_rho,
                          s_star / ev.max(), s_star / ev.min(), se)
