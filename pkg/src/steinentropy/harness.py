"""Benchmark families, the per-n roadmap pipeline and CSV emission."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .bounds import (BoundInputs, bound_entropy_1d, bound_entropy_multi, delta_fourth, ks_to_gaussian,
                     stein_discrepancy, stein_discrepancy_conditioned, stein_l1, stein_tv_bound, sum_example,
                     tau_abs_moments, tv_shift_fit, uniform_base)
from .chaos import ChaosElement, ChaoticVector, MultiIndex, sample_batch
from .entropy import EntropyReport, QuadConfig, de_bruijn_entropy, gaussian_kl_closed_form
from .errors import HypothesisViolation, UnreliableRegionError
from .malliavin import MIN_REGRESSION_SAMPLES, expected_det_gamma, stein_coupling_exact
from .smoothing import MIN_STEIN_SAMPLES, make_interpolation, score_density_route, score_stein_route

FAMILIES = ("gaussian-control", "single-chaos-sequence", "multi-chaos-vector", "iid-sum")


# ---------------------------------------------------------------------------
# configuration

_DEFAULTS = {
    "family": "single-chaos-sequence",
    "q": "2",
    "profile": "flat",
    "ns": "1,2,4,8,16,32,64",
    "d": "1",
    "orders": "2,2",
    "samples": "100000",
    "seed": "0",
    "eta": "2",
    "t0": "0.995",
    "quad_nodes": "24",
    "eps": "",
    "m_query": "4000",
    "score_ts": "0.3,0.5,0.8",
    "score_points": "41",
    "limit_cov": "",
    "require_gates": "",
    "base": "uniform",
    "out": "",
}


@dataclass
class ExperimentConfig:
    family: str = "single-chaos-sequence"
    q: int = 2
    profile: str = "flat"
    ns: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    d: int = 1
    orders: tuple[int, ...] = (2, 2)
    samples: int = 100_000
    seed: int = 0
    eta: float = 2.0
    t0: float = 0.995
    quad_nodes: int = 24
    eps: float | None = None
    m_query: int = 4000
    score_ts: tuple[float, ...] = (0.3, 0.5, 0.8)
    score_points: int = 41
    limit_cov: tuple[float, ...] | None = None
    require_gates: tuple[str, ...] = ()
    base: str = "uniform"
    out: str = ""
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.samples < MIN_REGRESSION_SAMPLES:
            raise ValueError(f"samples must be >= {MIN_REGRESSION_SAMPLES}")
        if not 0.995 <= self.t0 < 1.0:
            raise ValueError("t0 must lie in [0.995, 1)")
        bad = set(self.require_gates) - {"gate_1d", "gate_multi", "density_exists"}
        if bad:
            raise ValueError(f"unknown gates {sorted(bad)}")

    def echo(self) -> str:
        keys = sorted(self.raw)
        return "".join(f"{k} = {self.raw[k]}\n" for k in keys)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    raw = dict(_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in _DEFAULTS:
            raise ValueError(f"config line {lineno}: unknown key {k!r}")
        raw[k] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = str(v)
    return ExperimentConfig(
        family=raw["family"], q=int(raw["q"]), profile=raw["profile"], ns=_ints(raw["ns"]), d=int(raw["d"]),
        orders=_ints(raw["orders"]), samples=int(raw["samples"]), seed=int(raw["seed"]),
        eta=float(raw["eta"]), t0=float(raw["t0"]), quad_nodes=int(raw["quad_nodes"]),
        eps=float(raw["eps"]) if raw["eps"] else None, m_query=int(raw["m_query"]),
        score_ts=_floats(raw["score_ts"]), score_points=int(raw["score_points"]),
        limit_cov=_floats(raw["limit_cov"]) if raw["limit_cov"] else None,
        require_gates=tuple(g.strip() for g in raw["require_gates"].split(",") if g.strip()),
        base=raw["base"], out=raw["out"], raw=raw)


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    text = ""
    if path:
        with open(path) as fh:
            text = fh.read()
    return parse_config_text(text, overrides)


# ---------------------------------------------------------------------------
# benchmark families

def profile_coefficients(profile: str, n: int) -> np.ndarray:
    if profile == "flat":
        return np.ones(n)
    if profile == "geometric":
        return 2.0 ** -np.arange(n)
    raise ValueError(f"unknown coefficient profile {profile!r}")


def single_chaos(q: int, a: np.ndarray) -> ChaosElement:
    """sum_i a_i H_q(G_i), scaled to unit variance."""
    n = len(a)
    norm = math.sqrt(math.factorial(q) * float(np.sum(a * a)))
    terms = {MultiIndex(((i + 1, q),)): float(a[i]) / norm for i in range(n)}
    return ChaosElement(n, terms)


def multi_chaos(orders: tuple[int, ...], n: int) -> ChaoticVector:
    """d components of orders q_1 <= ... <= q_d on disjoint blocks of n coordinates each."""
    orders = tuple(sorted(orders))
    d = len(orders)
    dim = d * n
    comps = []
    for j, q in enumerate(orders):
        terms = {MultiIndex(((j * n + i + 1, q),)): 1.0 / math.sqrt(math.factorial(q) * n) for i in range(n)}
        comps.append(ChaosElement(dim, terms))
    return ChaoticVector(comps, orders=orders)


def build_benchmark(family: str, params: ExperimentConfig | dict) -> list[ChaoticVector]:
    """One vector per n in ``params.ns`` (the iid-sum family is handled by the roadmap directly)."""
    cfg = params if isinstance(params, ExperimentConfig) else parse_config_text("", {**params, "family": family})
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    out = []
    for n in cfg.ns:
        if family == "gaussian-control":
            d = cfg.d
            comps = [ChaosElement.hermite(1, j + 1, d) for j in range(d)]
            out.append(ChaoticVector(comps, orders=[1] * d))
        elif family == "single-chaos-sequence":
            out.append(ChaoticVector([single_chaos(cfg.q, profile_coefficients(cfg.profile, n))], orders=[cfg.q]))
        elif family == "multi-chaos-vector":
            out.append(multi_chaos(cfg.orders, n))
        else:
            raise ValueError("iid-sum samples are drawn from a base density, not a chaos vector")
    return out


# ---------------------------------------------------------------------------
# roadmap

SUMMARY_COLUMNS = (
    "n", "d", "delta_moment", "delta_identity", "stein_discrepancy", "stein_discrepancy_conditioned",
    "stein_discrepancy_conditioned_se", "tau_moment_max", "stein_l1", "stein_tv_bound", "kappa_hat",
    "kappa_1d_hat", "alpha_hat", "shift_envelope_holds", "entropy", "entropy_error", "entropy_t_max",
    "entropy_tail_residual", "correction_trace", "correction_logdet", "gate_1d", "bound_1d", "gate_multi",
    "bound_multi", "pinsker_tv", "kl_limit", "tv_assembly", "ks", "det_gamma_mean", "det_gamma_verdict",
    "stage_a", "stage_b", "stage_c", "stage_d", "stage_entropy", "failures",
)


@dataclass
class RoadmapRow:
    n: int
    values: dict
    report: EntropyReport | None = None
    score_grid: tuple[list[str], list[list]] | None = None
    failures: list[str] = field(default_factory=list)


def _limit_cov(cfg: ExperimentConfig, d: int) -> np.ndarray:
    if cfg.limit_cov is None:
        return np.eye(d)
    v = np.asarray(cfg.limit_cov, dtype=float)
    return np.diag(v) if v.size == d else v.reshape(d, d)


def _score_grid(f: np.ndarray, coupling: np.ndarray, C: np.ndarray, cfg: ExperimentConfig, seed: int):
    d = f.shape[1]
    s = np.linspace(-4.0, 4.0, cfg.score_points)
    pts = s[:, None] * np.ones((1, d)) / math.sqrt(d)
    header = ["t"] + [f"x{j + 1}" for j in range(d)] + [f"rho_density_{j + 1}" for j in range(d)] \
        + [f"rho_stein_{j + 1}" for j in range(d)]
    rows = []
    base = make_interpolation(f, 0.0, C, seed=seed, B=C)
    for t in cfg.score_ts:
        p = base.at(t)
        st = score_stein_route(p, coupling, pts)
        for i, x in enumerate(pts):
            try:
                dv = list(score_density_route(p, x[None, :]).value[0])
            except (UnreliableRegionError, ValueError):
                dv = [None] * d
            rows.append([t] + list(x) + dv + list(st[i]))
    return header, rows


def _iid_sum_row(cfg: ExperimentConfig, n: int, seed: int) -> RoadmapRow:
    if cfg.base != "uniform":
        raise ValueError("iid-sum supports base = uniform")
    base = uniform_base()
    ex = sum_example(base, n)
    draws = base.sampler(cfg.samples * n, seed).reshape(cfg.samples, n)
    s = draws.sum(axis=1) / math.sqrt(n)
    vals = {k: None for k in SUMMARY_COLUMNS}
    vals.update({"n": n, "d": 1, "stein_tv_bound": ex.tv_bound, "ks": ks_to_gaussian(s),
                 "stage_a": "ok", "stage_b": "skipped", "stage_c": "skipped", "stage_d": "ok",
                 "stein_discrepancy": ex.var_tau / n, "stage_entropy": "skipped", "failures": ""})
    return RoadmapRow(n, vals)


def run_roadmap_step(vec: ChaoticVector, n: int, cfg: ExperimentConfig, index: int) -> RoadmapRow:
    seed = rng.derive_seed(cfg.seed, index)
    d = vec.d
    vals: dict = {k: None for k in SUMMARY_COLUMNS}
    vals.update({"n": n, "d": d})
    failures: list[str] = []
    row = RoadmapRow(n, vals, failures=failures)

    def stage(name, fn):
        try:
            fn()
            vals[name] = "ok"
        except Exception as exc:  # recorded per stage; the run continues
            vals[name] = "failed"
            failures.append(f"{name}:{type(exc).__name__}:{_one_line(exc)}")

    batch = sample_batch(vec, cfg.samples, seed)
    f = batch.f_matrix(d)
    C = vec.covariance
    state: dict = {}

    def a():
        T = stein_coupling_exact(vec)
        state["T"] = T
        state["T_vals"] = T.evaluate(batch.gaussians)
        if d == 1:
            l1, _ = stein_l1(state["T_vals"][:, 0, 0])
            vals["stein_l1"] = l1
            vals["stein_tv_bound"] = stein_tv_bound(l1)

    def b():
        mom = tau_abs_moments(vec, cfg.eta, batch, state["T"])
        state["tau_moments"] = mom
        vals["tau_moment_max"] = float(mom.max())

    def c():
        if d > 2:
            raise ValueError("shift fit is limited to d <= 2")
        sf = tv_shift_fit(f)
        state["shift"] = sf
        vals.update({"kappa_hat": sf.kappa, "kappa_1d_hat": sf.kappa_1d, "alpha_hat": sf.alpha,
                     "shift_envelope_holds": sf.dominates})

    def dd():
        dm, di = delta_fourth(vec) if vec.chaotic else (0.0, 0.0)
        vals["delta_moment"], vals["delta_identity"] = dm, di
        vals["stein_discrepancy"] = stein_discrepancy(vec, state["T"])
        cd, cse = stein_discrepancy_conditioned(f, state["T_vals"], C)
        vals["stein_discrepancy_conditioned"], vals["stein_discrepancy_conditioned_se"] = cd, cse

    stage("stage_a", a)
    stage("stage_b", b) if "T" in state else _skip(vals, failures, "stage_b")
    stage("stage_c", c)
    stage("stage_d", dd) if "T" in state else _skip(vals, failures, "stage_d")

    def ent():
        quad = QuadConfig(n_nodes=cfg.quad_nodes, eps=cfg.eps, eta=cfg.eta,
                          delta=vals["stein_discrepancy"],
                          alpha=state["shift"].alpha if "shift" in state else 0.5)
        rep = de_bruijn_entropy(f, C, quad, B=C, seed=seed, m_query=cfg.m_query)
        row.report = rep
        vals.update({"entropy": rep.relative_entropy, "entropy_error": rep.error,
                     "entropy_t_max": rep.diagnostics["t_max"], "entropy_tail_residual": rep.diagnostics["tail_residual"],
                     "correction_trace": rep.correction_terms[0], "correction_logdet": rep.correction_terms[1],
                     "pinsker_tv": rep.pinsker_tv})

    stage("stage_entropy", ent)

    # bounds, only inside their gates
    if vals["stein_discrepancy"] is not None and "tau_moments" in state:
        sf = state.get("shift")
        for gate, fn, kap in (("gate_1d", bound_entropy_1d, getattr(sf, "kappa_1d", None)),
                              ("gate_multi", bound_entropy_multi, getattr(sf, "kappa", None))):
            if kap is None or (gate == "gate_1d" and d != 1):
                vals[gate] = False
                continue
            inp = BoundInputs(vals["stein_discrepancy"], cfg.eta, sf.alpha, kap, state["tau_moments"], C)
            vals[gate] = inp.gate_1d if gate == "gate_1d" else inp.gate_multi
            if vals[gate]:
                try:
                    vals["bound_" + gate[5:]] = fn(inp)
                except HypothesisViolation as exc:
                    vals[gate] = False
                    failures.append(f"{gate}:{_one_line(exc)}")
    lim = _limit_cov(cfg, d)
    kl = max(gaussian_kl_closed_form(lim, C), 0.0)
    vals["kl_limit"] = kl
    if vals["entropy"] is not None:
        vals["tv_assembly"] = (math.sqrt(max(vals["entropy"], 0.0)) + math.sqrt(kl)) / math.sqrt(2.0)
    sd = np.sqrt(np.diag(C))
    vals["ks"] = max(ks_to_gaussian(f[:, j] / sd[j]) for j in range(d))
    if d <= 3:
        est, _, verdict = expected_det_gamma(vec, exact=True)
        vals["det_gamma_mean"], vals["det_gamma_verdict"] = est, verdict
    for g in cfg.require_gates:
        ok = vals["det_gamma_verdict"] == "density exists" if g == "density_exists" else bool(vals.get(g))
        if not ok:
            failures.append(f"{g}:gate not satisfied")
    if "T_vals" in state and d <= 3 and cfg.samples >= MIN_STEIN_SAMPLES:
        try:
            row.score_grid = _score_grid(f, state["T_vals"], C, cfg, seed)
        except Exception as exc:
            failures.append(f"score_grid:{type(exc).__name__}:{_one_line(exc)}")
    vals["failures"] = ";".join(failures)
    return row


def _skip(vals, failures, name):
    vals[name] = "skipped"
    failures.append(f"{name}:skipped after stage_a failure")


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split()).replace(",", " ").replace(";", " ")


def run_roadmap(cfg: ExperimentConfig) -> list[RoadmapRow]:
    if cfg.family == "iid-sum":
        return [_iid_sum_row(cfg, n, rng.derive_seed(cfg.seed, i)) for i, n in enumerate(cfg.ns)]
    vecs = build_benchmark(cfg.family, cfg)
    return [run_roadmap_step(v, n, cfg, i) for i, (v, n) in enumerate(zip(vecs, cfg.ns))]


# ---------------------------------------------------------------------------
# output

def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path: str, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(fmt(v) for v in r) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def emit_outputs(rows: list[RoadmapRow], out_dir: str, cfg: ExperimentConfig | None = None) -> list[str]:
    """summary.csv, fisher_curve_<n>.csv, score_grid_<n>.csv, config.echo and failures.txt."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror}") from exc
    written = []
    p = os.path.join(out_dir, "summary.csv")
    _write_csv(p, SUMMARY_COLUMNS, [[r.values.get(k) for k in SUMMARY_COLUMNS] for r in rows])
    written.append(p)
    for r in rows:
        if r.report is not None and r.report.fisher_curve is not None:
            header, data = r.report.fisher_curve.csv_rows()
            p = os.path.join(out_dir, f"fisher_curve_{r.n}.csv")
            _write_csv(p, header, data)
            written.append(p)
        if r.score_grid is not None:
            p = os.path.join(out_dir, f"score_grid_{r.n}.csv")
            _write_csv(p, *r.score_grid)
            written.append(p)
    if cfg is not None:
        p = os.path.join(out_dir, "config.echo")
        with open(p, "w") as fh:
            fh.write(cfg.echo())
        written.append(p)
    p = os.path.join(out_dir, "failures.txt")
    with open(p, "w") as fh:
        for r in rows:
            for item in r.failures:
                fh.write(f"n={r.n},{item}\n")
    written.append(p)
    return written


def failure_list(rows: list[RoadmapRow]) -> list[str]:
    return [f"n={r.n},{item}" for r in rows for item in r.failures]
