"""Command line entry point: eval, entropy, roadmap and check."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .harness import build_benchmark, emit_outputs, failure_list, fmt, load_config, run_roadmap


def _overrides(args) -> dict:
    return {"seed": args.seed, "samples": args.samples, "out": args.out}


def _vector(cfg):
    vecs = build_benchmark(cfg.family, cfg)
    return vecs[-1], cfg.ns[-1]


def _print_record(items: dict) -> None:
    for k, v in items.items():
        if isinstance(v, np.ndarray):
            v = " ".join(fmt(x) for x in v.ravel())
        print(f"{k}={fmt(v) if not isinstance(v, str) else v}")


def cmd_eval(cfg) -> int:
    from .bounds import delta_fourth, stein_discrepancy, tau_abs_moments
    from .chaos import sample_batch
    from .malliavin import expected_det_gamma, stein_coupling_exact

    vec, n = _vector(cfg)
    T = stein_coupling_exact(vec)
    batch = sample_batch(vec, cfg.samples, cfg.seed)
    items = {"family": cfg.family, "n": n, "d": vec.d, "covariance": vec.covariance}
    if vec.chaotic:
        dm, di = delta_fourth(vec)
        items.update({"delta_moment": dm, "delta_identity": di})
    items["stein_discrepancy"] = stein_discrepancy(vec, T)
    items["tau_moments"] = tau_abs_moments(vec, cfg.eta, batch, T)
    est, se, verdict = expected_det_gamma(vec, batch)
    items.update({"det_gamma_mean": est, "det_gamma_se": se, "det_gamma_verdict": verdict})
    _print_record(items)
    return 0


def cmd_entropy(cfg, method: str) -> int:
    from .chaos import sample_batch
    from .entropy import QuadConfig, de_bruijn_entropy, relative_entropy_direct, stein_integral_entropy
    from .malliavin import stein_coupling_exact

    vec, n = _vector(cfg)
    batch = sample_batch(vec, cfg.samples, cfg.seed)
    f = batch.f_matrix(vec.d)
    quad = QuadConfig(n_nodes=cfg.quad_nodes, eps=cfg.eps, eta=cfg.eta)
    C = vec.covariance
    if method == "de-bruijn":
        rep = de_bruijn_entropy(f, C, quad, B=C, seed=cfg.seed, m_query=cfg.m_query)
    elif method == "direct":
        rep = relative_entropy_direct(f, C, t0=cfg.t0, seed=cfg.seed)
    else:
        T = stein_coupling_exact(vec).evaluate(batch.gaussians)
        rep = stein_integral_entropy(f, T, C, quad, B=C, seed=cfg.seed).report()
    sys.stdout.write(f"n={n}\n" + rep.to_record())
    return 0


def cmd_roadmap(cfg) -> int:
    rows = run_roadmap(cfg)
    if cfg.out:
        emit_outputs(rows, cfg.out, cfg)
    fails = failure_list(rows)
    for item in fails:
        print(f"FAIL {item}", file=sys.stderr)
    return 1 if fails else 0


def cmd_check(cfg) -> int:
    """Fast invariant suite on the configured vector."""
    from .bounds import delta_fourth, stein_discrepancy
    from .chaos import sample_batch
    from .malliavin import integration_by_parts_exact, integration_by_parts_sides, stein_coupling_exact

    vec, _ = _vector(cfg)
    results = []
    T = stein_coupling_exact(vec)
    C = vec.covariance
    results.append(("tau_mean_is_covariance", bool(np.allclose(T.mean(), C, atol=1e-12))))
    if vec.chaotic:
        dm, di = delta_fourth(vec)
        results.append(("delta_identity", abs(dm - di) <= 1e-10 * max(1.0, abs(dm))))
        results.append(("discrepancy_below_delta", stein_discrepancy(vec, T) <= di + 1e-10))
    batch = sample_batch(vec, cfg.samples, cfg.seed)
    for name, g, gp in (("tanh", np.tanh, lambda x: 1 - np.tanh(x) ** 2), ("sin", np.sin, np.cos)):
        lhs, rhs, se = integration_by_parts_sides(vec[0], g, gp, batch)
        results.append((f"stein_identity_{name}", abs(lhs - rhs) <= 5 * se + 1e-12))
    # polynomial test functions have heavy-tailed sample errors; check them in closed form
    for p in (1, 2, 3):
        lhs, rhs = integration_by_parts_exact(vec[0], p)
        results.append((f"stein_identity_power{p}", abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))))
    bad = [n for n, ok in results if not ok]
    for n, ok in results:
        print(f"{n}={'pass' if ok else 'fail'}")
    for n in bad:
        print(f"FAIL {n}", file=sys.stderr)
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steinentropy", description="Entropic CLT diagnostics for Wiener chaos")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("eval", "single-vector diagnostics"), ("entropy", "one entropy computation"),
                           ("roadmap", "full sequence with CSV output"), ("check", "invariant suite")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--samples", type=int)
        s.add_argument("--out", help="output directory")
        if name == "entropy":
            s.add_argument("--method", choices=("de-bruijn", "direct", "stein-integral"), default="de-bruijn")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "eval":
        return cmd_eval(cfg)
    if args.command == "entropy":
        return cmd_entropy(cfg, args.method)
    if args.command == "roadmap":
        return cmd_roadmap(cfg)
    return cmd_check(cfg)


if __name__ == "__main__":
    sys.exit(main())
