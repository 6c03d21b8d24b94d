import csv
import math
import os

import numpy as np
import pytest

from steinentropy.bounds import delta_fourth
from steinentropy.cli import main
from steinentropy.harness import (SUMMARY_COLUMNS, RoadmapRow, build_benchmark, emit_outputs, fmt,
                                  parse_config_text, run_roadmap)

SMALL = {"samples": 2000, "ns": "1,2", "quad_nodes": 6, "m_query": 300, "score_points": 5, "score_ts": "0.5"}


def _cfg(**kw):
    return parse_config_text("", {**SMALL, **kw})


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# configuration ----------------------------------------------------------------------

def test_config_parsing():
    cfg = parse_config_text("family = multi-chaos-vector  # comment\norders = 2,3\n\nns = 1, 4\n")
    assert cfg.family == "multi-chaos-vector" and cfg.orders == (2, 3) and cfg.ns == (1, 4)
    assert cfg.samples == 100_000 and cfg.eps is None
    assert "orders = 2,3\n" in cfg.echo()
    assert parse_config_text("seed = 3", {"seed": 9}).seed == 9


@pytest.mark.parametrize("text", ["bogus = 1", "family = nope", "samples = 10", "t0 = 0.9",
                                  "require_gates = gate_x", "no equals sign"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("family = nope\n")
    assert main(["eval", "--config", str(p)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["eval", "--config", str(tmp_path / "missing.cfg")]) == 2


# benchmarks -----------------------------------------------------------------------------

def test_build_benchmark_examples():
    g = build_benchmark("gaussian-control", {"d": 2, "ns": "1"})[0]
    assert delta_fourth(g) == pytest.approx((0.0, 0.0), abs=1e-12)
    flat = build_benchmark("single-chaos-sequence", {"ns": "1,2"})
    assert delta_fourth(flat[0])[1] == pytest.approx(12.0)
    assert delta_fourth(flat[1])[1] == pytest.approx(6.0)
    geo = build_benchmark("single-chaos-sequence", {"ns": "3", "profile": "geometric"})[0]
    assert geo.covariance[0, 0] == pytest.approx(1.0)
    multi = build_benchmark("multi-chaos-vector", {"ns": "2", "orders": "3,2"})[0]
    assert multi.orders == (2, 3)
    np.testing.assert_allclose(multi.covariance, np.eye(2), atol=1e-12)
    with pytest.raises(ValueError):
        build_benchmark("iid-sum", {"ns": "1"})


def test_iid_sum_rows():
    rows = run_roadmap(_cfg(family="iid-sum", ns="100"))
    assert rows[0].values["stein_tv_bound"] == pytest.approx(0.08944, abs=1e-5)
    assert rows[0].values["stage_entropy"] == "skipped"


# output --------------------------------------------------------------------------------

def test_fmt():
    assert fmt(None) == "" and fmt(True) == "true" and fmt(np.int64(3)) == "3"
    assert float(fmt(0.1 + 0.2)) == 0.1 + 0.2
    assert fmt(1 / 3) == "0.33333333333333331"


def test_emit_empty(tmp_path):
    written = emit_outputs([], str(tmp_path))
    with open(tmp_path / "summary.csv") as fh:
        assert fh.read() == ",".join(SUMMARY_COLUMNS) + "\n"
    assert (tmp_path / "failures.txt").read_text() == ""
    assert len(written) == 2


def test_emit_row_with_failure(tmp_path):
    vals = {k: None for k in SUMMARY_COLUMNS}
    vals.update({"n": 1, "d": 1, "gate_1d": False})
    emit_outputs([RoadmapRow(1, vals, failures=["stage_c:ValueError:x"])], str(tmp_path))
    row = _read(tmp_path / "summary.csv")[0]
    assert row["gate_1d"] == "false" and row["bound_1d"] == ""
    assert (tmp_path / "failures.txt").read_text() == "n=1,stage_c:ValueError:x\n"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = _cfg(seed=4)
    out = tmp_path_factory.mktemp("run")
    rows = run_roadmap(cfg)
    emit_outputs(rows, str(out), cfg)
    return cfg, rows, out


def test_roadmap_outputs(small_run):
    cfg, rows, out = small_run
    summary = _read(out / "summary.csv")
    assert len(summary) == len(cfg.ns)
    assert list(summary[0].keys()) == list(SUMMARY_COLUMNS)
    assert [int(r["n"]) for r in summary] == [1, 2]
    for n in cfg.ns:
        curve = _read(out / f"fisher_curve_{n}.csv")
        assert len(curve) == cfg.quad_nodes
        grid = _read(out / f"score_grid_{n}.csv")
        assert len(grid) == len(cfg.score_ts) * cfg.score_points
    assert (out / "config.echo").read_text() == cfg.echo()


def test_roadmap_gate_honesty(small_run):
    _, rows, out = small_run
    for r in _read(out / "summary.csv"):
        for gate, col in (("gate_1d", "bound_1d"), ("gate_multi", "bound_multi")):
            if r[gate] != "true":
                assert r[col] == ""
        assert float(r["delta_identity"]) == pytest.approx(12.0 / int(r["n"]))
    # entropy stays above -3 errors and Pinsker is recomputable
    for r in rows:
        v = r.values
        assert v["entropy"] >= -3 * v["entropy_error"]
        assert v["pinsker_tv"] == pytest.approx(math.sqrt(max(v["entropy"], 0) / 2))


def test_roadmap_deterministic(small_run, tmp_path):
    cfg, _, out = small_run
    emit_outputs(run_roadmap(cfg), str(tmp_path), cfg)
    for name in os.listdir(out):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes()


# CLI --------------------------------------------------------------------------------------

def _write_cfg(tmp_path, **kw):
    p = tmp_path / "run.cfg"
    p.write_text("".join(f"{k} = {v}\n" for k, v in {**SMALL, **kw}.items()))
    return str(p)


def test_cli_eval(tmp_path, capsys):
    assert main(["eval", "--config", _write_cfg(tmp_path, ns="1"), "--seed", "2"]) == 0
    rec = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert float(rec["delta_identity"]) == pytest.approx(12.0)
    assert rec["det_gamma_verdict"] == "density exists"


@pytest.mark.parametrize("method", ["de-bruijn", "direct", "stein-integral"])
def test_cli_entropy(tmp_path, capsys, method):
    assert main(["entropy", "--config", _write_cfg(tmp_path, ns="2"), "--method", method]) == 0
    out = capsys.readouterr().out
    assert out.startswith("n=2\n") and f"method={method}\n" in out
    val = float(out.split("relative_entropy=")[1].split("\n")[0])
    assert np.isfinite(val)


def test_cli_check(tmp_path, capsys):
    assert main(["check", "--config", _write_cfg(tmp_path, ns="2")]) == 0
    out = capsys.readouterr().out
    assert "tau_mean_is_covariance=pass" in out and "delta_identity=pass" in out
    assert "stein_identity_power3=pass" in out


def test_cli_roadmap_and_required_gate(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, ns="1")
    out_dir = tmp_path / "out"
    assert main(["roadmap", "--config", cfg, "--out", str(out_dir)]) == 0
    assert (out_dir / "summary.csv").exists()
    # Delta = 12 sits outside both gates
    bad = _write_cfg(tmp_path, ns="1", require_gates="gate_1d")
    assert main(["roadmap", "--config", bad, "--out", str(tmp_path / "o2")]) == 1
    assert "gate_1d:gate not satisfied" in capsys.readouterr().err
    assert "gate_1d:gate not satisfied" in (tmp_path / "o2" / "failures.txt").read_text()
