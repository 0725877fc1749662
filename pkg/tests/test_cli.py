import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from orlicz_ot.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(*argv):
    return main([str(a) for a in argv])


def read_sweep_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_solve_atom_mixture(tmp_path):
    out = tmp_path / "plan.csv"
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml", "--out", out, "-q") == 0
    rep = json.loads(out.with_suffix(".json").read_text())
    assert rep["primal_value"] == pytest.approx(0.125, abs=1e-9)
    assert rep["converged"]
    for key in ("config_sha256", "seed", "version"):
        assert key in rep
    assert out.read_text().startswith("# config_sha256=")


def test_solve_prints_report_without_out(capsys):
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml") == 0
    text = capsys.readouterr().out
    payload = json.loads(text[text.index("{"):])
    assert payload["primal_value"] == pytest.approx(0.125, abs=1e-9)


def test_solve_missing_file(capsys):
    assert run("solve", "--problem", "does-not-exist.toml") == 1
    assert "error" in capsys.readouterr().err


def test_solve_exact_mode(tmp_path):
    report = tmp_path / "r.json"
    assert run("solve", "--problem", CONFIGS / "shifted_uniform.toml", "--mode", "exact", "--report", report,
               "-q") == 0
    rep = json.loads(report.read_text())
    assert rep["gap"] is None
    h = 1.0 / 16
    assert rep["primal_value"] == pytest.approx(0.25 + h * h / 6, abs=1e-12)


def test_solve_set_override(tmp_path):
    report = tmp_path / "r.json"
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml", "--set", "cells=4", "--set", "gamma=2.0",
               "--report", report, "-q") == 0
    rep = json.loads(report.read_text())
    assert rep["shape"] == [4, 4] and rep["gamma"] == 2.0
    # the single admissible entry scales with gamma: 2 * (1/2) (1 + h)^-2 at h = 0.5
    assert rep["primal_value"] == pytest.approx(2.0 * 0.5 / 1.5 ** 2, abs=1e-9)


def test_solve_nonconvergence_exit_code(tmp_path):
    report = tmp_path / "r.json"
    code = run("solve", "--problem", CONFIGS / "shifted_uniform.toml", "--set", "solver.max_sweeps=1",
               "--report", report, "-q")
    assert code == 2
    assert json.loads(report.read_text())["converged"] is False


def test_malformed_override_is_config_error():
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml", "--set", "nokey") == 1


def test_sweep_fixture_gap_monotone(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--config", CONFIGS / "sweep_entropy.toml", "--out", out, "-q") == 0
    rows = read_sweep_csv(out)
    assert len(rows) == 5
    gaps = np.array([float(r["gap"]) for r in rows])
    assert np.all(np.diff(gaps) <= 1e-6)
    assert all(float(r["seconds"]) == 0.0 for r in rows)
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["coupling_verdict"] == "pass" and summary["gap_nonincreasing"]


def test_sweep_stalled_schedule_fails(tmp_path):
    out, summary = tmp_path / "s.csv", tmp_path / "s.json"
    assert run("sweep", "--config", CONFIGS / "stalled_schedule.toml", "--out", out, "--summary", summary,
               "-q") == 0
    data = json.loads(summary.read_text())
    assert data["coupling_verdict"] == "fail"
    gaps = np.array([float(r["gap"]) for r in read_sweep_csv(out)])
    assert np.all(gaps >= 0.5 * gaps[0])


def test_sweep_empty_schedule(tmp_path):
    cfg = tmp_path / "empty.toml"
    text = (CONFIGS / "sweep_entropy.toml").read_text().replace(
        "schedule = [[3, 10.0], [4, 1.0], [5, 0.1], [6, 0.01], [7, 0.001]]", "schedule = []")
    cfg.write_text(text.replace('problem = "shifted_uniform.toml"', f'problem = "{CONFIGS / "shifted_uniform.toml"}"'))
    assert run("sweep", "--config", cfg, "-q") == 1


def test_sweep_csv_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ("--set", "schedule=[[2, 0.1], [3, 0.01]]", "-q")
    assert run("sweep", "--config", CONFIGS / "sweep_entropy.toml", "--out", a, *args) == 0
    assert run("sweep", "--config", CONFIGS / "sweep_entropy.toml", "--out", b, "--workers", 2, *args) == 0
    assert a.read_bytes() == b.read_bytes()


def test_norm_power(capsys, tmp_path):
    out = tmp_path / "n.json"
    assert run("norm", "--config", CONFIGS / "norm_power.toml", "--out", out) == 0
    assert capsys.readouterr().out.strip() == "1.414214"
    assert json.loads(out.read_text())["norm"] == pytest.approx(2 ** 0.5, rel=1e-11)


def test_norm_zero_function(capsys):
    assert run("norm", "--config", CONFIGS / "norm_power.toml", "--set", "function.constant=0.0") == 0
    assert float(capsys.readouterr().out) == 0.0


def test_norm_entropy_constant_e(capsys):
    assert run("norm", "--config", CONFIGS / "norm_power.toml", "--set", 'regularizer={family="entropy"}',
               "--set", "function.constant=2.718281828459045") == 0
    assert capsys.readouterr().out.strip() == "1.541655"


def test_norm_bad_config(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('regularizer = { family = "power", p = 2.0 }\nfunction = {}\n')
    assert run("norm", "--config", cfg) == 1


def write_verify(tmp_path, plan, extra=""):
    cfg = tmp_path / "verify.toml"
    cfg.write_text(f'problem = "{CONFIGS / "atom_mixture.toml"}"\nplan = "{plan}"\n{extra}')
    return cfg


def test_verify_roundtrip(tmp_path, capsys):
    plan = tmp_path / "plan.csv"
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml", "--out", plan, "-q") == 0
    out = tmp_path / "v.json"
    code = run("verify", "--config", write_verify(tmp_path, plan), "--out", out)
    data = json.loads(out.read_text())
    status = {r["check"]: r["status"] for r in data["checks"]}
    assert status["plan:marginal_residual"] == "PASS"
    assert status["plan:positivity"] == "PASS"
    assert status["invariant:weak_duality"] == "PASS"
    assert status["existence:density_floor"] == "WARN"
    assert code == 0 and data["passed"]
    assert "plan:marginal_residual" in capsys.readouterr().out


def test_verify_tampered_plan(tmp_path):
    plan = tmp_path / "plan.csv"
    assert run("solve", "--problem", CONFIGS / "atom_mixture.toml", "--out", plan, "-q") == 0
    lines = plan.read_text().splitlines()
    i, j, _ = lines[-1].split(",")
    lines[-1] = f"{i},{j},-0.5"
    plan.write_text("\n".join(lines) + "\n")
    out = tmp_path / "v.json"
    assert run("verify", "--config", write_verify(tmp_path, plan), "--out", out) == 3
    status = {r["check"]: r["status"] for r in json.loads(out.read_text())["checks"]}
    assert status["plan:positivity"] == "FAIL"


def test_verify_stalled_schedule(capsys):
    assert run("verify", "--config", CONFIGS / "verify_stalled.toml") == 3
    assert "coupling:disc_monotone  FAIL" in capsys.readouterr().out


def test_verify_nothing_to_check(tmp_path):
    cfg = tmp_path / "v.toml"
    cfg.write_text("seed = 1\n")
    assert run("verify", "--config", cfg) == 1


def test_conjugate_table(capsys, tmp_path):
    assert run("conjugate-table", "--regularizer", '{"family": "power", "p": 2}', "--r-min", -1, "--r-max", 1,
               "--num", 5) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [float(r["r"]) for r in rows] == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert [float(r["conj"]) for r in rows] == pytest.approx([0, 0, 0, 0.125, 0.5])
    out = tmp_path / "t.csv"
    assert run("conjugate-table", "--regularizer", '{"family": "entropy"}', "--out", out) == 0
    assert out.read_text().startswith("# version=")
    assert run("conjugate-table", "--regularizer", "not json") == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "orlicz_ot.cli", "norm", "--config", str(CONFIGS / "norm_power.toml")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "1.414214"
