import csv
import json
import subprocess
import sys

import pytest

from efsgd.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, expand_grid, main
from efsgd.harness import comm_cost

BASE = {
    "optimizer": "dist_ef", "workers": 2, "iterations": 40, "seed": 0, "momentum": 0.9,
    "problem": {"kind": "quadratic", "dim": 16, "kappa": 5, "sigma": 0.5},
    "compressor": {"kind": "blockwise_scaled_sign", "blocks": 2},
    "schedule": {"kind": "constant", "gamma": 0.02},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_run_writes_csv_and_summary(tmp_path):
    cfg = write_json(tmp_path / "c.json", BASE)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_OK
    rows = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 41
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["verification"]["flags"]["lemma4"] is True


def test_run_is_byte_reproducible(tmp_path):
    cfg = write_json(tmp_path / "c.json", BASE)
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    sa.pop("metadata"), sb.pop("metadata")
    assert sa == sb


def test_run_uses_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("EFSGD_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write_json(tmp_path / "myrun.json", BASE)
    assert main(["run", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "root" / "myrun" / "metrics.csv").is_file()


def test_mu_one_is_usage_error(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**BASE, "momentum": 1.0})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--config", "/nonexistent/c.json"],
    ["run"],
    ["frobnicate"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_override_is_usage_error(tmp_path):
    cfg = write_json(tmp_path / "c.json", BASE)
    assert main(["run", "--config", cfg, "--set", "no_equals_sign"]) == EXIT_USAGE
    assert main(["run", "--config", cfg, "--set", "schedule.gamma=-1"]) == EXIT_USAGE


def test_override_optimizer(tmp_path):
    cfg = write_json(tmp_path / "c.json", BASE)
    out = tmp_path / "r"
    assert main(["run", "--config", cfg, "--out", str(out), "--set", "optimizer=signsgd"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["optimizer"] == "signsgd"
    first = (out / "metrics.csv").read_text().splitlines()[1].split(",")
    assert int(first[5]) == comm_cost("majority_vote", 2, 16)


def test_divergence_exit_code(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**BASE, "optimizer": "sgd", "momentum": 0.0,
                                           "schedule": {"kind": "constant", "gamma": 5.0}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_FAILURE
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert "diverged_at" in summary


def test_sweep_counts_and_pairing(tmp_path):
    sweep = {"base": BASE, "grid": {"workers": [1, 2, 4]}, "repetitions": 3}
    cfg = write_json(tmp_path / "s.json", sweep)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == EXIT_OK
    index = json.loads((tmp_path / "s" / "index.json").read_text())["runs"]
    assert len(index) == 9
    assert len(list((tmp_path / "s").glob("*/metrics.csv"))) == 9
    runs = expand_grid(sweep)
    by = {(r[2]["workers"], r[1]): r[3] for r in runs}
    assert by[(2, 0)]["problem"]["seed"] == by[(4, 0)]["problem"]["seed"]
    assert by[(2, 0)]["seed"] == by[(4, 0)]["seed"] != by[(2, 1)]["seed"]


def test_sweep_parallel_matches_serial(tmp_path):
    sweep = {"base": BASE, "grid": {"workers": [1, 2]}, "repetitions": 1}
    cfg = write_json(tmp_path / "s.json", sweep)
    main(["sweep", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["sweep", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"])
    for name in ("cell000_rep00", "cell001_rep00"):
        assert (tmp_path / "a" / name / "metrics.csv").read_bytes() == \
            (tmp_path / "b" / name / "metrics.csv").read_bytes()


def test_sweep_empty_grid(tmp_path):
    cfg = write_json(tmp_path / "s.json", {"base": BASE, "grid": {}})
    assert main(["sweep", "--config", cfg]) == EXIT_USAGE
    cfg = write_json(tmp_path / "s2.json", {"base": BASE, "grid": {"workers": []}})
    assert main(["sweep", "--config", cfg]) == EXIT_USAGE


def test_sweep_records_failures_and_continues(tmp_path):
    sweep = {"base": {**BASE, "optimizer": "sgd", "momentum": 0.0},
             "grid": {"schedule.gamma": [0.01, 50.0]}}
    cfg = write_json(tmp_path / "s.json", sweep)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == EXIT_FAILURE
    index = json.loads((tmp_path / "s" / "index.json").read_text())["runs"]
    assert [r["status"] for r in index] == ["ok", "diverged"]


def test_verify_pristine(capsys):
    assert main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    checks = [line for line in out.splitlines() if " PASS " in line or " FAIL " in line]
    assert len(checks) >= 8
    assert "FAIL" not in out


def test_verify_fault_injection(capsys):
    assert main(["verify", "--fault-inject"]) == EXIT_FAILURE
    err = capsys.readouterr().err
    assert "lemma1" in err


def test_report_merges_runs(tmp_path):
    a = write_json(tmp_path / "a.json", {**BASE, "momentum": 0.0})
    b = write_json(tmp_path / "b.json", {**BASE, "optimizer": "sgd", "momentum": 0.0})
    main(["run", "--config", a, "--out", str(tmp_path / "runs" / "ef")])
    main(["run", "--config", b, "--out", str(tmp_path / "runs" / "sgd")])
    assert main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == EXIT_OK
    with open(tmp_path / "rep" / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 80
    ids = sorted({r["run_id"] for r in rows})
    assert len(ids) == 2
    totals = {i: sum(int(r["bits_ideal"]) for r in rows if r["run_id"] == i) for i in ids}
    assert totals[ids[0]] == 40 * comm_cost("dist_ef_block", 2, 16, 2)
    assert totals[ids[1]] == 40 * comm_cost("full_precision", 2, 16)
    text = (tmp_path / "rep" / "report.txt").read_text()
    assert text.count("E||grad F(x_o)||^2") == 2


def test_report_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")]) == EXIT_FAILURE


def test_report_skips_corrupt_run(tmp_path):
    a = write_json(tmp_path / "a.json", BASE)
    main(["run", "--config", a, "--out", str(tmp_path / "runs" / "good")])
    bad = tmp_path / "runs" / "bad"
    bad.mkdir()
    (bad / "metrics.csv").write_text("garbage\n1,2\n")
    assert main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == EXIT_OK


def test_module_entry_point(tmp_path):
    cfg = write_json(tmp_path / "c.json", BASE)
    proc = subprocess.run([sys.executable, "-m", "efsgd", "run", "--config", cfg, "--out", str(tmp_path / "r")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
