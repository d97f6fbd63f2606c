import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from _builders import case_text, write_two_bus_config
from temarket.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT, EXIT_OK, EXIT_SOLVER, main
from temarket.config import bundled, load_config
from temarket.reporting import REPORT_FILES, check_reports, emit_reports, run_scenario


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def two_bus_run(tmp_path_factory):
    folder = tmp_path_factory.mktemp("two")
    cfg = write_two_bus_config(folder)
    out = folder / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == EXIT_OK
    return cfg, out


def test_run_writes_every_report(two_bus_run):
    _, out = two_bus_run
    for name in REPORT_FILES + ("manifest.json",):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"]
    assert [f["name"] for f in manifest["files"]] == list(REPORT_FILES)
    assert manifest["config"]["steps"] == 4


def test_report_cardinality(two_bus_run):
    _, out = two_bus_run
    assert len(rows(out / "voltages.csv")) == 2 * 4
    assert len(rows(out / "dispatch.csv")) == 2 * 2 * 4
    assert len(rows(out / "prices.csv")) == 4
    assert len(rows(out / "profits.csv")) == 1 * 4


def test_summary_payments_balance(two_bus_run):
    _, out = two_bus_run
    for r in rows(out / "summary.csv"):
        assert abs(float(r["payments"])) < 1e-6
        assert abs(float(r["payments_star"])) < 1e-6


def test_numbers_use_nine_significant_digits(two_bus_run):
    _, out = two_bus_run
    for r in rows(out / "voltages.csv"):
        mant = r["v_baseline"].split("e")[0].replace("-", "").replace(".", "").lstrip("0")
        assert len(mant) <= 9


def test_check_accepts_untouched_reports(two_bus_run, capsys):
    _, out = two_bus_run
    assert check_reports(out) == []
    assert main(["check", str(out)]) == EXIT_OK
    assert "all invariants hold" in capsys.readouterr().out


def test_check_flags_tampered_reports(two_bus_run, tmp_path):
    _, out = two_bus_run
    bad = tmp_path / "bad"
    bad.mkdir()
    for f in out.iterdir():
        (bad / f.name).write_bytes(f.read_bytes())
    lines = (bad / "cashflow.csv").read_text().splitlines()
    head, first = lines[0], lines[1].split(",")
    first[2] = str(float(first[2]) + 1.0)
    (bad / "cashflow.csv").write_text("\n".join([head, ",".join(first), *lines[2:]]) + "\n")
    findings = check_reports(bad)
    assert any("checksum" in f for f in findings)
    assert any("sums to" in f for f in findings)
    assert main(["check", str(bad)]) == EXIT_INVARIANT


def test_check_on_a_missing_directory(tmp_path):
    assert main(["check", str(tmp_path / "none")]) == EXIT_CONFIG


def test_repeated_runs_are_byte_identical(two_bus_run, tmp_path):
    cfg, out = two_bus_run
    again = tmp_path / "again"
    assert main(["run", str(cfg), "--out", str(again)]) == EXIT_OK
    for name in REPORT_FILES + ("manifest.json",):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_trivial_run_is_fast(tmp_path):
    cfg = load_config(write_two_bus_config(tmp_path, ders=[{"bus": 2, "pv_kw": 100}]))
    t0 = time.perf_counter()
    run_scenario(cfg)
    assert time.perf_counter() - t0 < 1.0


def test_idle_pool_pays_nothing(tmp_path):
    path = write_two_bus_config(tmp_path, ders=[], profiles={"load_shape": [0.0] * 4, "pv_shape": [0.0] * 4})
    b = run_scenario(load_config(path))
    paths = emit_reports(b, tmp_path / "out")
    assert len(paths) == len(REPORT_FILES) + 1
    assert all(float(r["delta_star"]) == 0.0 for r in rows(tmp_path / "out" / "cashflow.csv"))


def test_infeasible_voltage_band_exits_3(tmp_path, capsys):
    raw = {"case": "case33.txt", "horizon": {"steps": 2, "dt": 0.5},
           "profiles": {"load_shape": [1.5, 1.5], "pv_shape": [0, 0]},
           "prices": {"buy": [0.2, 0.2], "sell": [0.1, 0.1]}, "voltage": {"min": 1.04, "max": 1.05}}
    path = tmp_path / "inf.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == EXIT_INFEASIBLE
    err = capsys.readouterr().err
    assert "stage 1" in err and "Infeasible" in err


def test_solver_failure_exits_4(tmp_path):
    path = write_two_bus_config(tmp_path, solver={"max_iter": 1})
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == EXIT_SOLVER


def test_bad_config_exits_2(tmp_path, capsys):
    path = write_two_bus_config(tmp_path, horizon={"steps": 5, "dt": 0.5})
    assert main(["run", str(path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_steps_flag_out_of_range_exits_2(two_bus_run):
    cfg, _ = two_bus_run
    assert main(["run", str(cfg), "--steps", "9"]) == EXIT_CONFIG


def test_validate_and_pf_on_the_bundled_case(capsys):
    case = str(bundled("case33.txt"))
    assert main(["validate", case]) == EXIT_OK
    assert "33 buses, 32 branches, radial" in capsys.readouterr().out
    assert main(["pf", case]) == EXIT_OK
    out = capsys.readouterr().out
    assert "minimum |V|: 0.913" in out and "bus 18" in out
    loss = float(out.split("total loss: ")[1].split(" kW")[0])
    assert loss == pytest.approx(202.68, abs=0.1)


def test_validate_rejects_a_meshed_case(tmp_path):
    p = tmp_path / "mesh.txt"
    p.write_text(case_text([(1, "slack", 0, 0), (2, "consumer", 1, 0), (3, "consumer", 1, 0)],
                           [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1), (3, 1, 0.1, 0.1)]))
    assert main(["validate", str(p)]) == EXIT_CONFIG
    assert main(["pf", str(p)]) == EXIT_CONFIG


def test_pf_divergence_exits_4(tmp_path):
    p = tmp_path / "heavy.txt"
    p.write_text(case_text([(1, "slack", 0, 0), (2, "consumer", 1e8, 1e8)], [(1, 2, 5.0, 5.0)]))
    assert main(["pf", str(p)]) == EXIT_SOLVER


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "temarket.cli", "validate", str(bundled("case33.txt"))],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "radial" in res.stdout


def test_results_bundle_matches_the_reports(two_bus_run):
    cfg, out = two_bus_run
    b = run_scenario(load_config(cfg))
    v = np.array([float(r["v_trading"]) for r in rows(out / "voltages.csv")])
    assert np.allclose(v, b.stage2.v_mag.T.ravel(), rtol=1e-8)
