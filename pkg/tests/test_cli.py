import json
import os
import subprocess
import sys
import time

import pytest

from msqm.cli import main


def _run(*args, env=None):
    e = dict(os.environ)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "msqm", *args], capture_output=True, text=True, env=e)


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "sim.csv"
    assert main(["simulate", "--n", "600", "--seed", "4", "--out", str(path), "--truth", str(d / "truth.json")]) == 0
    return path


def test_simulate_layout(sim_csv):
    lines = sim_csv.read_text().splitlines()
    assert len(lines) == 601
    assert lines[0].split(",") == ["L11", "L12", "A1", "L21", "L22", "A2", "L31", "L32", "A3", "Y"]
    schema = json.loads((sim_csv.parent / "sim.csv.schema.json").read_text())
    assert schema["Y"]["role"] == "outcome"
    truth = json.loads((sim_csv.parent / "truth.json").read_text())
    assert truth["true_theta"]["0.5"] == [10.0, -4.0, -4.0, -10.0]


def test_simulate_unmeasured_drops_column(tmp_path):
    out = tmp_path / "c1.csv"
    assert main(["simulate", "--n", "50", "--unmeasured", "case1", "--out", str(out)]) == 0
    head = out.read_text().splitlines()[0].split(",")
    assert len(head) == 9 and "L11" not in head


def test_simulate_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _run("simulate", "--n", "200", "--seed", "8", "--scenario", "II", "--out", str(a)).returncode == 0
    assert _run("simulate", "--n", "200", "--seed", "8", "--scenario", "II", "--out", str(b)).returncode == 0
    assert a.read_bytes() == b.read_bytes()


def test_fit_reports(sim_csv, tmp_path):
    out = tmp_path / "fit.json"
    rc = main(["fit", "--data", str(sim_csv), "--method", "ipw,icr,dr", "--q", "0.25,0.5,0.75",
               "--ps", "preset:ps_correct", "--om", "preset:om_correct", "--out", str(out)])
    assert rc == 0
    reps = json.loads(out.read_text())
    assert len(reps) == 9
    assert {r["method"] for r in reps} == {"IPW", "ICR", "DR"}
    assert all(len(r["theta"]) == 4 and r["converged"] for r in reps)
    again = tmp_path / "fit2.json"
    main(["fit", "--data", str(sim_csv), "--method", "ipw,icr,dr", "--q", "0.25,0.5,0.75",
          "--ps", "preset:ps_correct", "--om", "preset:om_correct", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_fit_full_precision_floats(sim_csv, tmp_path):
    out = tmp_path / "fit.json"
    main(["fit", "--data", str(sim_csv), "--method", "icr", "--out", str(out)])
    rep = json.loads(out.read_text())[0]
    theta = rep["theta"][0]
    assert repr(theta) in out.read_text()


def test_fit_custom_terms(sim_csv, tmp_path):
    out = tmp_path / "fit.json"
    ps = "1 + L11 + pos(L12); 1 + A1 + L21 + pos(L22); 1 + A2 + L31 + pos(L32)"
    rc = main(["fit", "--data", str(sim_csv), "--method", "ipw", "--ps", ps, "--out", str(out)])
    assert rc == 0


def test_fit_bad_term_exits_2(sim_csv, capsys):
    rc = main(["fit", "--data", str(sim_csv), "--method", "ipw", "--ps", "1 + bogus(L12); 1; 1"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "bogus(L12)" in err["message"]


@pytest.mark.parametrize("argv", [
    ["fit", "--data", "/nonexistent.csv"],
    ["fit", "--method"],
    ["nocommand"],
    ["mc", "--cells", "dr:Q", "--R", "2"],
    ["simulate", "--scenario", "III"],
])
def test_config_errors_exit_2(argv):
    assert main(argv) == 2


def test_sensitivity_rows(sim_csv, tmp_path):
    out = tmp_path / "sens.csv"
    rc = main(["sensitivity", "--data", str(sim_csv), "--grid", '{"1": {"g1": [-0.1, 0.1]}}', "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].endswith("estimate,se,ci_low,ci_high,converged")


def test_sensitivity_grid_5x5_and_contrast(sim_csv, tmp_path):
    out = tmp_path / "sens.csv"
    grid = {"1": {"g1": [-0.1, -0.05, 0, 0.05, 0.1]}, "2": {"g1": [-0.1, -0.05, 0, 0.05, 0.1]}}
    gpath = tmp_path / "grid.json"
    gpath.write_text(json.dumps(grid))
    rc = main(["sensitivity", "--data", str(sim_csv), "--grid", str(gpath), "--contrast", "1,0,0:0,0,0",
               "--out", str(out)])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 26


def test_mc_small_and_workers(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    t0 = time.time()
    args = ["mc", "--R", "6", "--n", "400", "--cells", "dr:TT,ipw:T,icr:F", "--seed", "5"]
    assert main(args + ["--out", str(a), "--workers", "1"]) == 0
    assert main(args + ["--out", str(b), "--workers", "3"]) == 0
    assert time.time() - t0 < 60
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 13


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"command": "simulate", "n": 30, "seed": 2, "out": str(tmp_path / "x.csv")}))
    assert main(["--config", str(cfg)]) == 0
    assert len((tmp_path / "x.csv").read_text().splitlines()) == 31
    assert main(["simulate", "--config", str(cfg), "--n", "40"]) == 0
    assert len((tmp_path / "x.csv").read_text().splitlines()) == 41
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"command": "fit"}))
    assert main(["simulate", "--config", str(bad)]) == 2


def test_msqm_workers_env_caps(monkeypatch):
    from msqm.cli import _workers
    monkeypatch.setenv("MSQM_WORKERS", "2")
    assert _workers(8) == 2
    monkeypatch.delenv("MSQM_WORKERS")
    assert _workers(8) == 8 and _workers(None) == 1


def test_calibrate_confounding_and_mc_bc(tmp_path):
    spec = tmp_path / "c3.json"
    assert main(["calibrate-confounding", "--case", "case3", "--big-n", "100000", "--out", str(spec)]) == 0
    d = json.loads(spec.read_text())
    assert d["case"] == "case3" and list(d["spec"]) == ["3"]
    out = tmp_path / "mc.csv"
    rc = main(["mc", "--R", "3", "--n", "400", "--unmeasured", "case3", "--cells", "dr:TT,bcdr:TT",
               "--confounding", str(spec), "--out", str(out)])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 9


def test_simulate_example_invocation(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["simulate", "--scenario", "I", "--n", "2000", "--seed", "7", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2001
    assert all(len(row.split(",")) == 10 for row in lines[:5])


def test_sensitivity_fixed_area_location_and_anchor(sim_csv, tmp_path):
    out, fit = tmp_path / "sens.csv", tmp_path / "fit.json"
    grid = '{"1": {"g1": [-0.25, 0, 0.25], "g2": [4], "g3": [1]}}'
    assert main(["sensitivity", "--data", str(sim_csv), "--grid", grid, "--out", str(out)]) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()]
    head, body = rows[0], rows[1:]
    assert len(body) == 3
    col = {name: i for i, name in enumerate(head)}
    assert [float(r[col["gamma_11"]]) for r in body] == [-0.25, 0.0, 0.25]
    assert all(r[col["converged"]] in ("true", "True", "1") for r in body)
    assert main(["fit", "--data", str(sim_csv), "--method", "dr", "--out", str(fit)]) == 0
    theta = json.loads(fit.read_text())[0]["theta"]
    anchor = [r for r in body if float(r[col["gamma_11"]]) == 0][0]
    assert float(anchor[col["estimate"]]) == pytest.approx(sum(theta[1:]), abs=1e-8)


def test_sensitivity_grid_peak_by_location(sim_csv, tmp_path):
    out = tmp_path / "sens.csv"
    g = [-0.1, -0.05, 0, 0.05, 0.1]
    grid = json.dumps({"1": {"g1": g, "g3": [0.9, 0.95, 1.0, 1.05, 1.1]}})
    assert main(["sensitivity", "--data", str(sim_csv), "--grid", grid, "--out", str(out)]) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()[1:]]
    keys = [(float(r[0]), float(r[2])) for r in rows]
    assert len(rows) == 25 and keys == sorted(keys) and len(set(keys)) == 25
    assert all(r[-5] not in ("", "nan") for r in rows)


def test_mc_example_invocation(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["mc", "--scenario", "I", "--R", "10", "--n", "500", "--cells", "dr:TT", "--q", "0.5", "--seed", "1"]
    t0 = time.time()
    assert main(args + ["--out", str(a), "--workers", "1"]) == 0
    assert time.time() - t0 < 60
    assert main(args + ["--out", str(b), "--workers", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()
