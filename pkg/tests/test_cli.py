import json
import subprocess
import sys

import pytest

from curvflow import cli, symfun


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_check_class_member(capsys):
    code, out, _ = run(["check-class", "--speed", '{"kind":"power_mean","r":-0.5,"n":3}', "--samples", "1000", "--seed", "7"], capsys)
    assert code == 0
    assert json.loads(out)["passed"] is True


def test_check_class_nonmember(capsys):
    code, out, _ = run(["check-class", "--speed", '{"kind":"power_mean","r":2,"n":3}'], capsys)
    doc = json.loads(out)
    assert code == 2 and not doc["concave"]
    assert any(w["condition"] == "concave" for w in doc["witnesses"])


def test_missing_speed_is_usage_error(capsys, tmp_path):
    out_file = tmp_path / "r.json"
    code, out, err = run(["check-class", "--out", str(out_file)], capsys)
    assert code == 1 and out == "" and "usage" in err
    assert not out_file.exists()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["check-class", "--speed", "power-mean:x"],
    ["check-class", "--speed", "sym-quotient:1,2", "--n", "3"],
    ["check-class", "--speed", "geo-mix:0.5,0.5", "--n", "3"],
    ["check-class", "--speed", "{bad json"],
    ["check-class", "--speed", "power-mean:1", "--samples", "0"],
    ["verify-pinch", "--speed", "power-mean:2", "--n", "3", "--trials", "0"],
    ["flow", "--speed", "power-mean:1", "--shape", "cube:1"],
    ["flow", "--speed", "power-mean:1", "--grid", "8"],
    ["calculus", "--speed", "power-mean:1", "--trials", "0"],
    ["pde", "--speed", "power-mean:0", "--n", "3"],
])
def test_usage_errors(argv, capsys):
    code, out, _ = run(argv, capsys)
    assert code == 1 and out == ""


def test_speed_shorthand():
    assert cli.parse_speed("power-mean:-1", 3) == symfun.PowerMean(-1.0, 3)
    assert cli.parse_speed("elem-sym:2", 4) == symfun.ElemSym(2, 4)
    assert cli.parse_speed("sym-quotient:2,1", None) == symfun.SymQuotient(2, 1, 2)
    assert cli.parse_speed("geo-mix:0.25,0.75", None) == symfun.WeightedGeoMean((0.25, 0.75))
    assert cli.parse_speed('{"kind":"power_mean","r":0}', 3) == symfun.PowerMean(0.0, 3)


def test_speed_from_file(tmp_path):
    p = tmp_path / "speed.json"
    p.write_text(symfun.SymQuotient(3, 1, 4).to_json())
    assert cli.parse_speed(str(p), None) == symfun.SymQuotient(3, 1, 4)


def test_verify_pinch_clean_and_deterministic(capsys):
    argv = ["verify-pinch", "--speed", "sym-quotient:2,1", "--n", "3", "--trials", "3000", "--seed", "1"]
    code, out1, _ = run(argv, capsys)
    _, out2, _ = run(argv, capsys)
    assert code == 0 and out1 == out2
    doc = json.loads(out1)
    assert doc["min_q_normalized"] >= -1e-9 and doc["violations"] == []


def test_verify_pinch_witness(capsys):
    code, out, _ = run(["verify-pinch", "--speed", "power-mean:2", "--n", "3", "--trials", "20000"], capsys)
    doc = json.loads(out)
    assert code == 2 and doc["violations"]
    v = doc["violations"][0]
    assert set(v) >= {"lambda", "T_free", "q_blocks"}


def test_calculus(capsys):
    code, out, _ = run(["calculus", "--speed", "sym-quotient:3,1", "--n", "4", "--trials", "100", "--seed", "3"], capsys)
    assert code == 0 and json.loads(out)["max_d2F_residual"] < 1e-4
    code, out, _ = run(["calculus", "--speed", "power-mean:1"], capsys)
    doc = json.loads(out)
    assert code == 0 and abs(doc["worst_d2F"]["analytic"]) < 1e-12
    code, _, _ = run(["calculus", "--speed", "power-mean:0", "--n", "3", "--gap", "1e-12", "--trials", "100"], capsys)
    assert code == 0


def test_pde_commands(capsys, tmp_path):
    csv_path = tmp_path / "pde.csv"
    code, out, _ = run(["pde", "--grid", "33", "--t-end", "0.02", "--csv", str(csv_path)], capsys)
    assert code == 0 and json.loads(out)["status"] == "Preserved"
    assert csv_path.read_text().startswith("t,min_hessian_eigenvalue")
    code, out, _ = run(["pde", "--bump", "0", "--grid", "33", "--t-end", "0.02"], capsys)
    assert code == 0 and json.loads(out)["final_max_deviation"] < 1e-8
    code, out, _ = run(["pde", "--dt-factor", "100", "--grid", "33"], capsys)
    assert code == 2 and json.loads(out)["status"] == "StabilityFailure"


def test_flow_commands(capsys, tmp_path):
    csv_path = tmp_path / "trace.csv"
    code, out, _ = run(["flow", "--speed", "power-mean:1", "--n", "3", "--shape", "sphere:1", "--grid", "40",
                        "--stop-fraction", "0.05", "--csv", str(csv_path)], capsys)
    assert code == 0
    assert csv_path.read_text().splitlines()[0] == "t,inradius,circumradius,pinch_ratio,roundness,rescaled_err"
    code, out, _ = run(["flow", "--speed", "power-mean:1", "--shape", "perturbed:1,0.5,2", "--grid", "40"], capsys)
    assert code == 2 and json.loads(out)["status"] == "NonConvexShape"
    code, out, _ = run(["flow", "--speed", "power-mean:1", "--grid", "40", "--max-steps", "5"], capsys)
    assert code == 3 and json.loads(out)["status"] == "StepLimit"


def test_config_overrides_flags(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"speed": {"kind": "power_mean", "r": 2, "n": 3}, "samples": 200}))
    code, out, _ = run(["check-class", "--speed", "power-mean:0", "--config", str(cfg)], capsys)
    doc = json.loads(out)
    assert code == 2 and doc["samples_used"] == 200
    cfg.write_text(json.dumps({"bogus": 1}))
    code, out, _ = run(["check-class", "--speed", "power-mean:0", "--config", str(cfg)], capsys)
    assert code == 1 and out == ""


def test_out_file(capsys, tmp_path):
    target = tmp_path / "report.json"
    code, out, _ = run(["check-class", "--speed", "elem-sym:2", "--n", "3", "--samples", "50", "--out", str(target)], capsys)
    assert code == 0 and out == ""
    assert json.loads(target.read_text())["passed"]


def test_floats_round_trip(capsys):
    _, out, _ = run(["verify-pinch", "--speed", "power-mean:2", "--n", "3", "--trials", "5000", "--max-violations", "1"], capsys)
    doc = json.loads(out)
    lam = doc["violations"][0]["lambda"]
    assert json.loads(json.dumps(lam)) == lam
    assert all(float(repr(v)) == v for v in lam)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "curvflow", "check-class"], capture_output=True, text=True)
    assert res.returncode == 1 and res.stdout == ""
