import json
import subprocess
import sys

import pytest

from feedopt.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    inst = d / "inst.json"
    assert main(["generate", "--customers", "10", "--seed", "2", "--fleet", "2", "1", "-o", str(inst)]) == 0
    sol = d / "sol.json"
    rc = main(["solve", str(inst), "--iters", "300", "--nstagnant", "2", "--progress", str(d / "prog.jsonl"),
               "--report", str(d / "rep.csv"), "--format", "csv", "-o", str(sol)])
    assert rc == 0
    return d, inst, sol


def test_generate_respects_flags(files):
    d, inst, _ = files
    data = json.loads(inst.read_text())
    assert len(data["R"]) == 10
    assert len(data["K"]) == 3


def test_generate_from_spec_file(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"customers": 4, "geometry": "ring", "mp_count": 30}))
    out = tmp_path / "i.json"
    assert main(["generate", str(spec), "-o", str(out)]) == 0
    assert len(json.loads(out.read_text())["G"]) == 30


def test_bad_spec_is_usage_error(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"customers": 4, "geometry": "hex"}))
    assert main(["generate", str(spec)]) == 2


def test_solve_outputs(files):
    d, _, sol = files
    data = json.loads(sol.read_text())
    assert data["schema"] and "kpis" in data["meta"]
    assert (d / "rep.csv").read_text().splitlines()[0].startswith("name,")
    lines = (d / "prog.jsonl").read_text().splitlines()
    assert all("iter" in json.loads(x) for x in lines)


def test_validate(files, tmp_path):
    _, inst, sol = files
    out = tmp_path / "v.json"
    assert main(["validate", str(inst), str(sol), "-o", str(out)]) == 0
    assert json.loads(out.read_text())["ok"]
    bad = json.loads(sol.read_text())
    rp = next(r for r in bad["routes"] if len(r["nodes"]) > 2)
    rp["E"][1] += 3.0
    broken = tmp_path / "bad.json"
    broken.write_text(json.dumps(bad))
    assert main(["validate", str(inst), str(broken), "-o", str(out)]) == 1
    assert not json.loads(out.read_text())["ok"]


def test_assign_layered_and_flat_agree(files, tmp_path):
    _, inst, _ = files
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["assign", str(inst), "-o", str(a)]) == 0
    assert main(["assign", str(inst), "--flat", "-o", str(b)]) == 0
    assert json.loads(a.read_text())["value"] == pytest.approx(json.loads(b.read_text())["value"], abs=1e-6)


def test_rho_file(files, tmp_path):
    _, inst, _ = files
    rf = tmp_path / "rho.json"
    rf.write_text("0.5")
    out = tmp_path / "a.json"
    assert main(["assign", str(inst), "--rho-file", str(rf), "-o", str(out)]) == 0
    assert set(json.loads(out.read_text())["rho"].values()) == {0.5}


def test_export_and_check_milp(files, tmp_path):
    _, inst, sol = files
    lp, vals, rep = tmp_path / "m.lp", tmp_path / "v.txt", tmp_path / "r.json"
    assert main(["export-milp", str(inst), "--solution", str(sol), "--values", str(vals), "-o", str(lp)]) == 0
    assert main(["check-milp", str(lp), str(vals), "-o", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["ok"]
    assert r["objective"] == pytest.approx(json.loads(sol.read_text())["objective"], abs=1e-6)
    lp2 = tmp_path / "s.lp"
    assert main(["export-milp", str(inst), "--model", "second-stage", "--solution", str(sol),
                 "--values", str(vals), "-o", str(lp2)]) == 0
    assert main(["check-milp", str(lp2), str(vals), "-o", str(rep)]) == 0


def test_check_milp_failures(files, tmp_path):
    lp = tmp_path / "bad.lp"
    lp.write_text("Minimize\n obj: x\nSubject To\n c: x >= zz\nEnd\n")
    vals = tmp_path / "v.txt"
    vals.write_text("x 1\n")
    assert main(["check-milp", str(lp), str(vals)]) == 1
    lp.write_text("Minimize\n obj: x\nSubject To\n c: x >= 2\nEnd\n")
    assert main(["check-milp", str(lp), str(vals), "-o", str(tmp_path / "r.json")]) == 1
    assert main(["check-milp", str(tmp_path / "missing.lp"), str(vals)]) == 2


def test_postopt_command(files, tmp_path):
    _, inst, sol = files
    out = tmp_path / "p.json"
    assert main(["postopt", str(inst), str(sol), "-o", str(out)]) == 0
    assert json.loads(out.read_text())["objective"] <= json.loads(sol.read_text())["objective"] + 1e-9


def test_report(files, tmp_path):
    _, inst, sol = files
    out = tmp_path / "r.json"
    assert main(["report", str(sol), str(sol), "--format", "json", "-o", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert rows[-1]["solution"] == "mean" and len(rows) == 3
    assert main(["report", str(sol), "--instance", str(inst), "-o", str(tmp_path / "t.txt")]) == 0


def test_tune_rho(files, tmp_path):
    _, inst, _ = files
    out = tmp_path / "rho.json"
    assert main(["tune-rho", str(inst), "--iters", "100", "--nstagnant", "1", "--budget", "3",
                 "--no-postopt", "-o", str(out)]) == 0
    assert json.loads(out.read_text())["rho"]


def test_missing_file_and_bad_args(tmp_path):
    assert main(["validate", str(tmp_path / "none.json"), str(tmp_path / "none.json")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["solve"]) == 2
    bad = tmp_path / "x.json"
    bad.write_text("{not json")
    assert main(["validate", str(bad), str(bad)]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "feedopt", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "generate" in r.stdout
