from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from ubrs.cli import main
from ubrs.model import load_model
from ubrs.relax import RelaxOptions, build
from ubrs.sdp import import_sdpa

DATA = Path(__file__).resolve().parents[1] / "src" / "ubrs" / "data"
EX1 = str(DATA / "ex1_linear.json")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err.strip().splitlines()[-1])
                                                              if err.strip() else None)


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    assert main(["solve", EX1, "--degree", "4", "--out", str(out)]) == 0
    return out


def test_solve_writes_certificate_and_manifest(solved):
    cert = json.loads((solved / "certificate.json").read_text())
    man = json.loads((solved / "manifest.json").read_text())
    assert cert["status"] == "Optimal" and 0 < cert["objective"] < 2
    for key in ("model_sha256", "variant", "degree", "solver_options", "seed", "version", "wall_time_s",
                "objective", "status", "created"):
        assert key in man
    assert "created" not in cert


@pytest.mark.parametrize("argv, code, message", [
    (["solve", EX1, "--degree", "7", "--out", "x"], 2, "degree must be even"),
    (["solve", str(DATA / "logistic_inner.json"), "--variant", "alpha", "--alpha", "0.9", "--out", "x"], 2,
     "alpha variant requires single mode"),
    (["solve", EX1, "--variant", "sideways", "--out", "x"], 2, "invalid choice"),
    (["nosuch"], 2, "invalid choice"),
    (["solve", "/nonexistent/model.json", "--out", "x"], 2, "cannot read model"),
])
def test_usage_errors(capsys, tmp_path, monkeypatch, argv, code, message):
    monkeypatch.chdir(tmp_path)
    rc, _, err = run(capsys, *argv)
    assert rc == code
    assert err["exit_code"] == code and message in err["message"]


def test_malformed_model_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x", "horizon": 1, "modes": [{"id": 1, "states": ["x"], "box": [[0, 1]],'
                   ' "dynamics": ["y"]}]}')
    rc, _, err = run(capsys, "export-sdpa", bad, "--degree", "4", "--out", tmp_path / "a.dat-s")
    assert rc == 3 and err["error"] == "model"


def test_solver_non_optimal_exit_code(capsys, tmp_path):
    rc, _, err = run(capsys, "solve", EX1, "--degree", "4", "--max-iters", "2", "--out", tmp_path)
    assert rc == 4 and err["status"] == "IterLimit"


def test_export_sdpa_matches_compiler(capsys, tmp_path):
    path = tmp_path / "ex1.dat-s"
    rc, out, _ = run(capsys, "export-sdpa", EX1, "--degree", "4", "--out", path)
    assert rc == 0
    sf = import_sdpa(path.read_text())
    relax = build(load_model(EX1), RelaxOptions(4))
    assert sf.m == relax.problem.m == out["m"] == 60
    assert list(sf.block_sizes[:-1]) == relax.problem.block_sizes


def test_levelset_and_rerun_byte_identical(capsys, tmp_path, solved):
    csv = tmp_path / "ls.csv"
    rc, out, _ = run(capsys, "levelset", solved / "certificate.json", "--grid", "201", "--out", csv)
    assert rc == 0 and out["counts"]["inside"] == 52
    assert csv.read_text().splitlines()[0] == "x,w,inside"
    rc, out, _ = run(capsys, "rerun", str(csv) + ".manifest.json", "--out", tmp_path / "again")
    assert rc == 0 and out["reproduced"]
    assert (tmp_path / "again" / "ls.csv").read_bytes() == csv.read_bytes()


def test_validate_pipeline_and_replay(capsys, tmp_path, solved):
    out_dir = tmp_path / "val"
    rc, out, _ = run(capsys, "validate", EX1, solved / "certificate.json", "--grid", "51", "--trials", "20",
                     "--out", out_dir)
    assert rc == 0 and out["passed"] and out["direction"] == "OuterMustContain"
    assert json.loads((out_dir / "verdict.json").read_text())["passed"]
    rc, out, _ = run(capsys, "rerun", out_dir / "manifest.json", "--out", tmp_path / "val2")
    assert rc == 0 and out["reproduced"]
    for name in ("mc_mode1.csv", "levelset_mode1.csv", "verdict.json"):
        assert (tmp_path / "val2" / name).read_bytes() == (out_dir / name).read_bytes()


def test_validate_detects_a_false_certificate(capsys, tmp_path, solved):
    doc = json.loads((solved / "certificate.json").read_text())
    doc["modes"][0]["w"] = "0"
    fake = tmp_path / "fake.json"
    fake.write_text(json.dumps(doc))
    rc, out, _ = run(capsys, "validate", EX1, fake, "--grid", "51", "--trials", "10", "--out", tmp_path / "v")
    assert rc == 5 and not out["passed"] and out["violations"] > 0


def test_validate_rejects_corrupted_certificate(capsys, tmp_path):
    bad = tmp_path / "cert.json"
    bad.write_text('{"variant": "outer", "modes": [}')
    rc, _, err = run(capsys, "validate", EX1, bad, "--out", tmp_path / "v")
    assert rc == 3 and "malformed certificate" in err["message"]


def test_simulate_writes_trajectory(capsys, tmp_path):
    path = tmp_path / "tr.csv"
    rc, out, _ = run(capsys, "simulate", str(DATA / "logistic_inner.json"), "--mode", "2", "--x0", "0.9",
                     "--seed", "3", "--out", path)
    assert rc == 0 and out["events"] == 1 and out["terminal_mode"] == 1
    assert path.read_text().startswith("t,mode,x1,theta1\n")
    rc, _, err = run(capsys, "simulate", EX1, "--x0", "0.1,0.2", "--out", path)
    assert rc == 2 and "initial state has 2 entries" in err["message"]


def test_rerun_refuses_changed_model(capsys, tmp_path):
    model = tmp_path / "m.json"
    shutil.copy(EX1, model)
    path = tmp_path / "tr.csv"
    assert run(capsys, "simulate", model, "--x0", "0.5", "--out", path)[0] == 0
    model.write_text(model.read_text().replace("-0.7*x", "-0.8*x"))
    rc, _, err = run(capsys, "rerun", str(path) + ".manifest.json", "--out", tmp_path / "r")
    assert rc == 3 and "changed" in err["message"]
