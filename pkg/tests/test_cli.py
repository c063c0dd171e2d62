import json
import subprocess
import sys

import pytest

from timedreach.cli import EXIT_INVALID, EXIT_NO_CONVERGENCE, EXIT_OK, auto_delta, main, parse_delta, parse_h

from conftest import DATA

LINE = ["--model", str(DATA / "single_integrator.json"), "--h", "0.25", "--epsilon", "0.5"]


@pytest.fixture()
def line_automaton(tmp_path):
    path = tmp_path / "reach.json"
    assert main(["fragment", "--stage", "goal:0,3", "-o", str(path)]) == EXIT_OK
    return path


def build_line(out, automaton, *extra):
    return main(["build", *LINE, "--automaton", str(automaton), "--out", str(out), *extra])


def test_parsers():
    assert parse_h("0.5,0.5,pi/4")[2] == pytest.approx(0.7853981633974483)
    assert parse_delta("auto") is None
    assert str(parse_delta("1/5")) == "1/5" and str(parse_delta("0.2")) == "1/5"
    assert str(auto_delta(0.153682)) == "1/7"
    assert str(auto_delta(0.25)) == "1/4"


def test_line_pipeline(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    assert build_line(out, line_automaton) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["delta"] == "1/8"  # bound 1/(0.25/0.0625 + 1/0.25)
    assert manifest["delta_within_bound"]
    assert manifest["counts"]["grid_points"] == 17
    assert main(["solve", "--out", str(out), "--tol", "1e-6"]) == EXIT_OK
    assert main(["simulate", "--out", str(out), "--trials", "200", "--save", "3"]) == EXIT_OK
    est = json.loads((out / "estimate.json").read_text())
    assert est["trials"] == 200 and 0 < est["p_hat"] < 1
    assert (out / "values.csv").read_text().startswith("id,value\n")
    assert (out / "policy.csv").read_text().startswith("id,input_id,u1\n")
    assert (out / "convergence.csv").read_text().startswith("sweep,residual\n")
    traj = (out / "trajectories.csv").read_text().splitlines()
    assert traj[0] == "trial,tick,t,x1,q,ticks_c,u1,verdict"
    assert {line.split(",")[0] for line in traj[1:]} == {"0", "1", "2"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["solve"]["converged"] and "simulate" in manifest


def test_dubins_build_and_solve(tmp_path, capsys):
    out = tmp_path / "dubins"
    rc = main(["build", "--model", str(DATA / "dubins_model.json"), "--automaton", str(DATA / "dubins_automaton.json"),
               "--delta", "1/5", "--override-delta-bound", "--out", str(out), "--export-product"])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "product states     52273 (22617 reachable from s0)" in text
    assert "warning:" in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert not manifest["delta_within_bound"]
    assert manifest["kernel"]["mode"] == "normalize"
    assert (out / "product_transitions.csv").exists()
    assert main(["solve", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["solve"]["iterations"] == 35
    assert manifest["solve"]["value_s0"] == pytest.approx(0.178219, abs=1e-5)


def test_dubins_delta_too_large_without_override(tmp_path, capsys):
    rc = main(["build", "--model", str(DATA / "dubins_model.json"), "--automaton", str(DATA / "dubins_automaton.json"),
               "--delta", "1/5", "--out", str(tmp_path / "x")])
    assert rc == EXIT_INVALID
    assert "error: kernel: delta=1/5 exceeds the local consistency bound 0.153682" in capsys.readouterr().err


def test_missing_automaton(tmp_path, capsys):
    rc = main(["build", *LINE, "--automaton", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")])
    assert rc == EXIT_INVALID
    assert capsys.readouterr().err.strip() == "error: automaton: not found"


def test_misaligned_region(tmp_path, line_automaton, capsys):
    doc = json.loads((DATA / "single_integrator.json").read_text())
    doc["labels"]["goal"] = [[[3.1, 4]]]
    model = tmp_path / "m.json"
    model.write_text(json.dumps(doc))
    rc = main(["build", "--model", str(model), "--automaton", str(line_automaton), "--h", "0.25",
               "--out", str(tmp_path / "x")])
    assert rc == EXIT_INVALID
    assert capsys.readouterr().err.startswith("error: labels: 1 grid cells straddle a region edge")


def test_zero_trials(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    build_line(out, line_automaton)
    main(["solve", "--out", str(out)])
    assert main(["simulate", "--out", str(out), "--trials", "0"]) == EXIT_INVALID
    assert "--trials must be at least 1" in capsys.readouterr().err


def test_stale_policy(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    build_line(out, line_automaton)
    main(["solve", "--out", str(out)])
    policy = out / "policy.csv"
    lines = policy.read_text().splitlines()
    last = lines[-1].split(",")
    last[1] = "0" if last[1] != "0" else "1"
    lines[-1] = ",".join(last)
    policy.write_text("\n".join(lines) + "\n")
    assert main(["simulate", "--out", str(out)]) == EXIT_INVALID
    assert "hash mismatch" in capsys.readouterr().err


def test_rebuilt_product_invalidates_policy(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    build_line(out, line_automaton)
    main(["solve", "--out", str(out)])
    build_line(out, line_automaton, "--epsilon", "1.0")
    assert main(["simulate", "--out", str(out)]) == EXIT_INVALID
    assert "run solve first" in capsys.readouterr().err


def test_simulate_before_solve(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    build_line(out, line_automaton)
    assert main(["simulate", "--out", str(out)]) == EXIT_INVALID


def test_non_convergence(tmp_path, line_automaton, capsys):
    out = tmp_path / "run"
    build_line(out, line_automaton)
    assert main(["solve", "--out", str(out), "--tol", "1e-12", "--max-iters", "2"]) == EXIT_NO_CONVERGENCE
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["solve"]["converged"] is False


def test_replay_is_byte_identical(tmp_path, line_automaton, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    build_line(a, line_automaton)
    assert main(["build", "--replay", str(a / "manifest.json"), "--out", str(b)]) == EXIT_OK
    for name in ("kernel.csv", "grid.json", "product.npz", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_fragment_stdout(capsys):
    assert main(["fragment", "--stage", "R1:0,5", "--stage", "R2:3,5", "--avoid", "HitWall"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc == json.loads((DATA / "dubins_automaton.json").read_text())


def test_fragment_bad_stage(capsys):
    assert main(["fragment", "--stage", "R1:5"]) == EXIT_INVALID


def test_check(capsys):
    rc = main(["check", "--model", str(DATA / "dubins_model.json"), "--automaton", str(DATA / "dubins_automaton.json")])
    assert rc == EXIT_OK
    assert "968" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "timedreach", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
