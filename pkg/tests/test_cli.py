import json
import subprocess
import sys

import pytest

from qselearn.cli import main


def run(*argv):
    return main(["--quiet", *map(str, argv)])


@pytest.fixture
def two_state_files(tmp_path):
    game = tmp_path / "game.json"
    data = tmp_path / "data.jsonl"
    assert run("gen", "game", "--generator", "two-state", "--game-seed", 7, "--out", game) == 0
    assert run("gen", "dataset", "--game", game, "--T", 200, "--seed", 1, "--out", data) == 0
    return game, data


def test_plan_with_brute_force_check(tmp_path):
    out = tmp_path / "plan.json"
    assert run("plan", "--generator", "random", "--param", "S=2", "--param", "A=2", "--param", "B=2",
               "--param", "H=1", "--mesh", 3, "--brute", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["agree"] and rep["J_star"] == pytest.approx(rep["J_star_brute"], abs=1e-9)


def test_respond_reports_invariants(tmp_path, two_state_files):
    game, _ = two_state_files
    pol = tmp_path / "pol.json"
    pol.write_text(json.dumps([[[[0.5, 0.5]] * 2] * 2] * 2))
    out = tmp_path / "resp.json"
    assert run("respond", "--game", game, "--policy", pol, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert max(rep["invariant_errors"][k] for k in ("nu_exp_A", "nu_sum", "V_lse")) <= 1e-10


def test_fit_and_offline(tmp_path, two_state_files):
    game, data = two_state_files
    out = tmp_path / "fit.json"
    assert run("fit", "--game", game, "--dataset", data, "--sample-size", 4, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert len(rep["steps"]) == 2 and not rep["steps"][0]["rank_deficient"]
    out = tmp_path / "off.json"
    assert run("offline", "--game", game, "--dataset", data, "--scheme", "S3", "--c1", 0.05,
               "--gamma2-scale", 1e-15, "--mesh", 4, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["subopt"] >= -1e-12 and rep["scheme"] == "S3"


def test_single_policy_dataset_flags_rank_deficiency(tmp_path, two_state_files):
    game, _ = two_state_files
    pol = tmp_path / "pol.json"
    pol.write_text(json.dumps([[[[1.0, 0.0]] * 2] * 2] * 2))
    data = tmp_path / "fixed.jsonl"
    assert run("gen", "dataset", "--game", game, "--policy", pol, "--T", 100, "--out", data) == 0
    out = tmp_path / "fit.json"
    assert run("fit", "--game", game, "--dataset", data, "--step", 0, "--sample-size", 2, "--out", out) == 0
    assert json.loads(out.read_text())["steps"][0]["rank_deficient"]


def test_online_writes_trace(tmp_path):
    out = tmp_path / "trace.csv"
    assert run("online", "--generator", "linear-d4", "--T", 10, "--mesh", 2, "--c1", 0.05,
               "--gamma2-scale", 1e-15, "--sample-size", 4, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("t,J_pi_t") and len(lines) == 11


def test_omle_from_generated_classes(tmp_path):
    game = tmp_path / "far.json"
    assert run("gen", "game", "--generator", "farsighted", "--out", game) == 0
    classes = tmp_path / "far.classes.json"
    assert json.loads(classes.read_text())["true_index"] is not None
    out = tmp_path / "omle.csv"
    assert run("online", "--game", game, "--classes", classes, "--algorithm", "omle", "--T", 20, "--out", out) == 0


def test_verify_writes_reports(tmp_path):
    assert run("verify", "--n", 5, "--out", tmp_path / "v") == 0
    assert (tmp_path / "v" / "junit.xml").is_file()
    assert "PASS" in (tmp_path / "v" / "slacks.txt").read_text()


def test_sweep_and_plotdata(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[game]\ngenerator = "two-state"\n[algorithm]\nname = "mle-pvi"\nc1 = 0.05\nmesh = 2\n'
                   'gamma2_scale = 1e-15\n[sweep]\nT = [10]\nseeds = [0]\n')
    out = tmp_path / "res"
    assert run("sweep", "--config", cfg, "--out", out) == 0
    assert (out / "manifest.json").is_file()
    assert run("plotdata", out) == 0
    assert (out / "subopt.tsv").is_file()


def test_error_exit_codes(tmp_path):
    assert run("plan", "--game", tmp_path / "missing.json") == 2
    assert run("plan") == 2
    assert run("sweep") == 2
    assert run("plotdata", tmp_path) == 2
    game = tmp_path / "far.json"
    run("gen", "game", "--generator", "farsighted", "--out", game)
    # a farsighted game cannot be solved by the myopic planner
    assert run("plan", "--game", game) == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "qselearn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("plan", "respond", "fit", "offline", "online", "gen", "verify", "sweep", "plotdata"):
        assert cmd in res.stdout
