import csv
import json

import pytest

from qselearn.errors import ConfigError, MissingAggregate
from qselearn.harness import (
    AGG_COLUMNS,
    ExperimentConfig,
    build_instance,
    emit_plots,
    expand_beta,
    load_classes,
    load_records,
    pessimism_check,
    run_experiment,
    save_classes,
)
from qselearn.benchmarks import finite_myopic_classes, two_state_game
from qselearn.game import LeaderPolicy
from qselearn.planner import evaluate_J


def _doc(**alg):
    base = {"name": "mle-pvi", "scheme": "S3", "c1": 0.05, "gamma2_scale": 1e-15, "mesh": 4}
    base.update(alg)
    return {"game": {"generator": "two-state", "seed": 7}, "algorithm": base, "sweep": {"T": [20, 60], "seeds": [0, 1]}}


def test_config_defaults_and_round_trip():
    cfg = ExperimentConfig.from_dict(_doc())
    assert cfg.scheme == "S3" and cfg.beta == "paper-linear" and cfg.workers == 1
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_dict({**_doc(), "algorithm": {"name": "mle-ovi"}}).scheme == "S5"


@pytest.mark.parametrize("patch", [
    {"name": "nope"},
    {"scheme": "S5"},
    {"beta": "huge"},
    {"beta": -1.0},
    {"bogus": 1},
])
def test_config_validation(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_doc(**patch))


def test_config_sweep_axes_and_files(tmp_path):
    doc = _doc()
    doc["sweep"]["seeds"] = [1, 1]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc = _doc()
    doc["sweep"]["T"] = []
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
    doc = _doc()
    doc["game"] = {"file": "missing.json"}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc, tmp_path)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("game = [")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)


def test_toml_config_loads(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[game]\ngenerator = "two-state"\nseed = 7\n[algorithm]\nname = "mle-pvi"\nscheme = "S2"\n'
                 '[sweep]\nT = [10]\nseeds = [0]\n')
    cfg = ExperimentConfig.load(p)
    assert cfg.scheme == "S2" and cfg.T == [10]


def test_shipped_configs_parse():
    from pathlib import Path

    for p in sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.toml")):
        ExperimentConfig.load(p)


def test_beta_expansion():
    v, desc = expand_beta("paper-linear", algorithm="mle-pvi", T=100, H=2, eta=2.0, d=8, delta=0.1, n_class=None)
    assert v > 0 and "log" in desc
    v2, _ = expand_beta(3.5, algorithm="mle-pvi", T=100, H=2, eta=2.0, d=8, delta=0.1, n_class=None)
    assert v2 == 3.5
    vo, _ = expand_beta("paper-linear", algorithm="mle-ovi", T=100, H=2, eta=2.0, d=8, delta=0.1, n_class=None)
    assert vo > v


def test_generators_build():
    for gen in ("two-state", "linear-d4", "choice", "farsighted"):
        inst = build_instance({"generator": gen})
        assert inst.game is not None
    inst = build_instance({"generator": "random", "S": 2, "A": 2, "B": 2, "H": 1})
    assert inst.phi.shape[-1] == 8
    with pytest.raises(ConfigError):
        build_instance({"generator": "two-state", "bogus": 1})


def test_classes_round_trip(tmp_path):
    game, _ = two_state_game()
    U, th, pols = finite_myopic_classes(game, seed=0)
    p = tmp_path / "classes.json"
    save_classes(p, U, th, pols)
    cls = load_classes(p)
    assert len(cls["U_class"]) == len(U) and len(cls["policy_class"]) == len(pols)


def test_pessimism_check_fields():
    game, _ = two_state_game()
    pol = LeaderPolicy.uniform(*game.dims)
    J = evaluate_J(game, pol)
    rep = pessimism_check(game, pol, J - 1.0, n_mc=50)
    assert rep["valid"] and rep["J"] == pytest.approx(J) and rep["sigma_mc"] > 0
    assert not pessimism_check(game, pol, J + 5.0, n_mc=50)["valid"]


def test_sweep_writes_reproducible_artifacts(tmp_path):
    cfg = ExperimentConfig.from_dict(_doc())
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a.status == "complete" and a.exit_code == 0
    assert len(a.records) == 4
    for name in ("aggregate.csv", "manifest.json", "runs/T20_seed0.json", "runs/T60_seed1.policy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "aggregate.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == AGG_COLUMNS and [r[0] for r in rows[1:]] == ["20", "60"]
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["status"] == "complete" and "aggregate.csv" in man["files"]
    assert len(load_records(tmp_path / "a")) == 4
    written = emit_plots(tmp_path / "a")
    assert (tmp_path / "a" / "subopt.tsv") in written


def test_online_sweep_has_traces(tmp_path):
    doc = {"game": {"generator": "linear-d4"}, "algorithm": {"name": "mle-ovi", "c1": 0.05, "gamma2_scale": 1e-15,
                                                              "mesh": 2, "sample_size": 4},
           "sweep": {"T": [15], "seeds": [0]}}
    res = run_experiment(ExperimentConfig.from_dict(doc), tmp_path)
    assert res.status == "complete"
    assert (tmp_path / "runs" / "T15_seed0.trace.csv").is_file()
    written = emit_plots(tmp_path)
    assert any(p.name.endswith(".regret.tsv") for p in written)


def test_failed_runs_are_recorded(tmp_path):
    # pmle on a myopic generator has no model class: every cell fails
    doc = {"game": {"generator": "two-state"}, "algorithm": {"name": "pmle"}, "sweep": {"T": [5], "seeds": [0]}}
    res = run_experiment(ExperimentConfig.from_dict(doc), tmp_path)
    assert res.status == "failed" and res.exit_code == 3
    assert res.records[0]["status"] == "failed"


def test_plotdata_needs_aggregate(tmp_path):
    with pytest.raises(MissingAggregate):
        emit_plots(tmp_path)
