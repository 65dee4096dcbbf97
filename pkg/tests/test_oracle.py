import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from qselearn.errors import TooLarge
from qselearn.game import make_random_game, random_policy, rng_stream
from qselearn.mle import ChoiceData, choice_covariance
from qselearn.oracle import (
    brute_force_qse,
    check_linear_tv_corollary,
    check_performance_difference,
    check_response_bounds,
    empirical_coverage,
    identification_slack,
    run_battery,
    slack_table,
    write_junit,
)
from qselearn.planner import PrescriptionGrid, leader_values
from qselearn.response import quantal_response


def test_identical_solutions_have_zero_lhs():
    game = make_random_game(2, 2, 3, 2, gamma=0.0, eta=2.0, seed=1)
    pol = random_policy(2, 2, 3, 2, rng_stream(0))
    sol = quantal_response(game, pol)
    rep = check_response_bounds(sol, sol, game=game)
    assert rep.ok()
    assert rep.slacks["tv_upper"] == 0.0 and rep.slacks["kl_upper"] == 0.0
    assert rep.slacks["a_difference"] == pytest.approx(0.0, abs=1e-12)


def test_exact_estimates_give_zero_performance_gap():
    game = make_random_game(2, 2, 2, 3, gamma=0.9, seed=2)
    pol = random_policy(2, 2, 2, 3, rng_stream(1))
    lv = leader_values(game, pol, quantal_response(game, pol))
    rep = check_performance_difference(game, pol, game.r, lv.U, lv.W)
    assert rep.lhs == pytest.approx(0.0, abs=1e-12) and rep.rhs == pytest.approx(0.0, abs=1e-12)
    assert rep.ok and rep.ok_w and rep.rme_ok


def test_small_battery_passes():
    results = run_battery(n=40, seed=3)
    names = {r.name for r in results}
    for expected in ("tv_upper", "tv_lower_1", "hellinger_lower", "kl_upper", "a_difference", "hessian_upper",
                     "hessian_lower", "identification", "performance_difference", "response_model_error"):
        assert expected in names
    failed = [r.name for r in results if not r.passed]
    assert not failed, slack_table(results)


def test_junit_and_table(tmp_path):
    results = run_battery(n=5, seed=0)
    path = tmp_path / "junit.xml"
    write_junit(results, path)
    root = ET.parse(path).getroot()
    assert root.tag == "testsuite" and int(root.get("tests")) == len(results)
    assert int(root.get("failures")) == 0
    table = slack_table(results)
    assert table.splitlines()[0].startswith("check")
    assert "FAIL" not in table


def test_linear_corollary_both_shapes():
    rng = rng_stream(4)
    for _ in range(50):
        X = rng.random((3, 4))
        ts, tt = rng.random(4), rng.random(4)
        Sig = choice_covariance(ts, ChoiceData(X[None], np.array([0]), 2.0))
        for Psi in (np.eye(4), 100 * Sig + np.eye(4)):
            assert check_linear_tv_corollary(X, ts, tt, 2.0, Psi, 1.0) >= -1e-12


def test_identification_slack_example():
    nu = np.array([0.5, 0.3, 0.2])
    x = np.ones(3)
    r = np.array([0.2, 0.5, 0.9])
    assert identification_slack(nu, x, r, r) == 0.0
    assert identification_slack(nu, x, r, r - np.array([0.1, -0.05, -0.05])) >= 0


def test_coverage_with_infinite_beta():
    assert empirical_coverage(lambda i: None, np.zeros(2), lambda data: math.inf, reps=100) == 1.0


def test_brute_force_limit():
    game = make_random_game(3, 2, 2, 3, seed=0)
    with pytest.raises(TooLarge):
        brute_force_qse(game, PrescriptionGrid(2, 2, 10))
