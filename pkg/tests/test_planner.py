import numpy as np
import pytest

from qselearn.errors import DimensionMismatch, EmptyThetaSample, NotMyopic, TooLarge
from qselearn.game import LeaderPolicy, build_tabular_game, make_random_game, random_policy, rng_stream
from qselearn.oracle import brute_force_qse
from qselearn.planner import (
    PrescriptionGrid,
    evaluate_J,
    leader_values,
    occupancy,
    prescription_argmax,
    solve_qse_myopic,
    state_distribution,
    suboptimality,
)
from qselearn.response import quantal_response


def test_grid_sizes_and_order():
    det = PrescriptionGrid.deterministic(2, 2)
    assert len(det) == 4
    grid = PrescriptionGrid(2, 2, 2)
    # 3 rows per follower action, 9 prescriptions, the 4 deterministic ones first
    assert len(grid) == 9 and grid.num_deterministic == 4
    assert np.array_equal(grid.alphas[:4], det.alphas)
    assert np.allclose(grid.alphas.sum(-1), 1.0)
    with pytest.raises(TooLarge):
        PrescriptionGrid(3, 3, 200)


def test_leader_values_identity_on_unit_game():
    spec = {"rho0": [1.0], "u": [[[[0.5]]]] * 2, "r": [[[[0.0]]]] * 2, "P": [[[[[1.0]]]]] * 2,
            "gamma": 0.0, "eta": 1.0}
    game = build_tabular_game(spec)
    pol = LeaderPolicy.uniform(1, 1, 1, 2)
    lv = leader_values(game, pol, quantal_response(game, pol))
    assert lv.W[:, 0].tolist() == [1.0, 0.5]
    assert lv.J(game.rho0) == 1.0


def test_occupancy_is_a_distribution_per_step():
    game = make_random_game(3, 2, 2, 3, gamma=0.5, seed=1)
    pol = random_policy(3, 2, 2, 3, rng_stream(0))
    sol = quantal_response(game, pol)
    d = state_distribution(game, pol, sol.nu)
    occ = occupancy(game, pol, sol.nu)
    assert np.allclose(d.sum(-1), 1.0)
    assert np.allclose(occ.sum(axis=(1, 2, 3)), 1.0)
    # J is the occupancy-weighted leader reward
    assert float((occ * game.u).sum()) == pytest.approx(evaluate_J(game, pol), abs=1e-12)


def test_qse_matches_brute_force_on_tiny_games():
    grid = PrescriptionGrid(2, 2, 2)
    for seed in range(3):
        game = make_random_game(2, 2, 2, 2, eta=2.0, seed=seed)
        sol = solve_qse_myopic(game, grid)
        _, best = brute_force_qse(game, grid)
        assert sol.J_star == pytest.approx(best, abs=1e-9)
        assert evaluate_J(game, sol.policy) == pytest.approx(sol.J_star, abs=1e-12)


def test_qse_requires_myopic_follower():
    with pytest.raises(NotMyopic):
        solve_qse_myopic(make_random_game(2, 2, 2, 2, gamma=0.5, seed=0), PrescriptionGrid(2, 2, 2))


def test_qse_beats_uniform_policy():
    game = make_random_game(3, 3, 2, 2, seed=4)
    sol = solve_qse_myopic(game, PrescriptionGrid(3, 2, 4))
    assert suboptimality(game, LeaderPolicy.uniform(3, 3, 2, 2), sol.J_star) >= -1e-12
    assert suboptimality(game, sol.policy, sol.J_star) == pytest.approx(0.0, abs=1e-12)


def test_prescription_argmax_inner_reductions():
    rng = rng_stream(3)
    U = rng.random((2, 2))
    rewards = rng.random((4, 2, 2))
    grid = PrescriptionGrid(2, 2, 4)
    _, _, v_min = prescription_argmax(U, rewards, 2.0, grid, inner="min")
    _, _, v_max = prescription_argmax(U, rewards, 2.0, grid, inner="max")
    _, _, v_one = prescription_argmax(U, rewards[0], 2.0, grid)
    assert v_min <= v_one <= v_max
    # a constant penalty shifts the score and keeps the argmax
    i0, _, v0 = prescription_argmax(U, rewards[0], 2.0, grid)
    i1, _, v1 = prescription_argmax(U, rewards[0], 2.0, grid, penalty=-0.25)
    assert i0 == i1 and v1 == pytest.approx(v0 - 0.25)
    with pytest.raises(EmptyThetaSample):
        prescription_argmax(U, np.zeros((0, 2, 2)), 2.0, grid)
    with pytest.raises(DimensionMismatch):
        prescription_argmax(np.zeros((3, 2)), rewards[0], 2.0, grid)


def test_ties_break_to_first_grid_point():
    U = np.zeros((2, 2))
    i, alpha, v = prescription_argmax(U, np.zeros((2, 2)), 1.0, PrescriptionGrid(2, 2, 3))
    assert i == 0 and v == 0.0
