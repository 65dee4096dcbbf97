import math

import numpy as np
import pytest

from qselearn.benchmarks import (
    choice_benchmark,
    deterministic_policy_sampler,
    fixed_policy_sampler,
    generate_offline_dataset,
    two_state_game,
)
from qselearn.errors import DimensionMismatch, EmptyData, ZeroTransitionProbability
from qselearn.game import Dataset, LeaderPolicy, make_random_game, random_policy, rng_stream
from qselearn.mle import (
    ChoiceData,
    beta_farsighted,
    beta_linear,
    c_eta,
    choice_covariance,
    choice_data,
    confidence_set,
    covariance_laplacian_ratio,
    d_rl,
    fit_mle_myopic,
    laplacian_data,
    nll_farsighted,
    nll_grad,
    nll_myopic,
    pinv_psd,
    qre_operator,
    rank_deficiency,
    shift_subspace_dim,
)
from qselearn.oracle import grad_check_nll, hellinger_accuracy_slack
from qselearn.response import quantal_response


def _random_choice_data(rng, n=40, B=3, d=3, eta=1.0):
    X = rng.random((n, B, d))
    b = rng.integers(B, size=n)
    return ChoiceData(X, b, eta)


def test_single_sample_nll():
    data = ChoiceData(np.array([[[1.0], [0.0]]]), np.array([0]), 1.0)
    assert nll_myopic(np.array([1.0]), data) == pytest.approx(0.3132616875182228, abs=1e-14)


def test_empty_data_errors():
    empty = ChoiceData(np.zeros((0, 2, 2)), np.zeros(0, dtype=int), 1.0)
    with pytest.raises(EmptyData):
        nll_myopic(np.zeros(2), empty)
    with pytest.raises(EmptyData):
        nll_grad(np.zeros(2), empty)
    fit = fit_mle_myopic(empty)
    assert fit.theta.tolist() == [0.0, 0.0]


def test_gradient_matches_finite_differences():
    rng = rng_stream(1)
    assert grad_check_nll(np.zeros(3), _random_choice_data(rng)) <= 1e-6
    for _ in range(100):
        data = _random_choice_data(rng, eta=float(rng.uniform(0.5, 3)))
        assert grad_check_nll(rng.normal(size=3), data) <= 1e-6
    stress = _random_choice_data(rng, eta=100.0)
    assert grad_check_nll(rng.normal(size=3) * 0.1, stress) <= 1e-4


def test_nll_is_convex_along_segments():
    rng = rng_stream(2)
    for _ in range(100):
        data = _random_choice_data(rng)
        t1, t2 = rng.normal(size=3) * 3, rng.normal(size=3) * 3
        lam = float(rng.random())
        mid = nll_myopic(lam * t1 + (1 - lam) * t2, data)
        assert mid <= lam * nll_myopic(t1, data) + (1 - lam) * nll_myopic(t2, data) + 1e-9


def test_fit_interior_solution_has_zero_gradient():
    game, lin = choice_benchmark()
    ds = generate_offline_dataset(game, deterministic_policy_sampler(game), 500, seed=0)
    data = choice_data(ds, lin.phi, 0, game.eta)
    fit = fit_mle_myopic(data)
    assert fit.converged and not fit.on_boundary
    assert np.linalg.norm(nll_grad(fit.theta, data)) <= 1e-6
    assert nll_myopic(fit.theta, data) <= nll_myopic(lin.theta[0], data)


def test_separable_data_lands_on_the_ball():
    # the follower always picks the feature-maximizing action: the MLE is at infinity
    X = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]])
    data = ChoiceData(np.repeat(X, 5, axis=0), np.repeat([0, 1], 5), 1.0)
    fit = fit_mle_myopic(data, bound=2.0)
    assert fit.on_boundary and fit.converged
    assert np.linalg.norm(fit.theta) == pytest.approx(2.0, rel=1e-6)


def test_beta_formulas():
    assert beta_linear(3, 2, 1.0, 10, 0.1) == pytest.approx(3 * math.log(2 * 101 / 0.1))
    assert beta_farsighted(100, 3, 10, 0.1) == pytest.approx(9 * math.log(3 * math.e**2 * 100 * 3 * 10 / 0.1))
    assert c_eta(1.0, 1.0) == 2.0


def test_confidence_set_contains_mle_and_respects_membership():
    game, lin = choice_benchmark()
    ds = generate_offline_dataset(game, deterministic_policy_sampler(game), 400, seed=1)
    data = choice_data(ds, lin.phi, 0, game.eta)
    beta = beta_linear(3, 1, game.eta, 400, 0.1)
    cs = confidence_set(data, beta, sample_size=16, bound=math.sqrt(3), seed=0)
    assert np.array_equal(cs.theta_sample[0], cs.center)
    assert len(cs.theta_sample) == 16
    for th in cs.theta_sample:
        assert cs.contains(th)
        assert hellinger_accuracy_slack(data, th, lin.theta[0], beta) >= 0
    assert cs.contains(lin.theta[0])
    tiny = confidence_set(data, 1e-9, sample_size=4, bound=math.sqrt(3), seed=0)
    assert not tiny.contains(lin.theta[0])


def test_covariance_matches_qre_identity():
    # E_nu[(Upsilon(r~ - r))^2] = |theta~ - theta|^2 in the state covariance
    game, lin = two_state_game()
    pol = random_policy(*game.dims, rng_stream(4))
    sol = quantal_response(game, pol)
    rng = rng_stream(5)
    th_t = lin.theta + rng.normal(0, 0.1, lin.theta.shape)
    diff = np.einsum("hsabd,hd->hsab", lin.phi, th_t - lin.theta)
    for h in range(game.horizon):
        for s in range(game.num_states):
            ups = np.array([qre_operator(diff[h], pol.table[h], sol.nu[h], s, b) for b in range(2)])
            lhs = float(sol.nu[h, s] @ ups**2)
            X = np.einsum("ba,abd->bd", pol.table[h, s], lin.phi[h, s])
            data = ChoiceData(X[None], np.array([0]), game.eta)
            Sig = choice_covariance(lin.theta[h], data)
            dt = th_t[h] - lin.theta[h]
            assert lhs == pytest.approx(dt @ Sig @ dt, abs=1e-10)
            assert float(sol.nu[h, s] @ ups) == pytest.approx(0.0, abs=1e-12)


def test_qre_operator_shape_check():
    with pytest.raises(DimensionMismatch):
        qre_operator(np.zeros((2, 3, 2)), np.full((2, 2, 2), 0.5), np.full((2, 2), 0.5), 0, 0)


def test_pinv_threshold():
    M = np.diag([1.0, 1e-12, 0.0])
    assert np.allclose(pinv_psd(M), np.diag([1.0, 0.0, 0.0]))


def test_single_policy_dataset_is_rank_deficient():
    game, lin = two_state_game()
    pol = LeaderPolicy.uniform(*game.dims)
    ds = generate_offline_dataset(game, fixed_policy_sampler(pol), 200, seed=0)
    data = choice_data(ds, lin.phi, 0, game.eta)
    rep = rank_deficiency(choice_covariance(lin.theta[0], data), lin.phi[0])
    assert rep.rank_deficient and rep.nullity >= game.num_states
    assert shift_subspace_dim(lin.phi[0]) == game.num_states


def test_diverse_dataset_is_not_rank_deficient():
    game, lin = two_state_game()
    ds = generate_offline_dataset(game, deterministic_policy_sampler(game), 400, seed=0)
    data = choice_data(ds, lin.phi, 0, game.eta)
    rep = rank_deficiency(choice_covariance(lin.theta[0], data), lin.phi[0])
    assert not rep.rank_deficient
    lo, hi = covariance_laplacian_ratio(choice_covariance(lin.theta[0], data), laplacian_data(data))
    assert 0 < lo <= hi


def test_farsighted_nll_and_model_distance():
    game = make_random_game(2, 2, 2, 2, gamma=1.0, seed=3)
    pol = random_policy(2, 2, 2, 2, rng_stream(0))
    assert np.allclose(d_rl(game, game, pol), 0.0)
    ds = generate_offline_dataset(game, fixed_policy_sampler(pol), 20, seed=0)
    out = nll_farsighted(game, ds)
    assert out.shape == (2,) and np.all(np.isfinite(out))
    # a model that forbids an observed transition gets the +inf sentinel
    tr = ds.trajectories[0]
    h, s, a, b, _, s2 = next(iter(tr.steps()))
    P = game.P.copy()
    P[h, s, a, b] = np.eye(2)[1 - s2]
    bad = game.replace(P=P)
    assert math.isinf(nll_farsighted(bad, ds)[h])
    with pytest.raises(ZeroTransitionProbability):
        nll_farsighted(bad, ds, strict=True)
    assert nll_farsighted(game, Dataset()).tolist() == [0.0, 0.0]
