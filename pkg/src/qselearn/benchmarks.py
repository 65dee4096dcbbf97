"""Fixed benchmark instances used by the experiment harness and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .game import (
    Dataset,
    LeaderPolicy,
    LinearGameParams,
    MarkovGame,
    embed_linear,
    make_random_game,
    rng_stream,
    sample_trajectory,
)
from .planner import PrescriptionGrid
from .response import quantal_response


def two_state_game(eta: float = 2.0, seed: int = 7) -> tuple[MarkovGame, LinearGameParams]:
    """2 states, 2x2 actions, H=2, myopic follower, one-hot features (d=8)."""
    game = make_random_game(2, 2, 2, 2, gamma=0.0, eta=eta, seed=seed)
    return game, embed_linear(game)


def linear_d4_game(S: int = 3, A: int = 2, B: int = 3, H: int = 2, eta: float = 2.0,
                   seed: int = 11) -> tuple[MarkovGame, LinearGameParams]:
    """Linear myopic game with features on the probability simplex in R^4.

    Simplex features make phi^T mu a distribution whenever each mu_k is one,
    and keep rewards in [0, 1] for parameters in [0, 1]^4.
    """
    d = 4
    rng = rng_stream(seed, 0x11D4)
    phi = rng.dirichlet(np.full(d, 0.5), size=(H, S, A, B))
    theta = rng.random((H, d))
    vartheta = rng.random((H, d))
    mu = rng.dirichlet(np.ones(S), size=(H, d)).reshape(H, d, S)
    rho0 = np.full(S, 1.0 / S)
    lin = LinearGameParams(phi=phi, theta=theta, vartheta=vartheta, mu=mu, param_bound=float(np.sqrt(d)))
    return lin.to_game(rho0, gamma=0.0, eta=eta), lin


def choice_benchmark(d: int = 3, B: int = 3, S: int = 4, A: int = 3, eta: float = 3.0, seed: int = 3):
    """One-step linear game for likelihood experiments; returns (game, params).

    Features are uniform on [0, 1/d]^d and theta* lies in [0, 1]^d, so the
    follower reward phi^T theta* is exactly representable as a tabular game.
    """
    rng = rng_stream(seed, 0xC401)
    phi = rng.random((1, S, A, B, d)) / d
    theta = rng.random((1, d))
    vartheta = np.zeros((1, d))
    mu = np.full((1, d, S), 1.0 / S)
    lin = LinearGameParams(phi=phi, theta=theta, vartheta=vartheta, mu=mu, param_bound=float(np.sqrt(d)))
    game = MarkovGame(rho0=np.full(S, 1.0 / S), u=np.zeros((1, S, A, B)), r=lin.follower_reward(),
                      P=np.full((1, S, A, B, S), 1.0 / S), gamma=0.0, eta=eta)
    return game, lin


def deterministic_policy_sampler(game: MarkovGame):
    """Per-episode policy drawn uniformly from the deterministic prescription grid at every (h, s)."""
    S, A, B, H = game.dims
    det = PrescriptionGrid.deterministic(A, B).alphas

    def sample(rng: np.random.Generator) -> LeaderPolicy:
        return LeaderPolicy(det[rng.integers(len(det), size=(H, S))])

    return sample


def fixed_policy_sampler(policy: LeaderPolicy):
    return lambda rng: policy


def generate_offline_dataset(game: MarkovGame, policy_sampler, T: int, seed: int = 0,
                             follower_reward=None) -> Dataset:
    """T independent episodes, each under a fresh policy from ``policy_sampler(rng)``."""
    rng = rng_stream(seed, 0xD47A)
    ds = Dataset()
    cache: dict = {}
    for t in range(T):
        pol = policy_sampler(rng)
        key = pol.table.tobytes()
        if key not in cache:
            cache[key] = quantal_response(game, pol, follower_reward)
        traj = sample_trajectory(game, pol, cache[key], rng_stream(seed, 0xE915, t), policy_id=t)
        ds.append(traj, pol)
    return ds


def farsighted_benchmark(n_models: int = 10, n_policies: int = 8, S: int = 2, A: int = 2, B: int = 2, H: int = 3,
                         eta: float = 2.0, bump: float = 0.5, seed: int = 5):
    """Farsighted (gamma = 1) game with a finite model class containing the truth.

    Each wrong model flatters one policy: it raises the leader reward along
    the path that policy favours and makes one frequently used transition
    deterministic, so playing the flattered policy exposes the model.
    Returns ``(game, model_class, policy_class, true_index)``.
    """
    rng = rng_stream(seed, 0xFA25)
    game = make_random_game(S, A, B, H, gamma=1.0, eta=eta, seed=int(rng.integers(2**31)))
    det = PrescriptionGrid.deterministic(A, B).alphas
    policies, seen = [], set()
    while len(policies) < n_policies:
        pol = LeaderPolicy(det[rng.integers(len(det), size=(H, S))])
        if pol not in seen:
            seen.add(pol)
            policies.append(pol)
    models = [game]
    for k in range(n_models - 1):
        pol = policies[k % n_policies]
        nu = quantal_response(game, pol).nu
        u = game.u.copy()
        P = game.P.copy()
        for h in range(H):
            for s in range(S):
                b = int(np.argmax(nu[h, s]))
                a = int(np.argmax(pol.table[h, s, b]))
                u[h, s, a, b] = min(1.0, u[h, s, a, b] + bump)
                if h == int(rng.integers(H)) or s == 0:
                    tgt = int(rng.integers(S))
                    P[h, s, a, b] = np.eye(S)[tgt]
        models.append(game.replace(u=u, P=P))
    order = rng.permutation(n_models)
    model_class = [models[i] for i in order]
    true_index = int(np.flatnonzero(order == 0)[0])
    return game, model_class, policies, true_index


def finite_myopic_classes(game: MarkovGame, n_theta: int = 4, n_policies: int = 3, n_extra_U: int = 2,
                          grid: PrescriptionGrid | None = None, noise: float = 0.2, seed: int = 0):
    """Realizable finite classes for the myopic finite-class learners.

    ``theta_class``: follower reward tables, the truth first, then perturbations.
    ``policy_class``: deterministic grid policies, the grid-QSE first.
    ``U_class``: U^{pi, theta*} for each policy, the QSE action values under
    every theta in the class, and ``n_extra_U`` perturbed tables.
    """
    from .planner import leader_values, solve_qse_myopic

    S, A, B, H = game.dims
    rng = rng_stream(seed, 0xF1C5)
    grid = grid or PrescriptionGrid(A, B, 4)
    thetas = [np.array(game.r)]
    for _ in range(n_theta - 1):
        thetas.append(np.clip(game.r + rng.normal(0.0, noise, game.r.shape), 0.0, 1.0))
    qse = solve_qse_myopic(game, grid)
    det = PrescriptionGrid.deterministic(A, B).alphas
    policies = [qse.policy]
    while len(policies) < n_policies:
        pol = LeaderPolicy(det[rng.integers(len(det), size=(H, S))])
        if pol not in policies:
            policies.append(pol)
    U_class = [leader_values(game, p, quantal_response(game, p)).U for p in policies]
    for th in thetas:
        U_class.append(solve_qse_myopic(game, grid, follower_reward=th).U)
    for _ in range(n_extra_U):
        U_class.append(np.clip(U_class[0] + rng.normal(0.0, noise, U_class[0].shape), 0.0, H))
    return U_class, thetas, policies
