"""Follower quantal response via entropy-regularized (soft) backward recursion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, SupportMismatch
from .game import MarkovGame, as_table, eff_horizon


def advantage_bound(game: MarkovGame | None = None, *, gamma=None, H=None, eta=None, B=None) -> float:
    """B_A = (1 + eff_H(gamma)) * (log|B| / eta + 1)."""
    if game is not None:
        S, A, B, H = game.dims
        gamma, eta = game.gamma, game.eta
    return (1.0 + eff_horizon(gamma, H)) * (math.log(B) / eta + 1.0)


@dataclass(frozen=True)
class FollowerSolution:
    Q: np.ndarray  # (H, S, B)
    V: np.ndarray  # (H, S)
    A: np.ndarray  # (H, S, B)
    nu: np.ndarray  # (H, S, B)
    policy: np.ndarray  # (H, S, B, A)
    follower_reward: np.ndarray  # (H, S, A, B)
    eta: float
    gamma: float
    advantage_bound: float

    def invariant_errors(self) -> dict:
        """Maximal deviation for each structural invariant (should all be ~0)."""
        eta = self.eta
        return {
            "nu_exp_A": float(np.abs(self.nu - np.exp(eta * self.A)).max()),
            "nu_sum": float(np.abs(self.nu.sum(-1) - 1.0).max()),
            "V_lse": float(np.abs(self.V - logsumexp(eta * self.Q, axis=-1) / eta).max()),
            "bound_excess": float(
                max(np.abs(self.A).max(), np.abs(self.Q).max(), np.abs(self.V).max()) - self.advantage_bound
            ),
        }

    def check_invariants(self, tol: float = 1e-10) -> bool:
        e = self.invariant_errors()
        return e["nu_exp_A"] <= tol and e["nu_sum"] <= tol and e["V_lse"] <= tol and e["bound_excess"] <= tol


def policy_reward(reward: np.ndarray, policy_table: np.ndarray) -> np.ndarray:
    """r^pi(h,s,b) = sum_a pi(a|s,b) r(h,s,a,b)."""
    return np.einsum("hsba,hsab->hsb", policy_table, reward)


def policy_transition(P: np.ndarray, policy_table: np.ndarray) -> np.ndarray:
    return np.einsum("hsba,hsabt->hsbt", policy_table, P)


def quantal_response(game: MarkovGame, policy, follower_reward=None, *, transition=None) -> FollowerSolution:
    """Soft backward recursion of the follower against ``policy``.

    ``follower_reward`` overrides ``game.r`` (for theta-parameterized models,
    pass the materialized ``<phi, theta>`` table).
    """
    pt = as_table(policy)
    S, A, B, H = game.dims
    if pt.shape != (H, S, B, A):
        raise DimensionMismatch(f"policy shape {pt.shape} != {(H, S, B, A)}")
    r = game.r if follower_reward is None else np.asarray(follower_reward, dtype=float)
    if r.shape != (H, S, A, B):
        raise DimensionMismatch(f"follower reward shape {r.shape} != {(H, S, A, B)}")
    P = game.P if transition is None else np.asarray(transition, dtype=float)
    eta, gamma = game.eta, game.gamma

    rpi = policy_reward(r, pt)
    Q = np.empty((H, S, B))
    V = np.empty((H, S))
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        q = rpi[h]
        if gamma > 0.0:
            q = q + gamma * np.einsum("sba,sabt,t->sb", pt[h], P[h], v_next)
        Q[h] = q
        V[h] = logsumexp(eta * q, axis=-1) / eta
        v_next = V[h]
    Adv = Q - V[..., None]
    nu = softmax(eta * Q, axis=-1)
    bound = max(advantage_bound(game), 0.0)
    return FollowerSolution(
        Q=Q, V=V, A=Adv, nu=nu, policy=pt, follower_reward=r, eta=eta, gamma=gamma, advantage_bound=bound
    )


def myopic_response(reward_pi: np.ndarray, eta: float) -> np.ndarray:
    """Softmax over the last axis of ``eta * reward_pi`` (any leading batch shape)."""
    return softmax(eta * np.asarray(reward_pi, dtype=float), axis=-1)


def entropy_objective(game: MarkovGame, policy, nu, follower_reward=None) -> float:
    """G(pi, nu) = E[sum_h gamma^h (r^pi + H(nu_h)/eta)] by exact backward evaluation."""
    pt = as_table(policy)
    S, A, B, H = game.dims
    r = game.r if follower_reward is None else follower_reward
    rpi = policy_reward(r, pt)
    Ppi = policy_transition(game.P, pt)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(nu > 0, nu * np.log(nu), 0.0).sum(-1)
    v = np.zeros(S)
    for h in range(H - 1, -1, -1):
        q = rpi[h] + game.gamma * Ppi[h] @ v
        v = (nu[h] * q).sum(-1) + ent[h] / game.eta
    return float(game.rho0 @ v)


@dataclass(frozen=True)
class DistReport:
    tv: float
    hellinger: float
    kl: float


def tv_distance(p, q, axis=-1):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=axis)


def hellinger_sq(p, q, axis=-1):
    return 0.5 * ((np.sqrt(p) - np.sqrt(q)) ** 2).sum(axis=axis)


def kl_divergence(p, q, axis=-1, strict: bool = True):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        if strict:
            raise SupportMismatch("q vanishes on the support of p")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=axis)


def dist_metrics(p, q, strict: bool = False) -> DistReport:
    """TV, Hellinger and KL between two distributions.

    KL is ``inf`` on a support mismatch, or raises ``SupportMismatch`` when ``strict``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatch("distributions must share a support")
    kl = float(kl_divergence(p, q, strict=strict)) if strict else float(kl_divergence(p, q, strict=False))
    return DistReport(
        tv=float(tv_distance(p, q)),
        hellinger=float(math.sqrt(max(hellinger_sq(p, q), 0.0))),
        kl=kl,
    )
