"""Leader value functions, exact myopic QSE over a prescription grid, and the
grid-scoring primitive shared by every learner."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import DimensionMismatch, EmptyGrid, EmptyThetaSample, NotMyopic, TooLarge
from .game import LeaderPolicy, MarkovGame, as_table
from .response import FollowerSolution, quantal_response

MAX_GRID = 2_000_000
TIE_TOL = 1e-12


@dataclass(frozen=True)
class LeaderValues:
    U: np.ndarray  # (H, S, A, B)
    W: np.ndarray  # (H, S)
    nu: np.ndarray  # (H, S, B)
    policy: np.ndarray  # (H, S, B, A)

    def J(self, rho0) -> float:
        return float(np.asarray(rho0) @ self.W[0])


def leader_values(game: MarkovGame, policy, response) -> LeaderValues:
    """U_h = u_h + P_h W_{h+1};  W_h(s) = <U_h(s), pi_h(s) (x) nu_h(s)>."""
    pt = as_table(policy)
    nu = response.nu if isinstance(response, FollowerSolution) else np.asarray(response, dtype=float)
    S, A, B, H = game.dims
    if pt.shape != (H, S, B, A) or nu.shape != (H, S, B):
        raise DimensionMismatch("policy/response shapes disagree with the game")
    U = np.empty((H, S, A, B))
    W = np.empty((H, S))
    w_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        U[h] = game.u[h] + game.P[h] @ w_next
        W[h] = np.einsum("sab,sba,sb->s", U[h], pt[h], nu[h])
        w_next = W[h]
    return LeaderValues(U=U, W=W, nu=nu, policy=pt)


def evaluate_J(game: MarkovGame, policy, follower_reward=None) -> float:
    sol = quantal_response(game, policy, follower_reward)
    return leader_values(game, policy, sol).J(game.rho0)


def state_distribution(game: MarkovGame, policy, nu) -> np.ndarray:
    """Exact marginals d_h(s) under (pi, nu), shape (H, S)."""
    pt = as_table(policy)
    S, A, B, H = game.dims
    d = np.empty((H, S))
    cur = np.array(game.rho0, dtype=float)
    for h in range(H):
        d[h] = cur
        joint = np.einsum("s,sb,sba->sab", cur, nu[h], pt[h])
        cur = np.einsum("sab,sabt->t", joint, game.P[h])
    return d


def occupancy(game: MarkovGame, policy, nu) -> np.ndarray:
    """Exact joint law of (s_h, a_h, b_h), shape (H, S, A, B)."""
    pt = as_table(policy)
    d = state_distribution(game, pt, nu)
    return np.einsum("hs,hsb,hsba->hsab", d, nu, pt)


class PrescriptionGrid:
    """Deterministic prescriptions first, then the simplex mesh, in a fixed lexicographic order."""

    def __init__(self, A: int, B: int, mesh: int | None = 10):
        if A < 1 or B < 1:
            raise EmptyGrid("grid needs positive action counts")
        self.A, self.B, self.mesh = A, B, mesh
        eye = np.eye(A)
        det = [np.stack([eye[i] for i in combo]) for combo in itertools.product(range(A), repeat=B)]
        items = list(det)
        if mesh is not None and mesh > 1:
            rows = [np.array(c, dtype=float) / mesh for c in _compositions(mesh, A)]
            n_total = len(rows) ** B
            if n_total > MAX_GRID:
                raise TooLarge(f"grid of size {n_total} exceeds {MAX_GRID}")
            for combo in itertools.product(range(len(rows)), repeat=B):
                alpha = np.stack([rows[i] for i in combo])
                if np.all(alpha.max(axis=1) == 1.0):
                    continue
                items.append(alpha)
        self.alphas = np.stack(items)
        self.alphas.setflags(write=False)
        self.num_deterministic = len(det)

    def __len__(self):
        return len(self.alphas)

    @classmethod
    def deterministic(cls, A: int, B: int) -> "PrescriptionGrid":
        return cls(A, B, mesh=None)


def _compositions(m: int, k: int):
    """Nonnegative integer k-vectors summing to m, in lexicographic order."""
    if k == 1:
        yield (m,)
        return
    for first in range(m + 1):
        for rest in _compositions(m - first, k - 1):
            yield (first,) + rest


def grid_responses(rewards: np.ndarray, alphas: np.ndarray, eta: float) -> np.ndarray:
    """Myopic responses nu^{alpha,r}(.|s) for every reward table and grid point.

    ``rewards``: (..., A, B) -> result (..., G, B).
    """
    r_alpha = np.einsum("gba,...ab->...gb", alphas, rewards)
    return softmax(eta * r_alpha, axis=-1)


def grid_values(U_s: np.ndarray, rewards: np.ndarray, alphas: np.ndarray, eta: float):
    """<U(s), alpha (x) nu^{alpha}(s)> for every grid point; also returns the responses."""
    nu = grid_responses(rewards, alphas, eta)
    vals = np.einsum("gba,...gb,...ab->...g", alphas, nu, U_s)
    return vals, nu


def lex_argmax(values: np.ndarray) -> int:
    vmax = values.max()
    return int(np.flatnonzero(values >= vmax - TIE_TOL * (1.0 + abs(vmax)))[0])


def prescription_argmax(U_s, rewards, eta: float, grid, penalty=None, inner: str = "min"):
    """Score every grid prescription and return ``(index, prescription, value)``.

    ``rewards`` is one follower reward table ``(A, B)`` at the state or a
    finite sample ``(K, A, B)`` standing in for a confidence set; the inner
    reduction over the sample is ``inner`` ("min" or "max").  ``penalty`` is
    added to the score: an array ``(K, G)``/``(G,)`` or a callable
    ``penalty(k) -> (G,)``.  Pass a negated penalty for pessimism.
    """
    alphas = grid.alphas if isinstance(grid, PrescriptionGrid) else np.asarray(grid)
    if alphas.size == 0:
        raise EmptyGrid("empty prescription grid")
    rw = np.asarray(rewards, dtype=float)
    if rw.ndim == 2:
        rw = rw[None]
    if rw.shape[0] == 0:
        raise EmptyThetaSample("empty theta sample")
    U_s = np.asarray(U_s, dtype=float)
    if U_s.shape != rw.shape[1:] or alphas.shape[1:] != (U_s.shape[1], U_s.shape[0]):
        raise DimensionMismatch("value table, rewards and grid disagree on (A, B)")
    vals, _ = grid_values(U_s, rw, alphas, eta)  # (K, G)
    if penalty is not None:
        if callable(penalty):
            pen = np.stack([np.asarray(penalty(k), dtype=float) for k in range(rw.shape[0])])
        else:
            pen = np.broadcast_to(np.asarray(penalty, dtype=float), vals.shape)
        vals = vals + pen
    if inner == "min":
        score = vals.min(axis=0)
    elif inner == "max":
        score = vals.max(axis=0)
    else:
        raise ValueError(f"unknown inner reduction {inner!r}")
    i = lex_argmax(score)
    return i, alphas[i], float(score[i])


@dataclass(frozen=True)
class QSESolution:
    policy: LeaderPolicy
    J_star: float
    W: np.ndarray  # (H, S) optimal leader values
    U: np.ndarray  # (H, S, A, B) optimal leader action values
    grid_index: np.ndarray  # (H, S)


def solve_qse_myopic(game: MarkovGame, grid: PrescriptionGrid, follower_reward=None) -> QSESolution:
    """Backward DP over the grid; exact over grid-valued policies for a myopic follower."""
    if not game.myopic:
        raise NotMyopic("exact QSE by dynamic programming needs gamma = 0")
    S, A, B, H = game.dims
    r = game.r if follower_reward is None else np.asarray(follower_reward, dtype=float)
    alphas = grid.alphas
    if alphas.shape[1:] != (B, A):
        raise DimensionMismatch("grid does not match game action counts")
    U = np.empty((H, S, A, B))
    W = np.empty((H, S))
    idx = np.empty((H, S), dtype=int)
    table = np.empty((H, S, B, A))
    w_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        U[h] = game.u[h] + game.P[h] @ w_next
        vals, _ = grid_values(U[h], r[h], alphas, game.eta)  # (S, G)
        for s in range(S):
            i = lex_argmax(vals[s])
            idx[h, s] = i
            W[h, s] = vals[s, i]
            table[h, s] = alphas[i]
        w_next = W[h]
    return QSESolution(
        policy=LeaderPolicy(table), J_star=float(game.rho0 @ W[0]), W=W, U=U, grid_index=idx
    )


def suboptimality(game: MarkovGame, policy, reference_Jstar: float) -> float:
    return float(reference_Jstar - evaluate_J(game, policy))
