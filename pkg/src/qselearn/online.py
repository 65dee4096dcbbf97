"""Online optimistic learners and regret accounting.

The learners below only interact with an :class:`Environment`, which exposes
public quantities (dimensions, features, eta, rho0) and an ``announce`` method
that plays one episode.  Exact per-episode J(pi^t) is computed outside the
learner for the regret trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyConfidenceSet, EmptyModelSet, NotMyopic
from .game import Dataset, LeaderPolicy, MarkovGame, as_table, rng_stream, sample_trajectory
from .mle import ChoiceData, confidence_set, fit_mle_myopic, policy_features
from .offline import PenaltyConsts, _ridge, myopic_advantage_bound, plan_step
from .planner import PrescriptionGrid, evaluate_J, grid_values, lex_argmax, solve_qse_myopic
from .response import quantal_response


@dataclass(frozen=True)
class PublicInfo:
    S: int
    A: int
    B: int
    H: int
    eta: float
    gamma: float
    rho0: np.ndarray
    phi: np.ndarray | None = None


class Environment:
    """Hidden game; learners see ``public`` and call ``announce``."""

    def __init__(self, game: MarkovGame, seed: int = 0, phi: np.ndarray | None = None):
        self.__game = game
        self.__seed = seed
        self.__t = 0
        S, A, B, H = game.dims
        self.public = PublicInfo(S, A, B, H, game.eta, game.gamma, np.array(game.rho0), phi)

    def announce(self, policy: LeaderPolicy):
        resp = quantal_response(self.__game, policy)
        traj = sample_trajectory(self.__game, policy, resp, rng_stream(self.__seed, 0x0E, self.__t),
                                 policy_id=self.__t)
        self.__t += 1
        return traj


class Evaluator:
    """Evaluation-only access to the true game for regret bookkeeping."""

    def __init__(self, game: MarkovGame):
        self._game = game
        self._cache: dict = {}

    def J(self, policy) -> float:
        key = as_table(policy).tobytes()
        if key not in self._cache:
            self._cache[key] = evaluate_J(self._game, policy)
        return self._cache[key]


@dataclass
class RegretTrace:
    scheme: str
    seed: int
    J_star: float
    beta: float
    J: list = field(default_factory=list)
    subopt: list = field(default_factory=list)
    cum_regret: list = field(default_factory=list)
    sampled_return: list = field(default_factory=list)
    policy_ids: list = field(default_factory=list)
    optimistic_value: list = field(default_factory=list)
    truth_in_set: list = field(default_factory=list)
    dataset: Dataset = field(default_factory=Dataset, repr=False)

    def record(self, J_t: float, ret: float, policy_id: int) -> None:
        gap = self.J_star - J_t
        prev = self.cum_regret[-1] if self.cum_regret else 0.0
        self.J.append(J_t)
        self.subopt.append(gap)
        self.cum_regret.append(prev + gap)
        self.sampled_return.append(ret)
        self.policy_ids.append(policy_id)

    def recompute_regret(self) -> list:
        out, acc = [], 0.0
        for j in self.J:
            acc = acc + (self.J_star - j)
            out.append(acc)
        return out

    def regret_at(self, t: int) -> float:
        return self.cum_regret[t - 1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "J_pi_t", "subopt_t", "cum_regret", "sampled_return", "beta", "scheme", "seed"])
            for i, (j, g, c, r) in enumerate(zip(self.J, self.subopt, self.cum_regret, self.sampled_return)):
                w.writerow([i + 1, repr(j), repr(g), repr(c), repr(r), repr(self.beta), self.scheme, self.seed])


def beta_online(d: int, H: int, eta: float, T: int, delta: float, c: float = 1.0) -> float:
    """beta = c d log(H T (1 + eta T^2) / delta)."""
    return c * d * math.log(H * max(T, 1) * (1.0 + eta * T**2) / delta)


class _StepBuffer:
    """Growing per-step history for one h."""

    def __init__(self, T: int, B: int, d: int):
        self.X = np.zeros((T, B, d))  # policy-integrated features
        self.F = np.zeros((T, d))  # phi(s, a, b) of the visited triple
        self.b = np.zeros(T, dtype=int)
        self.u = np.zeros(T)
        self.s2 = np.zeros(T, dtype=int)
        self.n = 0

    def add(self, X, F, b, u, s2):
        i = self.n
        self.X[i], self.F[i], self.b[i], self.u[i], self.s2[i] = X, F, b, u, s2
        self.n += 1

    def choice(self, eta) -> ChoiceData:
        return ChoiceData(self.X[: self.n], self.b[: self.n], eta)


class OVILearner:
    """Optimistic value iteration with MLE follower model (schemes S4/S5)."""

    def __init__(self, info: PublicInfo, T: int, scheme: str = "S5", beta: float | None = None, c1: float = 1.0,
                 grid: PrescriptionGrid | None = None, delta: float = 0.1, B_theta: float | None = None,
                 sample_size: int = 64, gamma2_scale: float = 1.0, seed: int = 0, fixed_theta=None):
        if info.gamma != 0.0:
            raise NotMyopic("MLE-OVI assumes a myopic follower")
        self.info = info
        self.scheme = scheme.upper()
        if self.scheme not in ("S4", "S5"):
            raise ValueError(f"unknown online scheme {scheme!r}")
        H, S, A, B, d = info.phi.shape
        self.H, self.S, self.d = H, S, d
        self.grid = grid or PrescriptionGrid(A, B, 10)
        self.T = T
        self.beta = beta_online(d, H, info.eta, T, delta) if beta is None else float(beta)
        self.c1 = c1
        self.log_term = math.log(2 * d * H * T**2 / delta)
        self.B_theta = math.sqrt(d) if B_theta is None else float(B_theta)
        self.sample_size = sample_size
        self.seed = seed
        self.consts = PenaltyConsts(eta=info.eta, B_A=myopic_advantage_bound(info.eta, B), B_theta=self.B_theta,
                                    beta=self.beta, H=H, scale=gamma2_scale)
        self.fixed_theta = None if fixed_theta is None else np.asarray(fixed_theta, dtype=float)
        self.buf = [_StepBuffer(T, B, d) for _ in range(H)]
        self.theta_hat = np.zeros((H, d))
        self.t = 0
        self.last_value = None

    def policy(self) -> LeaderPolicy:
        info, H, S, d = self.info, self.H, self.S, self.d
        phi = info.phi
        table = np.zeros((H, S, info.B, info.A))
        W_next = np.zeros(S)
        for h in range(H - 1, -1, -1):
            bf = self.buf[h]
            n = bf.n
            F = bf.F[:n]
            Lam = np.eye(d) + F.T @ F
            rhs = F.T @ (bf.u[:n] + W_next[bf.s2[:n]])
            rr = _ridge(phi[h], Lam, rhs, self.c1, H, d, self.log_term)
            U_h = np.clip(rr.fitted + rr.gamma1, 0.0, H - h)
            data = bf.choice(info.eta)
            if self.fixed_theta is not None:
                thetas = self.fixed_theta[h][None]
                plan = plan_step(U_h, phi[h], thetas, info.eta, self.grid.alphas, inner="max")
            else:
                fit = fit_mle_myopic(data, bound=self.B_theta, theta0=self.theta_hat[h])
                self.theta_hat[h] = fit.theta
                if self.scheme == "S5":
                    plan = plan_step(U_h, phi[h], fit.theta[None], info.eta, self.grid.alphas, inner="max",
                                     gamma2_sign=1.0, data=data, consts=self.consts)
                else:
                    cs = confidence_set(data, self.beta, sample_size=self.sample_size, bound=self.B_theta,
                                        B_A=self.consts.B_A, seed=self.seed * 100003 + self.t * 31 + h, fit=fit)
                    plan = plan_step(U_h, phi[h], cs.theta_sample, info.eta, self.grid.alphas, inner="max")
            table[h] = plan.table
            W_next = plan.W
        self.last_value = float(info.rho0 @ W_next)
        return LeaderPolicy(table)

    def observe(self, traj, policy: LeaderPolicy) -> None:
        pt = policy.table
        phi = self.info.phi
        for h, s, a, b, u, s2 in traj.steps():
            X = policy_features(phi[h], [s], pt[h, s][None])[0]
            self.buf[h].add(X, phi[h, s, a, b], b, u, s2)
        self.t += 1


def _reference_Jstar(game: MarkovGame, grid: PrescriptionGrid) -> float:
    return solve_qse_myopic(game, grid).J_star


def mle_ovi(game: MarkovGame, T: int, scheme: str = "S5", phi: np.ndarray | None = None, beta=None,
            c1: float = 1.0, grid: PrescriptionGrid | None = None, seed: int = 0, delta: float = 0.1,
            B_theta=None, sample_size: int = 64, gamma2_scale: float = 1.0, J_star: float | None = None,
            fixed_theta=None) -> RegretTrace:
    if phi is None:
        from .game import embed_linear

        phi = embed_linear(game).phi
    S, A, B, H = game.dims
    grid = grid or PrescriptionGrid(A, B, 10)
    env = Environment(game, seed=seed, phi=phi)
    learner = OVILearner(env.public, T, scheme=scheme, beta=beta, c1=c1, grid=grid, delta=delta, B_theta=B_theta,
                         sample_size=sample_size, gamma2_scale=gamma2_scale, seed=seed, fixed_theta=fixed_theta)
    ev = Evaluator(game)
    Js = _reference_Jstar(game, grid) if J_star is None else J_star
    trace = RegretTrace(scheme=scheme.upper(), seed=seed, J_star=Js, beta=learner.beta)
    for t in range(T):
        pol = learner.policy()
        traj = env.announce(pol)
        learner.observe(traj, pol)
        trace.dataset.append(traj, pol)
        trace.optimistic_value.append(learner.last_value)
        trace.record(ev.J(pol), float(traj.leader_rewards.sum()), traj.policy_id)
    return trace


# ---------------------------------------------------------------- finite classes


class GolfLearner:
    """Optimistic selection from finite (U, theta) classes with a GOLF-style loss."""

    def __init__(self, info: PublicInfo, U_class, theta_class, beta: float, grid: PrescriptionGrid):
        self.info = info
        self.U = np.stack([np.asarray(U, dtype=float) for U in U_class])  # (nU, H, S, A, B)
        self.Th = np.stack([np.asarray(t, dtype=float) for t in theta_class])  # (nT, H, S, A, B)
        self.beta = float(beta)
        self.grid = grid
        nU, H, S = self.U.shape[:3]
        nT = len(self.Th)
        self.H = H
        # best grid value and greedy index for every (k, j, h, s)
        self.best = np.zeros((nU, nT, H + 1, S))
        self.greedy = np.zeros((nU, nT, H, S), dtype=int)
        for k in range(nU):
            for j in range(nT):
                for h in range(H):
                    vals, _ = grid_values(self.U[k, h], self.Th[j, h], grid.alphas, info.eta)  # (S, G)
                    for s in range(S):
                        i = lex_argmax(vals[s])
                        self.greedy[k, j, h, s] = i
                        self.best[k, j, h, s] = vals[s, i]
        self.nll = np.zeros((nT, H))
        self.loss = np.zeros((nU, nU, nT, H))  # (m: candidate U', k: next U, j, h)
        self.last_pair = None
        self.last_value = None

    def confidence_pairs(self):
        H = self.H
        nll_ok = np.all(self.nll - self.nll.min(axis=0) <= self.beta, axis=1)  # (nT,)
        own = np.einsum("kkjh->kjh", self.loss)
        gap = own - self.loss.min(axis=0)  # (k, j, h)
        loss_ok = np.all(gap <= H**2 * self.beta, axis=2)
        return loss_ok & nll_ok[None, :]

    def policy(self) -> LeaderPolicy:
        ok = self.confidence_pairs()
        if not ok.any():
            raise EmptyConfidenceSet("no (U, theta) pair passes both sublevel tests")
        init = np.einsum("s,kjs->kj", self.info.rho0, self.best[:, :, 0])
        score = np.where(ok, init, -np.inf).ravel()
        flat = lex_argmax(score)
        k, j = divmod(flat, ok.shape[1])
        self.last_pair = (int(k), int(j))
        self.last_value = float(init[k, j])
        table = self.grid.alphas[self.greedy[k, j]]  # (H, S, B, A)
        return LeaderPolicy(table)

    def observe(self, traj, policy: LeaderPolicy) -> None:
        eta = self.info.eta
        pt = policy.table
        for h, s, a, b, u, s2 in traj.steps():
            logits = eta * np.einsum("ba,jab->jb", pt[h, s], self.Th[:, h, s])
            lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
            self.nll[:, h] += lse - logits[:, b]
            nxt = self.best[:, :, h + 1, s2]  # (k, j); zero at the last step
            resid = self.U[:, h, s, a, b][:, None, None] - u - nxt[None]
            self.loss[:, :, :, h] += resid**2


def mle_golf(game: MarkovGame, T: int, U_class, theta_class, beta: float, grid: PrescriptionGrid | None = None,
             seed: int = 0, J_star: float | None = None, true_pair=None) -> RegretTrace:
    S, A, B, H = game.dims
    grid = grid or PrescriptionGrid(A, B, 10)
    env = Environment(game, seed=seed)
    learner = GolfLearner(env.public, U_class, theta_class, beta, grid)
    ev = Evaluator(game)
    Js = _reference_Jstar(game, grid) if J_star is None else J_star
    trace = RegretTrace(scheme="GOLF", seed=seed, J_star=Js, beta=float(beta))
    for t in range(T):
        if true_pair is not None:
            trace.truth_in_set.append(bool(learner.confidence_pairs()[true_pair]))
        pol = learner.policy()
        traj = env.announce(pol)
        learner.observe(traj, pol)
        trace.dataset.append(traj, pol)
        trace.optimistic_value.append(learner.last_value)
        trace.record(ev.J(pol), float(traj.leader_rewards.sum()), traj.policy_id)
    return trace


class OMLELearner:
    """Optimistic joint (policy, model) selection for a farsighted follower."""

    def __init__(self, info: PublicInfo, model_class, policy_class, beta: float):
        self.info = info
        self.models = list(model_class)
        self.policies = [LeaderPolicy(as_table(p)) for p in policy_class]
        self.beta = float(beta)
        self.H = info.H
        nM, nP = len(self.models), len(self.policies)
        self.J = np.array([[evaluate_J(M, p) for M in self.models] for p in self.policies])  # (nP, nM)
        self.adv = [[quantal_response(M, p).A for M in self.models] for p in self.policies]
        self.nll = np.zeros((nM, self.H))
        self.last_choice = None
        self.last_value = None

    def confidence_models(self) -> np.ndarray:
        best = self.nll.min(axis=0)
        if np.any(~np.isfinite(best)):
            raise EmptyModelSet("every model has zero likelihood at some step")
        return np.all(self.nll - best <= self.beta, axis=1)

    def policy(self) -> int:
        ok = self.confidence_models()
        if not ok.any():
            raise EmptyModelSet("generalized-likelihood confidence set is empty")
        score = np.where(ok[None, :], self.J, -np.inf).ravel()
        flat = lex_argmax(score)
        p, m = divmod(flat, len(self.models))
        self.last_choice = (int(p), int(m))
        self.last_value = float(self.J[p, m])
        return int(p)

    def observe(self, traj, p: int) -> None:
        for i, M in enumerate(self.models):
            Adv = self.adv[p][i]
            for h, s, a, b, u, s2 in traj.steps():
                prob = M.P[h, s, a, b, s2]
                if prob <= 0.0:
                    self.nll[i, h] = math.inf
                    continue
                self.nll[i, h] -= M.eta * Adv[h, s, b] + math.log(prob) - (u - M.u[h, s, a, b]) ** 2


def omle_farsighted(game: MarkovGame, T: int, model_class, policy_class, beta: float, seed: int = 0,
                    J_star: float | None = None, true_index: int | None = None) -> RegretTrace:
    env = Environment(game, seed=seed)
    learner = OMLELearner(env.public, model_class, policy_class, beta)
    ev = Evaluator(game)
    Js = max(ev.J(p) for p in learner.policies) if J_star is None else J_star
    trace = RegretTrace(scheme="OMLE", seed=seed, J_star=Js, beta=float(beta))
    for t in range(T):
        if true_index is not None:
            trace.truth_in_set.append(bool(learner.confidence_models()[true_index]))
        p = learner.policy()
        pol = learner.policies[p]
        traj = env.announce(pol)
        learner.observe(traj, p)
        trace.dataset.append(traj, pol)
        trace.optimistic_value.append(learner.last_value)
        trace.record(ev.J(pol), float(traj.leader_rewards.sum()), traj.policy_id)
    return trace
