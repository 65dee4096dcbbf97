"""Brute-force verifiers for the structural lemmas and exact planners.

Everything here evaluates expectations exactly by forward enumeration of the
state marginals, so checks are deterministic and independent of sampling.
"""

from __future__ import annotations

import itertools
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import TooLarge
from .game import LeaderPolicy, MarkovGame, as_table, eff_horizon, make_random_game, random_policy, rng_stream
from .mle import ChoiceData, fit_mle_myopic, nll_grad, nll_myopic, pinv_psd, state_covariance
from .offline import c3_constant
from .planner import PrescriptionGrid, evaluate_J, leader_values, occupancy, state_distribution
from .response import (
    entropy_objective,
    hellinger_sq,
    kl_divergence,
    policy_reward,
    policy_transition,
    quantal_response,
    tv_distance,
)

BRUTE_LIMIT = 1_000_000


# ---------------------------------------------------------------- exact planners


def brute_force_qse(game: MarkovGame, grid: PrescriptionGrid | None = None, policies=None):
    """Max of J over every grid-valued policy (or over an explicit policy list)."""
    if policies is not None:
        vals = [evaluate_J(game, p) for p in policies]
        i = int(np.argmax(vals))
        return LeaderPolicy(as_table(policies[i])), float(vals[i])
    S, A, B, H = game.dims
    alphas = grid.alphas
    G = len(alphas)
    n = G ** (H * S)
    if n > BRUTE_LIMIT:
        raise TooLarge(f"{n} candidate policies exceed {BRUTE_LIMIT}")
    best, best_idx = -math.inf, None
    for combo in itertools.product(range(G), repeat=H * S):
        table = alphas[np.array(combo)].reshape(H, S, B, A)
        v = evaluate_J(game, table)
        if v > best:
            best, best_idx = v, table
    return LeaderPolicy(best_idx), float(best)


def _simplex_mesh(B: int, m: int) -> np.ndarray:
    if B == 1:
        return np.ones((1, 1))
    if B == 2:
        x = np.arange(m + 1) / m
        return np.stack([x, 1 - x], axis=1)
    pts = []
    for i in range(m + 1):
        j = np.arange(m + 1 - i)
        pts.append(np.stack([np.full_like(j, i), j, m - i - j], axis=1))
    out = np.concatenate(pts).astype(float) / m
    if B == 3:
        return out
    raise TooLarge("simplex mesh oracle supports |B| <= 3")


def entropy_grid_oracle(game: MarkovGame, policy, sol=None, mesh: int = 1000, n_joint: int = 200, seed: int = 0):
    """Largest improvement in the entropy-regularized objective G found by search.

    Searches (i) every single-state perturbation of nu over a simplex mesh,
    where the change in G is exactly gamma^h d_h(s) (g(q) - g(nu_h(s))) with g
    the one-step regularized value under exact policy evaluation of nu, and
    (ii) ``n_joint`` random joint mesh points evaluated by full evaluation of G.
    """
    pt = as_table(policy)
    sol = sol or quantal_response(game, pt)
    S, A, B, H = game.dims
    eta, gamma = game.eta, game.gamma
    nu = sol.nu
    base = entropy_objective(game, pt, nu)
    rpi = policy_reward(game.r, pt)
    Ppi = policy_transition(game.P, pt)
    d = state_distribution(game, pt, nu)
    # exact evaluation of nu (not the soft-max recursion)
    v_eval = np.zeros((H + 1, S))
    qe = np.zeros((H, S, B))
    for h in range(H - 1, -1, -1):
        qe[h] = rpi[h] + gamma * Ppi[h] @ v_eval[h + 1]
        ent = -np.where(nu[h] > 0, nu[h] * np.log(np.where(nu[h] > 0, nu[h], 1.0)), 0.0).sum(-1)
        v_eval[h] = (nu[h] * qe[h]).sum(-1) + ent / eta

    grid = _simplex_mesh(B, mesh)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent_grid = -np.where(grid > 0, grid * np.log(grid), 0.0).sum(-1)
    best = 0.0
    for h in range(H):
        w = gamma**h if gamma > 0 else (1.0 if h == 0 else 0.0)
        for s in range(S):
            cur = nu[h, s] @ qe[h, s] + (-(nu[h, s] * np.log(nu[h, s])).sum()) / eta
            g = grid @ qe[h, s] + ent_grid / eta
            best = max(best, w * d[h, s] * float(g.max() - cur))
    rng = rng_stream(seed, 0xE7)
    for _ in range(n_joint):
        idx = rng.integers(len(grid), size=(H, S))
        cand = grid[idx]
        best = max(best, entropy_objective(game, pt, cand) - base)
    return best


# ---------------------------------------------------------------- performance difference


@dataclass
class PDReport:
    lhs: float
    rhs: float
    ok: bool
    identity_error: float
    lhs_w: float = math.nan
    rhs_w: float = math.nan
    ok_w: bool = True
    identity_error_w: float = 0.0
    rme_lhs: float = math.nan
    rme_rhs: float = math.nan
    rme_ok: bool = True


def _T(U, pt, nu):
    return np.einsum("hsab,hsba,hsb->hs", U, pt, nu)


def check_performance_difference(game: MarkovGame, policy, r_tilde, U_tilde, W_tilde=None, tol=1e-9) -> PDReport:
    """Both sides of the performance-difference bounds, evaluated exactly.

    ``r_tilde`` (H,S,A,B) defines the estimated response nu~; ``U_tilde``
    (H,S,A,B) and optionally ``W_tilde`` (H,S) are the leader value estimates.
    Also checks the response-model-error bound on the same instance.
    """
    pt = as_table(policy)
    S, A, B, H = game.dims
    sol = quantal_response(game, pt)
    sol_t = quantal_response(game, pt, r_tilde)
    nu, nut = sol.nu, sol_t.nu
    J = leader_values(game, pt, sol).J(game.rho0)
    d = state_distribution(game, pt, nu)
    occ = occupancy(game, pt, nu)
    U_tilde = np.asarray(U_tilde, dtype=float)
    TU = _T(U_tilde, pt, nut)
    TU_true = _T(U_tilde, pt, nu)
    TU_next = np.concatenate([TU[1:], np.zeros((1, S))])

    lbe = float(np.sum(occ * (U_tilde - game.u)) - np.einsum("hsab,hsabt,ht->", occ, game.P, TU_next))
    qre = float(H * np.sum(d * np.abs(nut - nu).sum(-1)))
    resp = float(np.sum(d * (TU - TU_true)))
    lhs = float(game.rho0 @ TU[0] - J)
    rhs = lbe + qre
    rep = PDReport(lhs=lhs, rhs=rhs, ok=lhs <= rhs + tol, identity_error=abs(lhs - lbe - resp))

    if W_tilde is not None:
        W_tilde = np.asarray(W_tilde, dtype=float)
        W_next = np.concatenate([W_tilde[1:], np.zeros((1, S))])
        lbe_w = float(np.sum(occ * (U_tilde - game.u)) - np.einsum("hsab,hsabt,ht->", occ, game.P, W_next))
        vm = float(np.sum(d * (W_tilde - TU)))
        lhs_w = float(game.rho0 @ W_tilde[0] - J)
        rep.lhs_w, rep.rhs_w = lhs_w, lbe_w + vm + qre
        rep.ok_w = lhs_w <= rep.rhs_w + tol
        rep.identity_error_w = abs(lhs_w - lbe_w - vm - resp)

    # response-model error: H * sum_h E|nu~ - nu|_1 <= C0 * first order + C1 * second order
    B_A = max(sol.advantage_bound, np.abs(sol.A).max(), np.abs(sol_t.A).max())
    eta, gamma = game.eta, game.gamma
    delta1 = _first_order_error(game, pt, sol, sol_t)
    first = float(np.sum(d[..., None] * nu * np.abs(delta1)))
    second = float(np.sum(d[..., None] * nu * (sol_t.A - sol.A) ** 2))
    C0 = 2 * eta * H
    C1 = eta**2 * H * (1 + 4 * eff_horizon(gamma, H)) * math.exp(2 * eta * B_A)
    rep.rme_lhs = qre
    rep.rme_rhs = C0 * first + C1 * second
    rep.rme_ok = qre <= rep.rme_rhs + tol
    return rep


def _first_order_error(game, pt, sol, sol_t):
    """(E_{s,b} - E_s)[sum_{l>=h} gamma^{l-h} (Q~ - r^pi - gamma P^pi V~)_l] under the true law."""
    S, A, B, H = game.dims
    gamma = game.gamma
    rpi = policy_reward(game.r, pt)
    Ppi = policy_transition(game.P, pt)
    Vt_next = np.concatenate([sol_t.V[1:], np.zeros((1, S))])
    err = sol_t.Q - rpi - gamma * np.einsum("hsbt,ht->hsb", Ppi, Vt_next)
    G = np.zeros((H, S, B))
    nxt = np.zeros(S)
    for h in range(H - 1, -1, -1):
        G[h] = err[h] + gamma * Ppi[h] @ nxt
        nxt = (sol.nu[h] * G[h]).sum(-1)
    return G - (sol.nu * G).sum(-1, keepdims=True)


# ---------------------------------------------------------------- response lemmas


@dataclass
class BoundReport:
    slacks: dict = field(default_factory=dict)  # name -> minimal slack (>= -tol means pass)

    def ok(self, tol: float = 1e-9) -> bool:
        return all(v >= -tol for v in self.slacks.values())

    def failures(self, tol: float = 1e-9) -> list:
        return [k for k, v in self.slacks.items() if v < -tol]


def _a_difference_error(game, pt, sol, sol_t) -> float:
    """Max deviation from A - A~ = D - E_nu D + KL/eta, with D built from one-step errors.

    D_h = e_h + gamma P^pi [E_nu D_{h+1} - KL_{h+1}/eta], e_h = r^pi + gamma P^pi V~_{h+1} - Q~_h.
    """
    S, A, B, H = game.dims
    gamma, eta = game.gamma, game.eta
    nu, nut = sol.nu, sol_t.nu
    kl = kl_divergence(nu, nut, strict=False)  # (H, S)
    rpi = policy_reward(game.r, pt)
    Ppi = policy_transition(game.P, pt)
    Vt_next = np.concatenate([sol_t.V[1:], np.zeros((1, S))])
    e = rpi + gamma * np.einsum("hsbt,ht->hsb", Ppi, Vt_next) - sol_t.Q
    D = np.zeros((H, S, B))
    cont = np.zeros(S)
    for h in range(H - 1, -1, -1):
        D[h] = e[h] + gamma * Ppi[h] @ cont
        cont = (nu[h] * D[h]).sum(-1) - kl[h] / eta
    rhs = D - (nu * D).sum(-1, keepdims=True) + kl[..., None] / eta
    lhs = sol.A - sol_t.A
    return float(np.abs(lhs - rhs).max())


def check_response_bounds(sol, sol_t, game: MarkovGame | None = None, rng=None, n_g: int = 4) -> BoundReport:
    """Evaluate the quantal-response lemmas at every (h, s) for two solutions under one policy."""
    eta = sol.eta
    nu, nut = sol.nu, sol_t.nu
    A, At = sol.A, sol_t.A
    B_A = max(sol.advantage_bound, np.abs(A).max(), np.abs(At).max())
    diff = At - A
    ad = np.abs(diff)
    tv = tv_distance(nu, nut)
    rep = BoundReport()
    ub = eta * (nu * (ad + 0.5 * eta * np.exp(eta * ad) * diff**2)).sum(-1)
    rep.slacks["tv_upper"] = float((ub - tv).min())
    lb1 = eta / (2 * (1 + 2 * eta * B_A)) * (nu * ad).sum(-1)
    rep.slacks["tv_lower_1"] = float((tv - lb1).min())
    lb2 = 0.5 * (nu * eta * np.exp(-eta * ad) * ad).sum(-1)
    rep.slacks["tv_lower_2"] = float((tv - lb2).min())
    hl = eta**2 / (8 * (1 + eta * B_A) ** 2) * (nu * diff**2).sum(-1)
    rep.slacks["hellinger_lower"] = float((hellinger_sq(nu, nut) - hl).min())
    kl = kl_divergence(nu, nut, strict=False)
    klub = eta * ((nu - nut) * (sol.Q - sol_t.Q)).sum(-1)
    rep.slacks["kl_upper"] = float((klub - kl).min())

    if game is not None:
        rep.slacks["a_difference"] = -_a_difference_error(game, sol.policy, sol, sol_t)
        if game.gamma == 0.0:
            rpi = policy_reward(game.r, sol.policy)
            rtp = policy_reward(sol_t.follower_reward, sol.policy)
            dr = rtp - rpi
            c = dr - (nu * dr).sum(-1, keepdims=True)
            # dr = r~ - r, so A - A~ = -c + KL/eta
            my = (A - At) - (-c + kl[..., None] / eta)
            rep.slacks["a_difference_myopic"] = -float(np.abs(my).max())
            C3 = c3_constant(eta, B_A)
            bound = eta * (nu * np.abs(c)).sum(-1) + C3 * (nu * c**2).sum(-1)
            rep.slacks["tv_myopic"] = float((bound - tv).min())

    rng = rng if rng is not None else np.random.default_rng(0)
    e2 = math.exp(2 * eta * B_A)
    worst_u, worst_l = math.inf, math.inf
    for idx in np.ndindex(nu.shape[:-1]):
        p, q = nu[idx], nut[idx]
        L = np.diag(p) - np.outer(p, p)
        Hm = np.diag(q) - np.outer(q, q)
        for _ in range(n_g):
            g = rng.standard_normal(len(p))
            gl, gh = g @ L @ g, g @ Hm @ g
            worst_u = min(worst_u, e2 * gl - gh)
            worst_l = min(worst_l, gh - gl / e2)
    rep.slacks["hessian_upper"] = float(worst_u)
    rep.slacks["hessian_lower"] = float(worst_l)
    return rep


def check_linear_tv_corollary(X: np.ndarray, theta_star, theta_tilde, eta: float, Psi: np.ndarray, B_A: float):
    """TV(nu*, nu~) <= min over both covariances of f(sqrt(tr(Psi^+ Sigma)) |theta* - theta~|_Psi).

    ``X``: (B, d) policy-integrated features at one state.  Returns slack.
    """
    nu_s = softmax(eta * X @ theta_star)
    nu_t = softmax(eta * X @ theta_tilde)
    A_s = eta * X @ theta_star
    A_t = eta * X @ theta_tilde
    B_A = max(B_A, np.abs(A_s / eta - logsumexp(A_s) / eta).max(), np.abs(A_t / eta - logsumexp(A_t) / eta).max())
    C3 = c3_constant(eta, B_A)
    Pinv = pinv_psd(Psi)
    dt = np.asarray(theta_star) - np.asarray(theta_tilde)
    norm = math.sqrt(max(dt @ Psi @ dt, 0.0))
    vals = []
    for nu in (nu_t, nu_s):
        Sig = state_covariance(X, nu)
        x = math.sqrt(max(np.trace(Pinv @ Sig), 0.0)) * norm
        vals.append(eta * x + C3 * x**2)
    return float(min(vals) - tv_distance(nu_s, nu_t))


def identification_slack(nu, x, r, r_tilde) -> float:
    """(1 + |x/nu|_inf / |<x,1>|) eps - <nu, |r - r~|> with eps the weighted-median deviation."""
    nu, x = np.asarray(nu, dtype=float), np.asarray(x, dtype=float)
    dlt = np.asarray(r, dtype=float) - np.asarray(r_tilde, dtype=float)
    eps = min(float(nu @ np.abs(dlt - xi)) for xi in dlt)
    kappa = np.abs(x / nu).max() / abs(x.sum())
    return float((1 + kappa) * eps - nu @ np.abs(dlt))


def elliptical_potential_bound(B_phi_sq: float, d: int, T: int) -> float:
    """sqrt(C0 d T log(1 + 4 B_phi^2 T / d)) with C0 = 4 B_phi^2 / log(1 + B_phi^2)."""
    c0 = 4.0 * B_phi_sq / math.log1p(B_phi_sq)
    return math.sqrt(c0 * d * T * math.log1p(4.0 * B_phi_sq * T / d))


def elliptical_potential_sum(X_seq) -> float:
    """sum_t sqrt(tr(U_{t-1}^{-1} X_t)) with U_0 = I, U_t = U_{t-1} + X_t."""
    d = X_seq[0].shape[0]
    U = np.eye(d)
    tot = 0.0
    for X in X_seq:
        tot += math.sqrt(max(np.trace(np.linalg.solve(U, X)), 0.0))
        U = U + X
    return tot


# ---------------------------------------------------------------- statistics


def empirical_coverage(sample_data, theta_star, beta_rule, reps: int = 200, bound: float = math.inf) -> float:
    """Fraction of replications whose confidence set contains theta*.

    ``sample_data(rep) -> ChoiceData`` draws a replication; ``beta_rule(data)``
    gives beta.
    """
    hits = 0
    for i in range(reps):
        data = sample_data(i)
        beta = beta_rule(data)
        if not math.isfinite(beta):
            hits += 1
            continue
        fit = fit_mle_myopic(data, bound=bound)
        if nll_myopic(theta_star, data) - fit.nll <= beta:
            hits += 1
    return hits / reps


def hellinger_accuracy_slack(data: ChoiceData, theta, theta_star, beta: float) -> float:
    """(NLL(theta) - NLL(theta*) + beta)/2 minus the summed squared Hellinger distance of the responses."""
    eta = data.eta
    nu = softmax(eta * (data.X @ np.asarray(theta, dtype=float)), axis=-1)
    nu_star = softmax(eta * (data.X @ np.asarray(theta_star, dtype=float)), axis=-1)
    lhs = float(hellinger_sq(nu, nu_star).sum())
    rhs = 0.5 * (nll_myopic(theta, data) - nll_myopic(theta_star, data) + beta)
    return rhs - lhs


def grad_check_nll(theta, data: ChoiceData, step: float = 1e-5) -> float:
    theta = np.asarray(theta, dtype=float)
    g = nll_grad(theta, data)
    fd = np.empty_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = step
        fd[k] = (nll_myopic(theta + e, data) - nll_myopic(theta - e, data)) / (2 * step)
    return float(np.abs(fd - g).max())


# ---------------------------------------------------------------- battery


@dataclass
class CheckResult:
    name: str
    instances: int
    violations: int
    min_slack: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _random_instance(rng, myopic=None):
    S = int(rng.integers(1, 4))
    A = int(rng.integers(1, 4))
    B = int(rng.integers(2, 4))
    H = int(rng.integers(1, 4))
    gamma = 0.0 if (myopic or (myopic is None and rng.random() < 0.5)) else float(rng.choice([0.5, 0.9, 1.0]))
    eta = float(rng.choice([0.5, 1.0, 2.0, 5.0]))
    game = make_random_game(S, A, B, H, gamma=gamma, eta=eta, seed=int(rng.integers(2**31)))
    pol = random_policy(S, A, B, H, rng, deterministic=bool(rng.random() < 0.3))
    r_tilde = np.clip(game.r + rng.normal(0, float(rng.choice([0.05, 0.3, 1.0])), game.r.shape), -1.0, 2.0)
    return game, pol, r_tilde


def run_battery(n: int = 1000, seed: int = 0, tol: float = 1e-9) -> list[CheckResult]:
    """Lemma battery over ``n`` random instances per family."""
    rng = rng_stream(seed, 0xBA77)
    results = []

    # response lemmas
    t0 = time.time()
    agg: dict = {}
    for _ in range(n):
        game, pol, r_tilde = _random_instance(rng)
        sol = quantal_response(game, pol)
        sol_t = quantal_response(game, pol, r_tilde)
        rep = check_response_bounds(sol, sol_t, game=game, rng=rng)
        for k, v in rep.slacks.items():
            cnt, mn = agg.get(k, (0, math.inf))
            agg[k] = (cnt + (v < -tol), min(mn, v))
    dt = time.time() - t0
    for k, (cnt, mn) in agg.items():
        results.append(CheckResult(k, n, int(cnt), float(mn), dt / len(agg)))

    # identification lemma
    t0 = time.time()
    viol, mn = 0, math.inf
    for _ in range(n):
        B = int(rng.integers(2, 6))
        nu = rng.dirichlet(np.ones(B)) + 1e-3
        nu /= nu.sum()
        x = rng.normal(size=B)
        if abs(x.sum()) < 0.1:
            x += 0.5
        r = rng.random(B)
        dlt = rng.normal(size=B)
        dlt -= x * (x @ dlt) / (x @ x)
        sl = identification_slack(nu, x, r, r - dlt)
        viol += sl < -tol
        mn = min(mn, sl)
    results.append(CheckResult("identification", n, viol, mn, time.time() - t0))

    # performance difference + response-model error
    t0 = time.time()
    v_pd = v_id = v_w = v_rme = 0
    mn_pd = mn_rme = math.inf
    for _ in range(n):
        game, pol, r_tilde = _random_instance(rng)
        S, A, B, H = game.dims
        U_t = rng.uniform(0, H, size=game.u.shape)
        W_t = rng.uniform(0, H, size=(H, S))
        rep = check_performance_difference(game, pol, r_tilde, U_t, W_t)
        v_pd += not rep.ok
        v_id += rep.identity_error > tol
        v_w += (not rep.ok_w) or rep.identity_error_w > tol
        v_rme += not rep.rme_ok
        mn_pd = min(mn_pd, rep.rhs - rep.lhs)
        mn_rme = min(mn_rme, rep.rme_rhs - rep.rme_lhs)
    dt = (time.time() - t0) / 4
    results += [
        CheckResult("performance_difference", n, v_pd, mn_pd, dt),
        CheckResult("performance_difference_identity", n, v_id, 0.0, dt),
        CheckResult("performance_difference_value_form", n, v_w, 0.0, dt),
        CheckResult("response_model_error", n, v_rme, mn_rme, dt),
    ]
    return results


def write_junit(results: list[CheckResult], path) -> None:
    suite = ET.Element("testsuite", name="qse-verify", tests=str(len(results)),
                       failures=str(sum(not r.passed for r in results)))
    for r in results:
        case = ET.SubElement(suite, "testcase", classname="oracle", name=r.name, time=f"{r.seconds:.3f}")
        if not r.passed:
            ET.SubElement(case, "failure", message=f"{r.violations} violations; min slack {r.min_slack:.3e}")
    ET.ElementTree(suite).write(path, encoding="utf-8", xml_declaration=True)


def slack_table(results: list[CheckResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  {'n':>6}  {'viol':>5}  {'min slack':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {r.instances:>6}  {r.violations:>5}  {r.min_slack:>12.4e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
