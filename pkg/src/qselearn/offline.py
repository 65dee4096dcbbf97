"""Offline learners: pessimistic value iteration with a fitted follower model
(linear, schemes S1/S2/S3), Bellman-consistent pessimism over finite classes,
and pessimistic model selection for a farsighted follower."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import EmptyConfidenceSet, EmptyModelSet, NotMyopic
from .game import Dataset, LeaderPolicy, MarkovGame, as_table
from .mle import (
    ChoiceData,
    MLEFit,
    beta_linear,
    c_eta,
    choice_covariance,
    choice_data,
    confidence_set,
    fit_mle_myopic,
    nll_farsighted,
    nll_table,
)
from .planner import PrescriptionGrid, evaluate_J, grid_responses, lex_argmax
from .response import advantage_bound, policy_reward

log = logging.getLogger(__name__)


def c3_constant(eta: float, B_A: float) -> float:
    """C^(3) = eta^2 e^{2 eta B_A} (2 + eta B_A e^{2 eta B_A}) / 2."""
    e = math.exp(2.0 * eta * B_A)
    return eta**2 * e * (2.0 + eta * B_A * e) / 2.0


def myopic_advantage_bound(eta: float, B: int) -> float:
    return advantage_bound(gamma=0.0, H=1, eta=eta, B=B)


@dataclass(frozen=True)
class RidgeResult:
    omega: np.ndarray  # (d,)
    Lambda: np.ndarray  # (d, d)
    gamma1: np.ndarray  # (S, A, B)
    fitted: np.ndarray  # (S, A, B) phi^T omega


def ridge_and_gamma1(dataset: Dataset, phi: np.ndarray, h: int, W_next, c1: float = 1.0,
                     delta: float = 0.1, log_term: float | None = None) -> RidgeResult:
    """Ridge regression of u + W_next(s') on phi(s,a,b) and its elliptical bonus.

    Gamma1 = c1 d H sqrt(log(2 d H T / delta)) sqrt(phi^T Lambda^-1 phi); pass
    ``log_term`` to override the logarithm (the online variant uses T^2).
    """
    H, S, A, B, d = phi.shape
    T = len(dataset)
    Lam = np.eye(d)
    rhs = np.zeros(d)
    if T:
        s, a, b, u, s2, _ = dataset.step_slice(h)
        X = phi[h, s, a, b]
        y = u + np.asarray(W_next)[s2]
        Lam = Lam + X.T @ X
        rhs = X.T @ y
    return _ridge(phi[h], Lam, rhs, c1, H, d, log_term if log_term is not None else math.log(2 * d * H * max(T, 1) / delta))


def _ridge(phi_h, Lam, rhs, c1, H, d, log_term) -> RidgeResult:
    omega = np.linalg.solve(Lam, rhs)
    Linv = np.linalg.inv(Lam)
    quad = np.einsum("sabd,de,sabe->sab", phi_h, Linv, phi_h)
    g1 = c1 * d * H * math.sqrt(max(log_term, 0.0)) * np.sqrt(np.maximum(quad, 0.0))
    return RidgeResult(omega=omega, Lambda=Lam, gamma1=g1, fitted=phi_h @ omega)


@dataclass(frozen=True)
class PenaltyConsts:
    eta: float
    B_A: float
    B_theta: float
    beta: float
    H: int
    scale: float = 1.0

    @property
    def c3(self) -> float:
        return c3_constant(self.eta, self.B_A)

    @property
    def radius(self) -> float:
        return math.sqrt(8.0 * c_eta(self.eta, self.B_A) ** 2 * self.beta + 4.0 * self.B_theta**2)


def gamma2_from_trace(trace, consts: PenaltyConsts):
    """Gamma2 = 2 B_U (eta xi + C3 xi^2) with xi = sqrt(trace) * radius and B_U = H."""
    xi = np.sqrt(np.maximum(trace, 0.0)) * consts.radius
    return consts.scale * 2.0 * consts.H * (consts.eta * xi + consts.c3 * xi**2)


def gamma2(state_cov: np.ndarray, Psi: np.ndarray, consts: PenaltyConsts) -> float:
    """Scalar Gamma2 for one (state, prescription, theta) with Psi = T Sigma_D + I (pseudo-inverted)."""
    from .mle import pinv_psd

    return float(gamma2_from_trace(np.trace(pinv_psd(Psi) @ state_cov), consts))


def _grid_traces(phi_s, alphas, thetas, Psi_invs, eta):
    """tr(Psi_k^+ Sigma_s^{alpha,theta_k}) for every sample k and grid point g; shape (K, G)."""
    X = np.einsum("gba,abd->gbd", alphas, phi_s)  # (G, B, d)
    nu = softmax(eta * np.einsum("gbd,kd->kgb", X, thetas), axis=-1)
    m = np.einsum("kgb,gbd->kgd", nu, X)
    Y = X[None] - m[:, :, None, :]
    return np.einsum("kgb,kgbd,kde,kgbe->kg", nu, Y, Psi_invs, Y)


def _psi_inverses(data: ChoiceData, thetas, normalize_T: bool = True):
    d = data.dim
    out = []
    for th in thetas:
        Sig = choice_covariance(th, data, normalize=False)
        out.append(np.linalg.inv(Sig + np.eye(d)))
    return np.stack(out)


@dataclass
class StepPlan:
    W: np.ndarray  # (S,)
    table: np.ndarray  # (S, B, A)
    index: np.ndarray  # (S,)


def plan_step(U_h, phi_h, thetas, eta, alphas, inner="min", gamma2_sign=0.0, data=None, consts=None) -> StepPlan:
    """Per-state grid scan for one step under a theta sample.

    ``gamma2_sign`` = -1 subtracts Gamma2 (pessimism), +1 adds it (optimism), 0 ignores it.
    """
    S, A, B, d = phi_h.shape
    thetas = np.atleast_2d(thetas)
    Psi_invs = _psi_inverses(data, thetas) if gamma2_sign else None
    W = np.empty(S)
    table = np.empty((S, B, A))
    index = np.empty(S, dtype=int)
    for s in range(S):
        rewards = np.einsum("abd,kd->kab", phi_h[s], thetas)
        nu = grid_responses(rewards, alphas, eta)  # (K, G, B)
        vals = np.einsum("gba,kgb,ab->kg", alphas, nu, U_h[s])
        if gamma2_sign:
            tr = _grid_traces(phi_h[s], alphas, thetas, Psi_invs, eta)
            vals = vals + gamma2_sign * gamma2_from_trace(tr, consts)
        score = vals.min(axis=0) if inner == "min" else vals.max(axis=0)
        i = lex_argmax(score)
        W[s], table[s], index[s] = score[i], alphas[i], i
    return StepPlan(W, table, index)


@dataclass
class PessimisticEstimate:
    scheme: str
    U_hat: np.ndarray  # (H, S, A, B) truncated
    W_hat: np.ndarray  # (H, S)
    omega: np.ndarray  # (H, d)
    Lambda: np.ndarray  # (H, d, d)
    gamma1: np.ndarray  # (H, S, A, B)
    policy: LeaderPolicy
    theta_hat: np.ndarray  # (H, d)
    beta: float
    fits: list = field(default_factory=list, repr=False)
    theta_samples: list = field(default_factory=list, repr=False)

    def value(self, rho0) -> float:
        return float(np.asarray(rho0) @ self.W_hat[0])


def mle_pvi(dataset: Dataset, phi: np.ndarray, eta: float, scheme: str = "S3", beta: float | None = None,
            c1: float = 1.0, grid: PrescriptionGrid | None = None, delta: float = 0.1,
            B_theta: float | None = None, sample_size: int = 64, gamma2_scale: float = 1.0,
            gamma: float = 0.0, seed: int = 0) -> PessimisticEstimate:
    """Pessimistic value iteration with a maximum-likelihood follower model.

    The learner sees only the dataset, the feature map and the rationality eta.
    """
    if gamma != 0.0:
        raise NotMyopic("MLE-PVI assumes a myopic follower")
    scheme = scheme.upper()
    if scheme not in ("S1", "S2", "S3"):
        raise ValueError(f"unknown offline scheme {scheme!r}")
    H, S, A, B, d = phi.shape
    T = len(dataset)
    grid = grid or PrescriptionGrid(A, B, 10)
    alphas = grid.alphas
    beta = beta_linear(d, H, eta, T, delta) if beta is None else float(beta)
    B_theta = math.sqrt(d) if B_theta is None else float(B_theta)
    consts = PenaltyConsts(eta=eta, B_A=myopic_advantage_bound(eta, B), B_theta=B_theta, beta=beta, H=H,
                           scale=gamma2_scale)

    U_hat = np.zeros((H, S, A, B))
    W_hat = np.zeros((H, S))
    omega = np.zeros((H, d))
    Lams = np.zeros((H, d, d))
    g1 = np.zeros((H, S, A, B))
    theta_hat = np.zeros((H, d))
    table = np.zeros((H, S, B, A))
    fits, samples = [], []
    W_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        rr = ridge_and_gamma1(dataset, phi, h, W_next, c1=c1, delta=delta)
        omega[h], Lams[h], g1[h] = rr.omega, rr.Lambda, rr.gamma1
        U_hat[h] = np.clip(rr.fitted - rr.gamma1, 0.0, H - h)

        data = choice_data(dataset, phi, h, eta)
        fit = fit_mle_myopic(data, bound=B_theta)
        theta_hat[h] = fit.theta
        if scheme == "S3":
            thetas = fit.theta[None]
        else:
            cs = confidence_set(data, beta, sample_size=sample_size, bound=B_theta, B_A=consts.B_A,
                                seed=seed * 1000 + h, fit=fit)
            thetas = cs.theta_sample
        if scheme == "S1":
            plan = plan_step(U_hat[h], phi[h], thetas, eta, alphas, inner="min")
        else:
            plan = plan_step(U_hat[h], phi[h], thetas, eta, alphas, inner="max", gamma2_sign=-1.0,
                             data=data, consts=consts)
        W_hat[h], table[h] = plan.W, plan.table
        fits.append(fit)
        samples.append(thetas)
        W_next = W_hat[h]
    fits.reverse()
    samples.reverse()
    return PessimisticEstimate(scheme=scheme, U_hat=U_hat, W_hat=W_hat, omega=omega, Lambda=Lams, gamma1=g1,
                               policy=LeaderPolicy(table), theta_hat=theta_hat, beta=beta, fits=fits,
                               theta_samples=samples)


# ---------------------------------------------------------------- finite classes


def _myopic_nu(reward, policy_table, eta):
    return softmax(eta * policy_reward(reward, policy_table), axis=-1)


def _table_nll(theta_class, dataset: Dataset, eta: float) -> np.ndarray:
    """NLL of each tabular follower reward at each step, shape (|Theta|, H)."""
    H = theta_class[0].shape[0]
    out = np.zeros((len(theta_class), H))
    if len(dataset) == 0:
        return out
    for h in range(H):
        s, _, b, _, _, presc = dataset.step_slice(h)
        for j, th in enumerate(theta_class):
            out[j, h] = nll_table(th[h], s, presc, b, eta)
    return out


@dataclass
class BCPResult:
    policy: LeaderPolicy
    index: int
    pessimistic_values: np.ndarray  # (|Pi|,), -inf where the confidence set is empty
    confidence_sets: list  # per policy: list of (k, j) pairs


def mle_bcp(dataset: Dataset, U_class, theta_class, policy_class, beta: float, eta: float, rho0) -> BCPResult:
    """Bellman-consistent pessimism over finite classes.

    ``U_class`` and ``theta_class`` hold full-horizon tables (H, S, A, B); the
    per-step infima in the sublevel tests range over the step-h components of
    every class member.
    """
    U_class = [np.asarray(U, dtype=float) for U in U_class]
    theta_class = [np.asarray(t, dtype=float) for t in theta_class]
    H = U_class[0].shape[0]
    rho0 = np.asarray(rho0, dtype=float)
    L = _table_nll(theta_class, dataset, eta)
    theta_ok = np.all(L - L.min(axis=0) <= beta, axis=1)
    n = len(dataset)
    if n:
        st, a_all, b_all, u_all, _ = dataset.arrays()

    values = np.full(len(policy_class), -np.inf)
    csets = []
    for p, pol in enumerate(policy_class):
        pt = as_table(pol)
        members = []
        for j, th in enumerate(theta_class):
            if not theta_ok[j]:
                continue
            nu = _myopic_nu(th, pt, eta)
            for k, U in enumerate(U_class):
                if n and not _bellman_ok(U, U_class, pt, nu, st, a_all, b_all, u_all, H, beta):
                    continue
                members.append((k, j, float(rho0 @ np.einsum("sab,sba,sb->s", U[0], pt[0], nu[0]))))
        if not members:
            log.warning("empty confidence set for policy %d; skipping", p)
            csets.append([])
            continue
        csets.append([(k, j) for k, j, _ in members])
        values[p] = min(v for _, _, v in members)
    if not np.any(np.isfinite(values)):
        raise EmptyConfidenceSet("every policy has an empty confidence set; beta is too small")
    best = lex_argmax(np.where(np.isfinite(values), values, -1e300))
    return BCPResult(policy=LeaderPolicy(as_table(policy_class[best])), index=best,
                     pessimistic_values=values, confidence_sets=csets)


def _bellman_targets(U_next, pt_next, nu_next):
    """<U_{h+1}(s'), pi_{h+1}(s') (x) nu_{h+1}(s')> for every s'."""
    return np.einsum("sab,sba,sb->s", U_next, pt_next, nu_next)


def _bellman_ok(U, U_class, pt, nu, st, a_all, b_all, u_all, H, beta) -> bool:
    idx = np.arange(st.shape[0])
    for h in range(H):
        s, a, b, u, s2 = st[:, h], a_all[:, h], b_all[:, h], u_all[:, h], st[:, h + 1]
        nxt = _bellman_targets(U[h + 1], pt[h + 1], nu[h + 1])[s2] if h + 1 < H else 0.0
        y = u + nxt
        losses = [float(np.sum((Um[h][s, a, b] - y) ** 2)) for Um in U_class]
        own = float(np.sum((U[h][s, a, b] - y) ** 2))
        if own - min(losses) > H**2 * beta:
            return False
    return True


@dataclass
class PMLEResult:
    policy: LeaderPolicy
    index: int
    confidence_set: list  # model indices
    nll: np.ndarray  # (|M|, H)
    J: np.ndarray  # (|Pi|, |M|)
    pessimistic_model: np.ndarray  # (|Pi|,) argmin model per policy


def pmle_farsighted(dataset: Dataset, model_class, policy_class, beta: float) -> PMLEResult:
    """argmax_pi min_{M in C(beta)} J(pi, M) with C from the generalized likelihood."""
    nll = np.stack([nll_farsighted(M, dataset) for M in model_class])
    conf = _model_confset(nll, beta)
    J = np.array([[evaluate_J(M, pol) for M in model_class] for pol in policy_class])
    Jc = J[:, conf]
    worst = Jc.min(axis=1)
    best = lex_argmax(worst)
    pess = np.array(conf)[Jc.argmin(axis=1)]
    return PMLEResult(policy=LeaderPolicy(as_table(policy_class[best])), index=best, confidence_set=conf,
                      nll=nll, J=J, pessimistic_model=pess)


def _model_confset(nll: np.ndarray, beta: float) -> list:
    best = nll.min(axis=0)
    if np.any(~np.isfinite(best)):
        raise EmptyModelSet("every model assigns zero probability to an observed transition")
    ok = np.all(nll - best <= beta, axis=1)
    conf = [int(i) for i in np.flatnonzero(ok)]
    if not conf:
        raise EmptyModelSet("generalized-likelihood confidence set is empty")
    return conf
