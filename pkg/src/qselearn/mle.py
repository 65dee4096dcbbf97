"""Follower-model likelihoods, MLE, confidence sets and covariance geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, EmptyData, NonConvergence, ZeroTransitionProbability
from .game import Dataset, MarkovGame, as_table, rng_stream
from .planner import occupancy, state_distribution
from .response import advantage_bound, hellinger_sq, quantal_response

PINV_REL = 1e-10


# ---------------------------------------------------------------- geometry


def pinv_psd(M: np.ndarray, rel: float = PINV_REL) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix, dropping eigenvalues below rel * max."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    top = max(w.max(initial=0.0), 0.0)
    keep = w > rel * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (V * inv) @ V.T


def policy_features(phi_h: np.ndarray, states, prescriptions) -> np.ndarray:
    """phi^pi(s_i, b) = sum_a alpha_i(a|b) phi(s_i, a, b); returns (N, B, d)."""
    return np.einsum("nba,nabd->nbd", prescriptions, phi_h[np.asarray(states)])


def state_covariance(X: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Cov_{b~nu}[X_b] for X (..., B, d), nu (..., B)."""
    m = np.einsum("...b,...bd->...d", nu, X)
    second = np.einsum("...b,...bd,...be->...de", nu, X, X)
    return second - np.einsum("...d,...e->...de", m, m)


@dataclass(frozen=True)
class ChoiceData:
    """Step-h slice of a dataset for the myopic linear likelihood."""

    X: np.ndarray  # (N, B, d) policy-integrated features at the visited states
    b: np.ndarray  # (N,) observed follower actions
    eta: float

    @property
    def T(self) -> int:
        return len(self.b)

    @property
    def dim(self) -> int:
        return self.X.shape[-1]


def choice_data(dataset: Dataset, phi: np.ndarray, h: int, eta: float) -> ChoiceData:
    d = phi.shape[-1]
    B = phi.shape[3]
    if len(dataset) == 0:
        return ChoiceData(np.zeros((0, B, d)), np.zeros(0, dtype=int), eta)
    s, _, b, _, _, presc = dataset.step_slice(h)
    return ChoiceData(policy_features(phi[h], s, presc), b, eta)


def _choice_terms(theta, data: ChoiceData):
    logits = data.eta * (data.X @ theta)  # (N, B)
    m = logits.max(axis=1)
    z = np.exp(logits - m[:, None])
    tot = z.sum(axis=1)
    lse = m + np.log(tot)
    nu = z / tot[:, None]
    return logits, lse, nu


def nll_myopic(theta, data: ChoiceData) -> float:
    """-sum_i [eta r^{pi_i,theta}(s_i,b_i) - log sum_b' exp(eta r^{pi_i,theta}(s_i,b'))]."""
    if data.T == 0:
        raise EmptyData("no samples at this step")
    theta = np.asarray(theta, dtype=float)
    logits, lse, _ = _choice_terms(theta, data)
    return float(np.sum(lse - logits[np.arange(data.T), data.b]))


def nll_grad(theta, data: ChoiceData) -> np.ndarray:
    if data.T == 0:
        raise EmptyData("no samples at this step")
    theta = np.asarray(theta, dtype=float)
    _, _, nu = _choice_terms(theta, data)
    mean = np.einsum("nb,nbd->nd", nu, data.X)
    obs = data.X[np.arange(data.T), data.b]
    return data.eta * (mean - obs).sum(axis=0)


def _nll_all(theta, data: ChoiceData, hess: bool = True):
    logits, lse, nu = _choice_terms(theta, data)
    idx = np.arange(data.T)
    f = float(np.sum(lse - logits[idx, data.b]))
    mean = np.einsum("nb,nbd->nd", nu, data.X)
    g = data.eta * (mean - data.X[idx, data.b]).sum(axis=0)
    if not hess:
        return f, g, None
    Hm = data.eta**2 * (np.einsum("nb,nbd,nbe->de", nu, data.X, data.X) - mean.T @ mean)
    return f, g, 0.5 * (Hm + Hm.T)


def choice_covariance(theta, data: ChoiceData, normalize: bool = True) -> np.ndarray:
    """T^-1 sum_i Cov_{nu^{pi_i,theta}}[phi^{pi_i}(s_i, .)] (or the plain sum)."""
    d = data.dim
    if data.T == 0:
        return np.zeros((d, d))
    _, _, nu = _choice_terms(np.asarray(theta, dtype=float), data)
    C = state_covariance(data.X, nu).sum(axis=0)
    C = 0.5 * (C + C.T)
    return C / data.T if normalize else C


def covariance_data(dataset: Dataset, theta, phi: np.ndarray, eta: float) -> np.ndarray:
    """Sigma_{h,D}^theta for every step; ``theta`` is (H, d). Returns (H, d, d)."""
    H, d = phi.shape[0], phi.shape[-1]
    theta = np.asarray(theta, dtype=float).reshape(H, d)
    return np.stack([choice_covariance(theta[h], choice_data(dataset, phi, h, eta)) for h in range(H)])


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True)
class MLEFit:
    theta: np.ndarray
    nll: float
    grad_norm: float
    converged: bool
    on_boundary: bool
    iterations: int


def _newton(data, theta, lam, tol, max_iter, bound=1e8):
    """Damped Newton on nll + lam/2 |theta|^2 (lam may be 0; uses least squares steps)."""
    it = 0
    for it in range(1, max_iter + 1):
        f, g, Hm = _nll_all(theta, data)
        f += 0.5 * lam * theta @ theta
        g = g + lam * theta
        if np.linalg.norm(g) <= tol:
            return theta, True, it
        Hm = Hm + lam * np.eye(len(theta))
        step = -np.linalg.lstsq(Hm, g, rcond=1e-14)[0]
        slope = g @ step
        if not slope < 0:
            step, slope = -g, -(g @ g)
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            fc = nll_myopic(cand, data) + 0.5 * lam * cand @ cand
            # the last term absorbs rounding once the model decrease is below machine precision
            if fc <= f + 1e-4 * t * slope + 1e-14 * abs(f):
                break
            t *= 0.5
        else:
            return theta, False, it
        theta = cand
        if np.linalg.norm(theta) > bound:
            return theta, False, it
    f, g, _ = _nll_all(theta, data, hess=False)
    return theta, bool(np.linalg.norm(g + lam * theta) <= tol), it


def fit_mle_myopic(data: ChoiceData, bound: float = math.inf, tol: float = 1e-8, max_iter: int = 100,
                   theta0=None, strict: bool = False) -> MLEFit:
    """Minimize the convex NLL over the ball |theta| <= bound.

    Unconstrained damped Newton first; if the minimizer leaves the ball (or does
    not exist, as with separable data) solve the ridge-penalized problem with the
    multiplier chosen by bisection so the solution lands on the sphere (KKT).
    """
    d = data.dim
    if data.T == 0:
        th = np.zeros(d)
        return MLEFit(th, 0.0, 0.0, True, False, 0)
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    if np.linalg.norm(theta) > bound:
        theta *= bound / np.linalg.norm(theta)
    # Newton from an interior warm start; a tiny relative tolerance keeps the
    # criterion meaningful when the NLL is large.
    tol_eff = max(tol, 1e-13 * data.T)
    th, ok, it = _newton(data, theta, 0.0, tol_eff, max_iter, bound=min(bound, 1e8))
    if ok and np.linalg.norm(th) <= bound:
        f, g, _ = _nll_all(th, data, hess=False)
        return MLEFit(th, f, float(np.linalg.norm(g)), True, False, it)

    # boundary solution: find lam > 0 with |theta(lam)| = bound
    lo, hi = 0.0, 1.0
    th_hi, _, _ = _newton(data, theta, hi, tol_eff, max_iter)
    while np.linalg.norm(th_hi) > bound:
        lo, hi = hi, hi * 4.0
        th_hi, _, _ = _newton(data, th_hi, hi, tol_eff, max_iter)
    cur = th_hi
    lam = hi
    for _ in range(200):
        lam = 0.5 * (lo + hi) if lo > 0 else hi / 4.0
        cur, _, _ = _newton(data, cur, lam, tol_eff, max_iter)
        n = np.linalg.norm(cur)
        if n > bound:
            lo = lam
        else:
            hi = lam
            th_hi = cur
        if abs(n - bound) <= 1e-10 * max(bound, 1.0) or (hi - lo) <= 1e-12 * hi:
            break
        if lo == 0.0 and hi < 1e-12:
            break
    th = th_hi
    n = np.linalg.norm(th)
    if n > 0 and n > bound:
        th = th * (bound / n)
    f, g, _ = _nll_all(th, data, hess=False)
    gn = float(np.linalg.norm(g))
    on_boundary = abs(np.linalg.norm(th) - bound) <= 1e-6 * max(bound, 1.0)
    kkt = _kkt_ok(th, g, bound, tol=max(1e-6, tol) * max(1.0, data.T)) if on_boundary else gn <= tol_eff * 10
    if not kkt and strict:
        raise NonConvergence("MLE did not meet the KKT conditions", best=th)
    return MLEFit(th, f, gn, bool(kkt), bool(on_boundary), it)


def _kkt_ok(theta, g, bound, tol) -> bool:
    n = np.linalg.norm(theta)
    if n == 0:
        return np.linalg.norm(g) <= tol
    e = theta / n
    radial = g @ e
    tangential = np.linalg.norm(g - radial * e)
    return radial <= tol and tangential <= tol + 1e-6 * abs(radial)


# ---------------------------------------------------------------- confidence sets


def beta_linear(d: int, H: int, eta: float, T: int, delta: float, c: float = 1.0) -> float:
    """Default beta = c * d * log(H (1 + eta T^2) / delta)."""
    return c * d * math.log(H * (1.0 + eta * T**2) / delta)


def beta_farsighted(T: int, H: int, n_models: int, delta: float) -> float:
    """beta = 9 log(3 e^2 T H |M| / delta)."""
    return 9.0 * math.log(3.0 * math.e**2 * max(T, 1) * H * n_models / delta)


def c_eta(eta: float, B_A: float) -> float:
    return 1.0 / eta + B_A


@dataclass
class ConfidenceSetHandle:
    beta: float
    min_nll: float
    center: np.ndarray
    data: ChoiceData = field(repr=False)
    bound: float = math.inf
    theta_sample: np.ndarray | None = None
    ellipsoid_matrix: np.ndarray | None = None
    radius2: float = 0.0

    def gap(self, theta) -> float:
        if self.data.T == 0:
            return 0.0
        return nll_myopic(theta, self.data) - self.min_nll

    def contains(self, theta, slack: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        if np.linalg.norm(theta) > self.bound * (1 + 1e-12):
            return False
        return self.gap(theta) <= self.beta + slack

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "min_nll": self.min_nll,
            "center": self.center.tolist(),
            "theta_sample": None if self.theta_sample is None else self.theta_sample.tolist(),
            "radius2": self.radius2,
        }


def confidence_set(data: ChoiceData, beta: float, sample_size: int = 64, bound: float = math.inf,
                   B_A: float | None = None, seed: int = 0, fit: MLEFit | None = None,
                   bisect_iters: int = 40) -> ConfidenceSetHandle:
    """Sublevel set {NLL <= min + beta} with a finite member sample.

    Directions are drawn uniformly on the ellipsoid surrogate centred at the
    MLE with shape T*Sigma + I and radius^2 = 8 C_eta^2 beta + 4 B_Theta^2;
    along each direction the farthest point passing the exact membership test
    (and the norm ball) is located by bisection.  The MLE itself is always the
    first sample.
    """
    if fit is None:
        fit = fit_mle_myopic(data, bound=bound)
    center = fit.theta
    d = data.dim
    min_nll = nll_myopic(center, data) if data.T else 0.0
    B_A = 1.0 if B_A is None else B_A
    Bth = bound if np.isfinite(bound) else max(1.0, float(np.linalg.norm(center)))
    M = data.T * choice_covariance(center, data) + np.eye(d)
    R2 = 8.0 * c_eta(data.eta, B_A) ** 2 * beta + 4.0 * Bth**2
    handle = ConfidenceSetHandle(beta=beta, min_nll=min_nll, center=center, data=data, bound=bound,
                                 ellipsoid_matrix=M, radius2=R2)
    samples = [center]
    if sample_size > 1:
        w, V = np.linalg.eigh(M)
        Minv_half = (V / np.sqrt(w)) @ V.T
        rng = rng_stream(seed, 0xC5)
        z = rng.standard_normal((sample_size - 1, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        dirs = (z @ Minv_half.T) * math.sqrt(R2)
        for step in dirs:
            samples.append(center + _boundary_scale(handle, center, step, bisect_iters) * step)
    handle.theta_sample = np.stack(samples)
    return handle


def _boundary_scale(handle: ConfidenceSetHandle, center, step, iters) -> float:
    if handle.contains(center + step):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if handle.contains(center + mid * step):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------- QRE operator


def qre_operator(f: np.ndarray, policy_h: np.ndarray, nu_h: np.ndarray, s: int, b: int):
    """(Upsilon f)(s, b) = <pi(.|s,b), f(s,.,b)> - <pi (x) nu, f(s,.,.)>.

    ``f`` may carry trailing dimensions (e.g. features), shape (S, A, B, ...).
    """
    f = np.asarray(f, dtype=float)
    if f.shape[:3] != (policy_h.shape[0], policy_h.shape[2], policy_h.shape[1]):
        raise DimensionMismatch("f does not match the policy dimensions")
    cond = np.einsum("ba,ab...->b...", policy_h[s], f[s])
    return cond[b] - np.einsum("b,b...->...", nu_h[s], cond)


# ---------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class RankReport:
    nullity: int
    intrinsic_nullity: int
    rank_deficient: bool
    eigenvalues: np.ndarray


def shift_subspace_dim(phi_h: np.ndarray, tol: float = 1e-10) -> int:
    """Dimension of directions v with <phi(s,a,b), v> constant in (a, b) at every state.

    No leader policy can identify these directions (they act as per-state shifts).
    """
    S, A, B, d = phi_h.shape
    rows = (phi_h - phi_h[:, :1, :1, :]).reshape(-1, d)
    if not np.any(rows):
        return d
    sv = np.linalg.svd(rows, compute_uv=False)
    rank = int(np.sum(sv > tol * sv.max()))
    return d - rank


def rank_deficiency(Sigma: np.ndarray, phi_h: np.ndarray, rel: float = PINV_REL) -> RankReport:
    """Flag covariance null directions beyond the structural per-state shifts."""
    w = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
    top = max(w.max(initial=0.0), 0.0)
    nullity = int(np.sum(w <= rel * top)) if top > 0 else len(w)
    intrinsic = shift_subspace_dim(phi_h)
    return RankReport(nullity, intrinsic, nullity > intrinsic, w)


def laplacian_data(data: ChoiceData) -> np.ndarray:
    """T^-1 sum_i Cov_{uniform b}[phi^{pi_i}(s_i, .)] (diagnostic only)."""
    d = data.dim
    if data.T == 0:
        return np.zeros((d, d))
    B = data.X.shape[1]
    nu = np.full(data.X.shape[:2], 1.0 / B)
    return state_covariance(data.X, nu).mean(axis=0)


def covariance_laplacian_ratio(Sigma: np.ndarray, L: np.ndarray) -> tuple[float, float]:
    """Extreme generalized eigenvalues of Sigma relative to L on L's range."""
    w, V = np.linalg.eigh(0.5 * (L + L.T))
    keep = w > PINV_REL * max(w.max(initial=0.0), 0.0)
    if not np.any(keep):
        return 0.0, 0.0
    Lh = V[:, keep] / np.sqrt(w[keep])
    ev = np.linalg.eigvalsh(Lh.T @ Sigma @ Lh)
    return float(ev.min()), float(ev.max())


# ---------------------------------------------------------------- finite classes / farsighted


def nll_table(reward_h: np.ndarray, states, prescriptions, follower_actions, eta: float) -> float:
    """Myopic NLL at one step for a tabular follower reward (S, A, B)."""
    states = np.asarray(states)
    if len(states) == 0:
        return 0.0
    logits = eta * np.einsum("nba,nab->nb", prescriptions, reward_h[states])
    lse = logsumexp(logits, axis=1)
    return float(np.sum(lse - logits[np.arange(len(states)), follower_actions]))


def nll_farsighted(model: MarkovGame, dataset: Dataset, strict: bool = False, cache=None) -> np.ndarray:
    """Per-step generalized NLL, shape (H,).

    -sum_i [eta A_h^{pi_i,M}(s,b) + log P_h^M(s'|s,a,b) - (u_i - u_h^M(s,a,b))^2];
    an observed transition with zero model probability gives +inf (or raises
    ``ZeroTransitionProbability`` when ``strict``).
    """
    H = model.horizon
    out = np.zeros(H)
    if len(dataset) == 0:
        return out
    cache = {} if cache is None else cache
    for tr in dataset.trajectories:
        pid = tr.policy_id
        if pid not in cache:
            cache[pid] = quantal_response(model, dataset.policies[pid]).A
        Adv = cache[pid]
        for h, s, a, b, u, s2 in tr.steps():
            p = model.P[h, s, a, b, s2]
            if p <= 0.0:
                if strict:
                    raise ZeroTransitionProbability(f"P^M = 0 for an observed transition at step {h}")
                out[h] = math.inf
                continue
            out[h] -= model.eta * Adv[h, s, b] + math.log(p) - (u - model.u[h, s, a, b]) ** 2
    return out


def d_rl(model: MarkovGame, truth: MarkovGame, policy) -> np.ndarray:
    """Per-step squared D_RL distance under the (pi, nu^{pi,M*}) law on M*, shape (H,)."""
    pt = as_table(policy)
    sol_m = quantal_response(model, pt)
    sol_t = quantal_response(truth, pt)
    d = state_distribution(truth, pt, sol_t.nu)
    occ = occupancy(truth, pt, sol_t.nu)
    resp = np.einsum("hs,hs->h", d, hellinger_sq(sol_m.nu, sol_t.nu))
    trans = np.einsum("hsab,hsab->h", occ, hellinger_sq(model.P, truth.P))
    rew = np.einsum("hsab,hsab->h", occ, (truth.u - model.u) ** 2)
    return resp + trans + rew
