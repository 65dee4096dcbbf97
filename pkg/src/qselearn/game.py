"""Episodic leader-follower Markov games, policies, trajectories and datasets.

Array conventions (0-indexed steps ``h = 0..H-1``):

* ``u``, ``r``: ``(H, S, A, B)`` leader / follower rewards
* ``P``: ``(H, S, A, B, S)`` transition kernel
* policy tables: ``(H, S, B, A)``; row ``[h, s, b]`` is a distribution over leader actions
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadDimension,
    DimensionMismatch,
    InfeasibleConstraint,
    NonStochasticRow,
    ResponseMismatch,
    RewardOutOfRange,
)

ROW_TOL = 1e-12


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream for (seed, key...) so parallel workers reproduce exactly."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def eff_horizon(gamma: float, H: int) -> float:
    if gamma == 1.0:
        return float(H)
    return (1.0 - gamma**H) / (1.0 - gamma)


def _frozen(x, dtype=float) -> np.ndarray:
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_stochastic(arr: np.ndarray, what: str) -> None:
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise NonStochasticRow(f"{what} has negative or non-finite entries")
    dev = np.abs(arr.sum(axis=-1) - 1.0)
    if dev.size and dev.max() > ROW_TOL:
        raise NonStochasticRow(f"{what} row sums deviate from 1 by {dev.max():.3g}")


@dataclass(frozen=True)
class MarkovGame:
    rho0: np.ndarray
    u: np.ndarray
    r: np.ndarray
    P: np.ndarray
    gamma: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("rho0", "u", "r", "P"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "eta", float(self.eta))
        if self.u.ndim != 4:
            raise BadDimension("u must have shape (H, S, A, B)")
        H, S, A, B = self.u.shape
        if min(H, S, A, B) < 1:
            raise BadDimension("all dimensions must be positive")
        if self.r.shape != self.u.shape:
            raise BadDimension(f"r shape {self.r.shape} != u shape {self.u.shape}")
        if self.P.shape != (H, S, A, B, S):
            raise BadDimension(f"P shape {self.P.shape} != {(H, S, A, B, S)}")
        if self.rho0.shape != (S,):
            raise BadDimension(f"rho0 shape {self.rho0.shape} != {(S,)}")
        _check_stochastic(self.rho0, "rho0")
        _check_stochastic(self.P, "transition")
        for name in ("u", "r"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
                raise RewardOutOfRange(f"{name} must lie in [0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise BadDimension("gamma must lie in [0, 1]")
        if not (self.eta > 0.0 and np.isfinite(self.eta)):
            raise BadDimension("eta must be positive")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(S, A, B, H)."""
        H, S, A, B = self.u.shape
        return S, A, B, H

    @property
    def num_states(self) -> int:
        return self.u.shape[1]

    @property
    def num_leader_actions(self) -> int:
        return self.u.shape[2]

    @property
    def num_follower_actions(self) -> int:
        return self.u.shape[3]

    @property
    def horizon(self) -> int:
        return self.u.shape[0]

    @property
    def myopic(self) -> bool:
        return self.gamma == 0.0

    def replace(self, **kw) -> "MarkovGame":
        args = dict(rho0=self.rho0, u=self.u, r=self.r, P=self.P, gamma=self.gamma, eta=self.eta)
        args.update(kw)
        return MarkovGame(**args)

    def to_dict(self) -> dict:
        S, A, B, H = self.dims
        return {
            "dims": {"S": S, "A": A, "B": B, "H": H},
            "rho0": self.rho0.tolist(),
            "u": self.u.tolist(),
            "r": self.r.tolist(),
            "P": self.P.tolist(),
            "gamma": self.gamma,
            "eta": self.eta,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_tabular_game(spec: dict) -> MarkovGame:
    """Validate a game description (the JSON document layout) into a MarkovGame."""
    try:
        game = MarkovGame(
            rho0=spec["rho0"],
            u=spec["u"],
            r=spec["r"],
            P=spec["P"],
            gamma=spec.get("gamma", 0.0),
            eta=spec.get("eta", 1.0),
        )
    except (KeyError, ValueError) as exc:
        raise BadDimension(f"malformed game description: {exc}") from exc
    dims = spec.get("dims")
    if dims is not None:
        S, A, B, H = game.dims
        if (dims.get("S", S), dims.get("A", A), dims.get("B", B), dims.get("H", H)) != (S, A, B, H):
            raise BadDimension(f"declared dims {dims} disagree with array shapes {(S, A, B, H)}")
    return game


@dataclass(frozen=True)
class LinearGameParams:
    phi: np.ndarray  # (H, S, A, B, d)
    theta: np.ndarray  # (H, d)
    vartheta: np.ndarray  # (H, d)
    mu: np.ndarray  # (H, d, S)
    param_bound: float = 1.0

    def __post_init__(self):
        for name in ("phi", "theta", "vartheta", "mu"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        H, S, A, B, d = self.phi.shape
        if self.theta.shape != (H, d) or self.vartheta.shape != (H, d) or self.mu.shape != (H, d, S):
            raise BadDimension("linear parameter shapes inconsistent with features")
        object.__setattr__(self, "param_bound", float(self.param_bound))

    @property
    def dim(self) -> int:
        return self.phi.shape[-1]

    @property
    def feature_bound(self) -> float:
        return float(np.linalg.norm(self.phi, axis=-1).max())

    def follower_reward(self, theta=None) -> np.ndarray:
        th = self.theta if theta is None else np.asarray(theta, dtype=float)
        return np.einsum("hsabd,hd->hsab", self.phi, th)

    def leader_reward(self) -> np.ndarray:
        return np.einsum("hsabd,hd->hsab", self.phi, self.vartheta)

    def transition(self) -> np.ndarray:
        return np.einsum("hsabd,hdt->hsabt", self.phi, self.mu)

    def to_game(self, rho0, gamma=0.0, eta=1.0) -> MarkovGame:
        u = np.clip(self.leader_reward(), 0.0, 1.0)
        r = np.clip(self.follower_reward(), 0.0, 1.0)
        P = np.clip(self.transition(), 0.0, None)
        P = P / P.sum(axis=-1, keepdims=True)
        return MarkovGame(rho0=rho0, u=u, r=r, P=P, gamma=gamma, eta=eta)

    def to_dict(self) -> dict:
        return {
            "d": self.dim,
            "phi": self.phi.tolist(),
            "theta": self.theta.tolist(),
            "vartheta": self.vartheta.tolist(),
            "mu": self.mu.tolist(),
            "param_bound": self.param_bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearGameParams":
        return cls(
            phi=d["phi"],
            theta=d["theta"],
            vartheta=d["vartheta"],
            mu=d["mu"],
            param_bound=d.get("param_bound", 1.0),
        )


def embed_linear(game: MarkovGame) -> LinearGameParams:
    """One-hot embedding with d = |S||A||B|; reproduces (u, r, P) exactly."""
    S, A, B, H = game.dims
    d = S * A * B
    eye = np.eye(d).reshape(S, A, B, d)
    phi = np.broadcast_to(eye, (H, S, A, B, d))
    theta = game.r.reshape(H, d)
    vartheta = game.u.reshape(H, d)
    mu = game.P.reshape(H, d, S)
    bound = float(np.linalg.norm(theta, axis=-1).max())
    return LinearGameParams(phi=phi, theta=theta, vartheta=vartheta, mu=mu, param_bound=max(bound, 1.0))


@dataclass(frozen=True)
class IdentificationConstraint:
    weight: np.ndarray
    level: float

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "level", float(self.level))
        if abs(self.weight.sum()) < 1e-12:
            raise InfeasibleConstraint("<x, 1> must be nonzero")

    @property
    def kappa(self) -> float:
        return float(np.abs(self.weight).max() / abs(self.weight.sum()))

    def residual(self, r: np.ndarray) -> np.ndarray:
        return r @ self.weight - self.level

    def satisfied(self, r: np.ndarray, tol: float = 1e-10) -> bool:
        return bool(np.abs(self.residual(r)).max() <= tol)


def _project_constraint(r: np.ndarray, c: IdentificationConstraint, max_iter: int = 10_000) -> np.ndarray:
    x = c.weight
    nx = x @ x
    for _ in range(max_iter):
        r = r - np.multiply.outer(c.residual(r), x) / nx
        if r.min() >= 0.0 and r.max() <= 1.0:
            return r
        r = np.clip(r, 0.0, 1.0)
        if np.abs(c.residual(r)).max() <= 1e-13:
            return r
    raise InfeasibleConstraint("constraint level not attainable with rewards in [0, 1]")


class LeaderPolicy:
    """Per-(h, s) prescriptions stored as a read-only ``(H, S, B, A)`` table."""

    __slots__ = ("table",)

    def __init__(self, table):
        t = np.array(table, dtype=float, copy=True)
        if t.ndim != 4:
            raise BadDimension("policy table must have shape (H, S, B, A)")
        _check_stochastic(t, "policy")
        t.setflags(write=False)
        self.table = t

    @classmethod
    def uniform(cls, S, A, B, H) -> "LeaderPolicy":
        return cls(np.full((H, S, B, A), 1.0 / A))

    @classmethod
    def from_prescriptions(cls, presc) -> "LeaderPolicy":
        return cls(np.asarray(presc, dtype=float))

    @property
    def shape(self):
        return self.table.shape

    def check_game(self, game: MarkovGame) -> None:
        S, A, B, H = game.dims
        if self.table.shape != (H, S, B, A):
            raise DimensionMismatch(f"policy shape {self.table.shape} != {(H, S, B, A)}")

    def __eq__(self, other):
        return isinstance(other, LeaderPolicy) and np.array_equal(self.table, other.table)

    def __hash__(self):
        return hash(self.table.tobytes())

    def __repr__(self):
        return f"LeaderPolicy(shape={self.table.shape})"


def as_table(policy) -> np.ndarray:
    return policy.table if isinstance(policy, LeaderPolicy) else np.asarray(policy, dtype=float)


def random_policy(S, A, B, H, rng: np.random.Generator, deterministic: bool = False) -> LeaderPolicy:
    if deterministic:
        idx = rng.integers(A, size=(H, S, B))
        return LeaderPolicy(np.eye(A)[idx])
    return LeaderPolicy(rng.dirichlet(np.ones(A), size=(H, S, B)))


def make_random_game(
    S: int,
    A: int,
    B: int,
    H: int,
    gamma: float = 0.0,
    eta: float = 1.0,
    constraint: IdentificationConstraint | None = None,
    seed: int = 0,
    sparse_transitions: bool = False,
) -> MarkovGame:
    if min(S, A, B, H) < 1:
        raise BadDimension("dims must be positive")
    rng = rng_stream(seed, 0x6A3E)
    u = rng.random((H, S, A, B))
    r = rng.random((H, S, A, B))
    if sparse_transitions:
        P = np.eye(S)[rng.integers(S, size=(H, S, A, B))]
    else:
        P = rng.random((H, S, A, B, S)) + 1e-3
        P /= P.sum(axis=-1, keepdims=True)
    rho0 = rng.random(S) + 1e-3
    rho0 /= rho0.sum()
    if constraint is not None:
        if constraint.weight.shape != (B,):
            raise BadDimension("constraint weight must have length |B|")
        r = _project_constraint(r, constraint)
    return MarkovGame(rho0=rho0, u=u, r=r, P=P, gamma=gamma, eta=eta)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (H+1,)
    leader_actions: np.ndarray  # (H,)
    follower_actions: np.ndarray  # (H,)
    leader_rewards: np.ndarray  # (H,)
    policy_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, int))
        object.__setattr__(self, "leader_actions", _frozen(self.leader_actions, int))
        object.__setattr__(self, "follower_actions", _frozen(self.follower_actions, int))
        object.__setattr__(self, "leader_rewards", _frozen(self.leader_rewards))
        H = len(self.leader_actions)
        if not (len(self.states) == H + 1 == len(self.follower_actions) + 1 == len(self.leader_rewards) + 1):
            raise BadDimension("trajectory arrays disagree on the horizon")

    @property
    def horizon(self) -> int:
        return len(self.leader_actions)

    def steps(self):
        for h in range(self.horizon):
            yield (
                h,
                int(self.states[h]),
                int(self.leader_actions[h]),
                int(self.follower_actions[h]),
                float(self.leader_rewards[h]),
                int(self.states[h + 1]),
            )

    def __eq__(self, other):
        return (
            isinstance(other, Trajectory)
            and self.policy_id == other.policy_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.leader_actions, other.leader_actions)
            and np.array_equal(self.follower_actions, other.follower_actions)
            and np.array_equal(self.leader_rewards, other.leader_rewards)
        )

    def to_json(self) -> dict:
        return {
            "policy": self.policy_id,
            "steps": [
                {"h": h, "s": s, "a": a, "b": b, "u": u, "s_next": s2}
                for h, s, a, b, u, s2 in self.steps()
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        steps = sorted(d["steps"], key=lambda x: x["h"])
        states = [st["s"] for st in steps] + ([steps[-1]["s_next"]] if steps else [])
        return cls(
            states=states,
            leader_actions=[st["a"] for st in steps],
            follower_actions=[st["b"] for st in steps],
            leader_rewards=[st["u"] for st in steps],
            policy_id=d.get("policy", 0),
        )


def _pick(p: np.ndarray, x: float) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, x * c[-1], side="right"), len(p) - 1))


def sample_trajectory(game: MarkovGame, policy, response, seed=0, policy_id: int = 0) -> Trajectory:
    """Roll out one episode: b ~ nu, a ~ prescription(.|b), s' ~ P.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    pt = as_table(policy)
    S, A, B, H = game.dims
    if pt.shape != (H, S, B, A):
        raise ResponseMismatch("policy does not match game dimensions")
    nu = response.nu
    if nu.shape != (H, S, B):
        raise ResponseMismatch("response does not match game dimensions")
    rp = getattr(response, "policy", None)
    if rp is not None and not np.array_equal(as_table(rp), pt):
        raise ResponseMismatch("response was computed for a different policy")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    draws = rng.random(4 * H + 1)
    states = np.empty(H + 1, dtype=int)
    a_arr = np.empty(H, dtype=int)
    b_arr = np.empty(H, dtype=int)
    u_arr = np.empty(H)
    s = _pick(game.rho0, draws[0])
    states[0] = s
    for h in range(H):
        b = _pick(nu[h, s], draws[4 * h + 1])
        a = _pick(pt[h, s, b], draws[4 * h + 2])
        s2 = _pick(game.P[h, s, a, b], draws[4 * h + 3])
        a_arr[h], b_arr[h], u_arr[h] = a, b, game.u[h, s, a, b]
        s = s2
        states[h + 1] = s
    return Trajectory(states, a_arr, b_arr, u_arr, policy_id)


class Dataset:
    """Trajectories plus the announced policy of each episode (keyed by policy id)."""

    def __init__(self, trajectories=(), policies=None):
        self.trajectories: list[Trajectory] = list(trajectories)
        self.policies: dict[int, LeaderPolicy] = dict(policies or {})
        for tr in self.trajectories:
            if tr.policy_id not in self.policies:
                raise DimensionMismatch(f"policy id {tr.policy_id} does not resolve")

    def __len__(self):
        return len(self.trajectories)

    def append(self, traj: Trajectory, policy: LeaderPolicy | None = None) -> None:
        if policy is not None:
            self.policies[traj.policy_id] = policy
        if traj.policy_id not in self.policies:
            raise DimensionMismatch(f"policy id {traj.policy_id} does not resolve")
        self.trajectories.append(traj)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon if self.trajectories else 0

    def arrays(self):
        """Stacked ``(states (T,H+1), a (T,H), b (T,H), u (T,H), policy tables (T,H,S,B,A))``."""
        if not self.trajectories:
            return None
        st = np.stack([t.states for t in self.trajectories])
        a = np.stack([t.leader_actions for t in self.trajectories])
        b = np.stack([t.follower_actions for t in self.trajectories])
        u = np.stack([t.leader_rewards for t in self.trajectories])
        pol = np.stack([self.policies[t.policy_id].table for t in self.trajectories])
        return st, a, b, u, pol

    def step_slice(self, h: int):
        """Per-step view: (s, a, b, u, s_next, prescriptions (T,B,A))."""
        st, a, b, u, pol = self.arrays()
        T = len(self.trajectories)
        s = st[:, h]
        return s, a[:, h], b[:, h], u[:, h], st[:, h + 1], pol[np.arange(T), h, s]

    def save(self, path, policy_path=None) -> None:
        path = Path(path)
        policy_path = Path(policy_path) if policy_path else path.with_suffix(".policies.json")
        with open(path, "w") as fh:
            for t in self.trajectories:
                fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
        with open(policy_path, "w") as fh:
            json.dump({str(k): v.table.tolist() for k, v in sorted(self.policies.items())}, fh, sort_keys=True)

    @classmethod
    def load(cls, path, policy_path=None) -> "Dataset":
        path = Path(path)
        policy_path = Path(policy_path) if policy_path else path.with_suffix(".policies.json")
        with open(policy_path) as fh:
            policies = {int(k): LeaderPolicy(v) for k, v in json.load(fh).items()}
        trajs = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    trajs.append(Trajectory.from_json(json.loads(line)))
        return cls(trajs, policies)


def save_game(game: MarkovGame, path, linear: LinearGameParams | None = None) -> None:
    doc = game.to_dict()
    if linear is not None:
        doc["linear"] = linear.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_game(path) -> tuple[MarkovGame, LinearGameParams | None]:
    with open(path) as fh:
        doc = json.load(fh)
    game = build_tabular_game(doc)
    lin = LinearGameParams.from_dict(doc["linear"]) if "linear" in doc else None
    return game, lin
