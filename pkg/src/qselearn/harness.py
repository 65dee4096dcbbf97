"""Config-driven experiment orchestration: sweeps, persistence, aggregation, plot data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarks import (
    choice_benchmark,
    deterministic_policy_sampler,
    farsighted_benchmark,
    finite_myopic_classes,
    generate_offline_dataset,
    linear_d4_game,
    two_state_game,
)
from .errors import ConfigError, MissingAggregate, QSEError
from .game import LeaderPolicy, LinearGameParams, MarkovGame, as_table, build_tabular_game, embed_linear, load_game, make_random_game
from .game import rng_stream, sample_trajectory
from .mle import beta_farsighted, beta_linear
from .offline import mle_bcp, mle_pvi, pmle_farsighted
from .online import beta_online, mle_golf, mle_ovi, omle_farsighted
from .planner import PrescriptionGrid, evaluate_J, solve_qse_myopic
from .response import quantal_response

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

ALGORITHMS = {
    "mle-pvi": ("offline", ("S1", "S2", "S3")),
    "mle-bcp": ("offline", (None,)),
    "pmle": ("offline", (None,)),
    "mle-ovi": ("online", ("S4", "S5")),
    "mle-golf": ("online", (None,)),
    "omle": ("online", (None,)),
}
GENERATORS = ("two-state", "linear-d4", "choice", "random", "farsighted")
BETA_TOKENS = ("paper-linear", "paper-farsighted")


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    game: dict
    algorithm: str
    T: list
    seeds: list
    scheme: str | None = None
    beta: float | str = "paper-linear"
    c1: float = 1.0
    gamma2_scale: float = 1.0
    mesh: int = 10
    delta: float = 0.1
    sample_size: int = 64
    classes: str | None = None
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        self.algorithm = str(self.algorithm).lower()
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        schemes = ALGORITHMS[self.algorithm][1]
        if self.scheme is None:
            self.scheme = schemes[-1]
        else:
            self.scheme = str(self.scheme).upper()
        if self.scheme not in schemes:
            raise ConfigError(f"scheme {self.scheme!r} not valid for {self.algorithm}")
        self.T = [int(t) for t in self.T]
        self.seeds = [int(s) for s in self.seeds]
        if not self.T or not self.seeds:
            raise ConfigError("sweep axes must be nonempty")
        if any(t < 0 for t in self.T):
            raise ConfigError("T values must be nonnegative")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if isinstance(self.beta, str):
            if self.beta not in BETA_TOKENS:
                raise ConfigError(f"beta must be a number or one of {BETA_TOKENS}")
        else:
            self.beta = float(self.beta)
            if self.beta < 0:
                raise ConfigError("beta must be nonnegative")
        if "file" in self.game:
            if not Path(self.game["file"]).is_file():
                raise ConfigError(f"game file {self.game['file']} does not exist")
        elif self.game.get("generator") not in GENERATORS:
            raise ConfigError(f"game needs 'file' or a generator in {GENERATORS}")
        if self.classes is not None and not Path(self.classes).is_file():
            raise ConfigError(f"class file {self.classes} does not exist")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        base = Path(base_dir) if base_dir else Path(".")
        try:
            game = dict(doc["game"])
            alg = dict(doc["algorithm"])
            sweep = dict(doc["sweep"])
        except KeyError as e:
            raise ConfigError(f"config is missing section {e}") from None
        if "file" in game:
            game["file"] = str(base / game["file"])
        classes = alg.pop("classes", None)
        name = alg.pop("name", None)
        if name is None:
            raise ConfigError("algorithm.name is required")
        known = {"scheme", "beta", "c1", "gamma2_scale", "mesh", "delta", "sample_size"}
        extra = set(alg) - known
        if extra:
            raise ConfigError(f"unknown algorithm keys {sorted(extra)}")
        try:
            return cls(game=game, algorithm=name, T=sweep.get("T", []), seeds=sweep.get("seeds", []),
                       classes=str(base / classes) if classes else None, out=doc.get("out", "results"),
                       workers=int(doc.get("workers", 1)), **alg)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            if path.suffix == ".json":
                doc = json.loads(path.read_text())
            else:
                with open(path, "rb") as fh:
                    doc = tomllib.load(fh)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        """Fully expanded mirror of the config, including defaults."""
        alg = {"name": self.algorithm, "scheme": self.scheme, "beta": self.beta, "c1": self.c1,
               "gamma2_scale": self.gamma2_scale, "mesh": self.mesh, "delta": self.delta,
               "sample_size": self.sample_size}
        if self.classes:
            alg["classes"] = self.classes
        return {"game": dict(self.game), "algorithm": alg, "sweep": {"T": list(self.T), "seeds": list(self.seeds)},
                "out": self.out, "workers": self.workers}


# ---------------------------------------------------------------- instances


@dataclass
class Instance:
    game: MarkovGame
    phi: np.ndarray | None = None
    model_class: list | None = None
    policy_class: list | None = None
    U_class: list | None = None
    theta_class: list | None = None
    true_index: int | None = None
    linear: LinearGameParams | None = None


def build_instance(spec: dict, classes: str | None = None) -> Instance:
    spec = dict(spec)
    if "file" in spec:
        game, lin = load_game(spec["file"])
        inst = Instance(game, lin.phi if lin is not None else None, linear=lin)
    else:
        gen = spec.pop("generator")
        seed = int(spec.pop("seed", 0))
        try:
            if gen == "two-state":
                game, lin = two_state_game(seed=seed, **spec)
                inst = Instance(game, lin.phi, linear=lin)
            elif gen == "linear-d4":
                game, lin = linear_d4_game(seed=seed, **spec)
                inst = Instance(game, lin.phi, linear=lin)
            elif gen == "choice":
                game, lin = choice_benchmark(seed=seed, **spec)
                inst = Instance(game, lin.phi, linear=lin)
            elif gen == "random":
                game = make_random_game(seed=seed, **spec)
                lin = embed_linear(game)
                inst = Instance(game, lin.phi, linear=lin)
            else:
                game, models, policies, ti = farsighted_benchmark(seed=seed, **spec)
                inst = Instance(game, None, models, policies, true_index=ti)
        except TypeError as e:
            raise ConfigError(f"bad generator parameters: {e}") from None
    if classes:
        _attach_classes(inst, load_classes(classes))
    return inst


def save_classes(path, U_class=None, theta_class=None, policy_class=None, model_class=None) -> None:
    doc = {}
    if U_class is not None:
        doc["U_class"] = [np.asarray(U).tolist() for U in U_class]
    if theta_class is not None:
        doc["theta_class"] = [np.asarray(t).tolist() for t in theta_class]
    if policy_class is not None:
        doc["policy_class"] = [as_table(p).tolist() for p in policy_class]
    if model_class is not None:
        doc["model_class"] = [M.to_dict() for M in model_class]
    Path(path).write_text(json.dumps(doc))


def load_classes(path) -> dict:
    doc = json.loads(Path(path).read_text())
    out = {}
    if "U_class" in doc:
        out["U_class"] = [np.asarray(U, dtype=float) for U in doc["U_class"]]
    if "theta_class" in doc:
        out["theta_class"] = [np.asarray(t, dtype=float) for t in doc["theta_class"]]
    if "policy_class" in doc:
        out["policy_class"] = [LeaderPolicy(p) for p in doc["policy_class"]]
    if "model_class" in doc:
        out["model_class"] = [build_tabular_game(m) for m in doc["model_class"]]
    if "true_index" in doc:
        out["true_index"] = int(doc["true_index"])
    return out


def _attach_classes(inst: Instance, cls: dict) -> None:
    for k, v in cls.items():
        setattr(inst, k, v)


def _ensure_myopic_classes(inst: Instance, grid: PrescriptionGrid) -> None:
    if inst.U_class is None or inst.theta_class is None or inst.policy_class is None:
        U, th, pol = finite_myopic_classes(inst.game, grid=grid)
        inst.U_class = inst.U_class if inst.U_class is not None else U
        inst.theta_class = inst.theta_class if inst.theta_class is not None else th
        inst.policy_class = inst.policy_class if inst.policy_class is not None else pol


def expand_beta(beta, *, algorithm: str, T: int, H: int, eta: float, d: int | None, delta: float,
                n_class: int | None) -> tuple[float, str]:
    """Numeric beta or the expansion of a formula token; returns (beta, description)."""
    if not isinstance(beta, str):
        return float(beta), "numeric"
    if beta == "paper-linear":
        if d is None:
            raise ConfigError("paper-linear beta needs a linear feature map")
        if ALGORITHMS[algorithm][0] == "online":
            val = beta_online(d, H, eta, T, delta)
            desc = f"d log(H T (1 + eta T^2) / delta) with d={d}, H={H}, eta={eta}, T={T}, delta={delta}"
        else:
            val = beta_linear(d, H, eta, T, delta)
            desc = f"d log(H (1 + eta T^2) / delta) with d={d}, H={H}, eta={eta}, T={T}, delta={delta}"
    else:
        if n_class is None:
            raise ConfigError("paper-farsighted beta needs a finite class")
        val = beta_farsighted(T, H, n_class, delta)
        desc = f"9 log(3 e^2 T H n / delta) with n={n_class}, H={H}, T={T}, delta={delta}"
    log.info("beta token %s expanded to %.6g (%s)", beta, val, desc)
    return val, desc


# ---------------------------------------------------------------- single runs


def pessimism_check(game: MarkovGame, policy, W0_value: float, n_mc: int = 200, seed: int = 0) -> dict:
    """Compare a pessimistic value with J(policy) and its Monte-Carlo standard error."""
    resp = quantal_response(game, policy)
    rets = np.array([sample_trajectory(game, policy, resp, rng_stream(seed, 0x3C, i)).leader_rewards.sum()
                     for i in range(n_mc)])
    sigma = float(rets.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    J = evaluate_J(game, policy)
    return {"J": J, "W0": float(W0_value), "sigma_mc": sigma, "mc_mean": float(rets.mean()),
            "valid": bool(W0_value <= J + 2.0 * sigma)}


def run_cell(cfg_doc: dict, T: int, seed: int) -> dict:
    """One sweep cell; returns a JSON-able record (never raises for library errors)."""
    cfg = ExperimentConfig.from_dict(cfg_doc)
    rec = {"algorithm": cfg.algorithm, "scheme": cfg.scheme, "T": T, "seed": seed, "c1": cfg.c1,
           "gamma2_scale": cfg.gamma2_scale, "status": "ok"}
    try:
        rec.update(_run(cfg, T, seed))
    except QSEError as e:
        rec.update(status="failed", error=f"{type(e).__name__}: {e}")
    return rec


def _run(cfg: ExperimentConfig, T: int, seed: int) -> dict:
    inst = build_instance(cfg.game, cfg.classes)
    game = inst.game
    S, A, B, H = game.dims
    grid = PrescriptionGrid(A, B, cfg.mesh)
    kind = ALGORITHMS[cfg.algorithm][0]
    d = inst.phi.shape[-1] if inst.phi is not None else None
    out: dict = {}

    if cfg.algorithm in ("mle-bcp", "mle-golf"):
        _ensure_myopic_classes(inst, grid)
        n_class = len(inst.U_class) * len(inst.theta_class)
    elif cfg.algorithm in ("pmle", "omle"):
        if inst.model_class is None or inst.policy_class is None:
            raise ConfigError(f"{cfg.algorithm} needs a model class and a policy class")
        n_class = len(inst.model_class)
    else:
        n_class = None
    beta, desc = expand_beta(cfg.beta, algorithm=cfg.algorithm, T=T, H=H, eta=game.eta, d=d, delta=cfg.delta,
                             n_class=n_class)
    out["beta"], out["beta_source"] = beta, desc

    if kind == "offline":
        ds = generate_offline_dataset(game, deterministic_policy_sampler(game), T, seed=seed)
        if cfg.algorithm == "mle-pvi":
            if inst.phi is None:
                raise ConfigError("mle-pvi needs a linear feature map")
            est = mle_pvi(ds, inst.phi, game.eta, cfg.scheme, beta=beta, c1=cfg.c1, grid=grid, delta=cfg.delta,
                          sample_size=cfg.sample_size, gamma2_scale=cfg.gamma2_scale, gamma=game.gamma, seed=seed)
            policy, J_hat = est.policy, est.value(game.rho0)
            J_star = solve_qse_myopic(game, grid).J_star
        elif cfg.algorithm == "mle-bcp":
            res = mle_bcp(ds, inst.U_class, inst.theta_class, inst.policy_class, beta, game.eta, game.rho0)
            policy, J_hat = res.policy, float(res.pessimistic_values[res.index])
            J_star = solve_qse_myopic(game, grid).J_star
        else:
            res = pmle_farsighted(ds, inst.model_class, inst.policy_class, beta)
            policy = res.policy
            J_hat = float(res.J[res.index, res.pessimistic_model[res.index]])
            J_star = max(evaluate_J(game, p) for p in inst.policy_class)
        J_pi = evaluate_J(game, policy)
        out.update(J_hat=J_hat, J_of_pi_hat=J_pi, J_star=J_star, subopt=J_star - J_pi,
                   policy=as_table(policy).tolist())
        return out

    if cfg.algorithm == "mle-ovi":
        if inst.phi is None:
            raise ConfigError("mle-ovi needs a linear feature map")
        tr = mle_ovi(game, T, cfg.scheme, phi=inst.phi, beta=beta, c1=cfg.c1, grid=grid, seed=seed,
                     delta=cfg.delta, sample_size=cfg.sample_size, gamma2_scale=cfg.gamma2_scale)
    elif cfg.algorithm == "mle-golf":
        tr = mle_golf(game, T, inst.U_class, inst.theta_class, beta, grid=grid, seed=seed)
    else:
        tr = omle_farsighted(game, T, inst.model_class, inst.policy_class, beta, seed=seed,
                             true_index=inst.true_index)
    out.update(J_star=tr.J_star, J_of_pi_hat=tr.J[-1] if tr.J else math.nan,
               subopt=tr.subopt[-1] if tr.subopt else math.nan,
               regret=tr.cum_regret[-1] if tr.cum_regret else 0.0,
               trace={"J": tr.J, "subopt": tr.subopt, "cum_regret": tr.cum_regret,
                      "sampled_return": tr.sampled_return, "beta": tr.beta, "scheme": tr.scheme})
    if tr.truth_in_set:
        out["truth_always_in_set"] = bool(all(tr.truth_in_set))
    return out


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    out_dir: Path
    records: list
    status: str  # complete | partial | failed
    files: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 0 if self.status != "failed" else 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x) -> str:
    return repr(float(x))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> SweepResult:
    """Execute the (T, seed) sweep and write per-run files, the aggregate CSV and the manifest."""
    out = Path(out_dir or cfg.out)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    cells = [(T, s) for T in sorted(cfg.T) for s in cfg.seeds]
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = {c: pool.submit(run_cell, doc, *c) for c in cells}
            records = [futs[c].result() for c in cells]
    else:
        records = [run_cell(doc, *c) for c in cells]

    for rec in records:
        stem = f"T{rec['T']}_seed{rec['seed']}"
        trace = rec.pop("trace", None)
        policy = rec.pop("policy", None)
        if policy is not None:
            (runs_dir / f"{stem}.policy.json").write_text(json.dumps(policy))
        if trace is not None:
            with open(runs_dir / f"{stem}.trace.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "J_pi_t", "subopt_t", "cum_regret", "sampled_return", "beta", "scheme", "seed"])
                for i in range(len(trace["J"])):
                    w.writerow([i + 1, _fmt(trace["J"][i]), _fmt(trace["subopt"][i]), _fmt(trace["cum_regret"][i]),
                                _fmt(trace["sampled_return"][i]), _fmt(trace["beta"]), trace["scheme"],
                                rec["seed"]])
        (runs_dir / f"{stem}.json").write_text(json.dumps(rec, sort_keys=True, indent=1))

    write_aggregate(records, out / "aggregate.csv")
    (out / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    ok = [r for r in records if r["status"] == "ok"]
    status = "complete" if len(ok) == len(records) else ("partial" if ok else "failed")
    for r in records:
        if r["status"] != "ok":
            log.warning("run T=%s seed=%s failed: %s", r["T"], r["seed"], r.get("error"))
    inst = build_instance(cfg.game, cfg.classes)
    files = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
             if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "code_version": __version__,
        "config": doc,
        "game_hash": inst.game.content_hash(),
        "status": status,
        "runs": [{"T": r["T"], "seed": r["seed"], "status": r["status"], "error": r.get("error"),
                  "beta_source": r.get("beta_source")} for r in records],
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return SweepResult(out, records, status, files)


AGG_COLUMNS = ["T", "n_runs", "n_failed", "subopt_median", "subopt_q25", "subopt_q75",
               "regret_median", "regret_q25", "regret_q75"]


def _quartiles(x):
    if not x:
        return (math.nan,) * 3
    q = np.percentile(np.asarray(x, dtype=float), [50, 25, 75])
    return tuple(float(v) for v in q)


def aggregate_rows(records) -> list:
    rows = []
    for T in sorted({r["T"] for r in records}):
        rs = [r for r in records if r["T"] == T]
        ok = [r for r in rs if r["status"] == "ok"]
        sub = _quartiles([r["subopt"] for r in ok])
        reg = _quartiles([r["regret"] for r in ok if "regret" in r])
        rows.append([T, len(rs), len(rs) - len(ok), *sub, *reg])
    return rows


def write_aggregate(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        for row in aggregate_rows(records):
            w.writerow([row[0], row[1], row[2]] + [_fmt(v) for v in row[3:]])


def load_records(result_dir) -> list:
    return [json.loads(p.read_text()) for p in sorted(Path(result_dir, "runs").glob("T*_seed*.json"))
            if not p.name.endswith(".policy.json")]


def emit_plots(result_dir) -> list:
    """TSV plot data: (T, median, q25, q75) suboptimality and per-run (t, cum_regret) series."""
    result_dir = Path(result_dir)
    agg = result_dir / "aggregate.csv"
    if not agg.is_file():
        raise MissingAggregate(f"{agg} not found; run a sweep first")
    written = []
    with open(agg, newline="") as fh:
        rows = list(csv.DictReader(fh))
    p = result_dir / "subopt.tsv"
    with open(p, "w") as fh:
        fh.write("T\tmedian_subopt\tq25\tq75\n")
        for r in rows:
            fh.write(f"{r['T']}\t{r['subopt_median']}\t{r['subopt_q25']}\t{r['subopt_q75']}\n")
    written.append(p)
    for tr in sorted((result_dir / "runs").glob("*.trace.csv")):
        with open(tr, newline="") as fh:
            trace = list(csv.DictReader(fh))
        p = result_dir / (tr.name.replace(".trace.csv", "") + ".regret.tsv")
        with open(p, "w") as fh:
            fh.write("t\tcum_regret\n")
            for r in trace:
                fh.write(f"{r['t']}\t{r['cum_regret']}\n")
        written.append(p)
    return written


# ---------------------------------------------------------------- calibration


C1_CANDIDATES = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def calibrate_c1(game: MarkovGame, phi: np.ndarray, T: int, seeds, scheme: str = "S3",
                 candidates=C1_CANDIDATES, pass_rate: float = 0.9, n_mc: int = 200, **pvi_kw) -> tuple:
    """Smallest c1 whose pessimism-validity rate over ``seeds`` reaches ``pass_rate``.

    Returns ``(c1 or None, {c1: rate})``.
    """
    rates = {}
    data = [generate_offline_dataset(game, deterministic_policy_sampler(game), T, seed=s) for s in seeds]
    for c1 in sorted(candidates):
        hits = 0
        for s, ds in zip(seeds, data):
            est = mle_pvi(ds, phi, game.eta, scheme, c1=c1, seed=s, **pvi_kw)
            hits += pessimism_check(game, est.policy, est.value(game.rho0), n_mc=n_mc, seed=s)["valid"]
        rates[c1] = hits / len(seeds)
        if rates[c1] >= pass_rate:
            return c1, rates
    return None, rates
