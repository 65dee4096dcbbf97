"""Command-line front door: ``qse <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .game import Dataset, LeaderPolicy, save_game
from .harness import GENERATORS, ExperimentConfig, build_instance, emit_plots, expand_beta, run_experiment, save_classes
from .harness import _ensure_myopic_classes
from .benchmarks import deterministic_policy_sampler, fixed_policy_sampler, generate_offline_dataset
from .mle import choice_data, confidence_set, covariance_data, fit_mle_myopic, rank_deficiency
from .offline import mle_bcp, mle_pvi, pmle_farsighted
from .online import mle_golf, mle_ovi, omle_farsighted
from .oracle import brute_force_qse, run_battery, slack_table, write_junit
from .planner import PrescriptionGrid, evaluate_J, solve_qse_myopic
from .response import quantal_response

EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 2, 3, 4


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--out", default=d(None), help="output file or directory")
    parser.add_argument("--config", default=d(None), help="TOML/JSON experiment config")
    parser.add_argument("--quiet", action="store_true", default=d(False), help="suppress stdout reports")


def _game_args(p):
    g = p.add_argument_group("game source")
    g.add_argument("--game", help="game JSON file (from `qse gen game`)")
    g.add_argument("--generator", choices=GENERATORS, help="built-in instance generator")
    g.add_argument("--game-seed", type=int, default=None, help="generator seed")
    g.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="generator parameter (repeatable), e.g. --param eta=2")
    g.add_argument("--classes", help="JSON file with finite classes")


def _grid_args(p):
    p.add_argument("--mesh", type=int, default=10, help="prescription grid mesh (default 10)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qse", description="Learning in leader-follower Markov games with a quantal-response follower.")
    _globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, suppress=True)
        return p

    p = add("plan", "exact quantal Stackelberg equilibrium over the prescription grid")
    _game_args(p)
    _grid_args(p)
    p.add_argument("--brute", action="store_true", help="cross-check by exhaustive enumeration")

    p = add("respond", "quantal response of the follower to a leader policy")
    _game_args(p)
    p.add_argument("--policy", required=True, help="policy JSON (H, S, B, A) table")

    p = add("fit", "maximum-likelihood follower model and confidence diagnostics")
    _game_args(p)
    p.add_argument("--dataset", required=True, help="dataset JSONL (from `qse gen dataset`)")
    p.add_argument("--step", type=int, default=None, help="step h (default: all)")
    p.add_argument("--beta", default="paper-linear", help="number or formula token")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--sample-size", type=int, default=64)

    p = add("offline", "offline learners: mle-pvi, mle-bcp, pmle")
    _game_args(p)
    _grid_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--algorithm", choices=["mle-pvi", "mle-bcp", "pmle"], default="mle-pvi")
    p.add_argument("--scheme", choices=["S1", "S2", "S3"], default="S3")
    p.add_argument("--beta", default="paper-linear")
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--gamma2-scale", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--sample-size", type=int, default=64)

    p = add("online", "online learners: mle-ovi, mle-golf, omle")
    _game_args(p)
    _grid_args(p)
    p.add_argument("--T", type=int, required=True, help="number of episodes")
    p.add_argument("--algorithm", choices=["mle-ovi", "mle-golf", "omle"], default="mle-ovi")
    p.add_argument("--scheme", choices=["S4", "S5"], default="S5")
    p.add_argument("--beta", default=None, help="number or token (default per algorithm)")
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--gamma2-scale", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--sample-size", type=int, default=64)

    p = add("gen", "generate games, datasets or finite classes")
    p.add_argument("what", choices=["game", "dataset", "classes"])
    _game_args(p)
    _grid_args(p)
    p.add_argument("--T", type=int, default=100, help="episodes for datasets")
    p.add_argument("--policy", help="fixed behaviour policy JSON (default: uniform over deterministic grid)")

    p = add("verify", "run the oracle battery")
    p.add_argument("--n", type=int, default=1000, help="random instances per check family")

    add("sweep", "config-driven experiment sweep (requires --config)")

    p = add("plotdata", "emit TSV plot data from a result directory")
    p.add_argument("result_dir")
    return ap


# ---------------------------------------------------------------- helpers


def _parse_params(items) -> dict:
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--param expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        try:
            out[k.replace("-", "_")] = json.loads(v)
        except json.JSONDecodeError:
            out[k.replace("-", "_")] = v
    return out


def _instance(args):
    if bool(args.game) == bool(args.generator):
        raise ConfigError("give exactly one of --game or --generator")
    if args.game:
        if not Path(args.game).is_file():
            raise ConfigError(f"game file {args.game} does not exist")
        spec = {"file": args.game}
    else:
        spec = {"generator": args.generator, **_parse_params(args.param)}
        if args.game_seed is not None:
            spec["seed"] = args.game_seed
    if args.classes and not Path(args.classes).is_file():
        raise ConfigError(f"class file {args.classes} does not exist")
    return build_instance(spec, args.classes)


def _beta(raw):
    if raw is None:
        return None
    try:
        return float(raw)
    except ValueError:
        return raw


def _load_policy(path) -> LeaderPolicy:
    if not Path(path).is_file():
        raise ConfigError(f"policy file {path} does not exist")
    return LeaderPolicy(json.loads(Path(path).read_text()))


def _load_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise ConfigError(f"dataset {path} does not exist")
    return Dataset.load(path)


def _emit(args, report: dict) -> None:
    text = json.dumps(report, indent=1, sort_keys=True, default=_jsonable)
    if args.out and args.command not in ("sweep", "verify", "gen", "online"):
        Path(args.out).write_text(text)
    if not args.quiet:
        print(text)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, LeaderPolicy):
        return x.table.tolist()
    raise TypeError(type(x))


# ---------------------------------------------------------------- commands


def cmd_plan(args):
    inst = _instance(args)
    game = inst.game
    S, A, B, H = game.dims
    grid = PrescriptionGrid(A, B, args.mesh)
    sol = solve_qse_myopic(game, grid)
    rep = {"J_star": sol.J_star, "policy": sol.policy, "grid_size": len(grid), "W": sol.W}
    if args.brute:
        _, Jb = brute_force_qse(game, grid)
        rep["J_star_brute"] = Jb
        rep["agree"] = abs(Jb - sol.J_star) <= 1e-9
    return rep


def cmd_respond(args):
    inst = _instance(args)
    pol = _load_policy(args.policy)
    pol.check_game(inst.game)
    sol = quantal_response(inst.game, pol)
    return {"nu": sol.nu, "V": sol.V, "A": sol.A, "J": evaluate_J(inst.game, pol),
            "advantage_bound": sol.advantage_bound, "invariant_errors": sol.invariant_errors()}


def cmd_fit(args):
    inst = _instance(args)
    if inst.phi is None:
        raise ConfigError("fit needs a linear feature map")
    game, phi = inst.game, inst.phi
    ds = _load_dataset(args.dataset)
    H, d = phi.shape[0], phi.shape[-1]
    beta, desc = expand_beta(_beta(args.beta), algorithm="mle-pvi", T=len(ds), H=H, eta=game.eta, d=d,
                             delta=args.delta, n_class=None)
    steps = range(H) if args.step is None else [args.step]
    out = {"beta": beta, "beta_source": desc, "steps": []}
    for h in steps:
        data = choice_data(ds, phi, h, game.eta)
        fit = fit_mle_myopic(data)
        cs = confidence_set(data, beta, sample_size=args.sample_size, seed=args.seed, fit=fit)
        Sigma = covariance_data(ds, np.tile(fit.theta, (H, 1)), phi, game.eta)[h]
        rk = rank_deficiency(Sigma, phi[h])
        out["steps"].append({"h": h, "theta_hat": fit.theta, "nll": fit.nll, "grad_norm": fit.grad_norm,
                             "converged": fit.converged, "confidence_sample_size": len(cs.theta_sample),
                             "sigma_eigenvalues": rk.eigenvalues, "nullity": rk.nullity,
                             "intrinsic_nullity": rk.intrinsic_nullity, "rank_deficient": rk.rank_deficient})
    return out


def cmd_offline(args):
    inst = _instance(args)
    game = inst.game
    S, A, B, H = game.dims
    grid = PrescriptionGrid(A, B, args.mesh)
    ds = _load_dataset(args.dataset)
    beta = _beta(args.beta)
    if args.algorithm == "mle-pvi":
        if inst.phi is None:
            raise ConfigError("mle-pvi needs a linear feature map")
        beta, desc = expand_beta(beta, algorithm="mle-pvi", T=len(ds), H=H, eta=game.eta, d=inst.phi.shape[-1],
                                 delta=args.delta, n_class=None)
        est = mle_pvi(ds, inst.phi, game.eta, args.scheme, beta=beta, c1=args.c1, grid=grid, delta=args.delta,
                      sample_size=args.sample_size, gamma2_scale=args.gamma2_scale, gamma=game.gamma,
                      seed=args.seed)
        pol, J_hat = est.policy, est.value(game.rho0)
        J_star = solve_qse_myopic(game, grid).J_star if game.myopic else None
    elif args.algorithm == "mle-bcp":
        _ensure_myopic_classes(inst, grid)
        beta, desc = expand_beta("paper-farsighted" if isinstance(beta, str) else beta, algorithm="mle-bcp",
                                 T=len(ds), H=H, eta=game.eta, d=None, delta=args.delta,
                                 n_class=len(inst.U_class) * len(inst.theta_class))
        res = mle_bcp(ds, inst.U_class, inst.theta_class, inst.policy_class, beta, game.eta, game.rho0)
        pol, J_hat = res.policy, float(res.pessimistic_values[res.index])
        J_star = solve_qse_myopic(game, grid).J_star
    else:
        if inst.model_class is None or inst.policy_class is None:
            raise ConfigError("pmle needs a model class and a policy class")
        beta, desc = expand_beta("paper-farsighted" if isinstance(beta, str) else beta, algorithm="pmle",
                                 T=len(ds), H=H, eta=game.eta, d=None, delta=args.delta,
                                 n_class=len(inst.model_class))
        res = pmle_farsighted(ds, inst.model_class, inst.policy_class, beta)
        pol = res.policy
        J_hat = float(res.J[res.index, res.pessimistic_model[res.index]])
        J_star = max(evaluate_J(game, p) for p in inst.policy_class)
    J_pi = evaluate_J(game, pol)
    return {"algorithm": args.algorithm, "scheme": args.scheme if args.algorithm == "mle-pvi" else None,
            "T": len(ds), "beta": beta, "beta_source": desc, "c1": args.c1, "seed": args.seed, "J_hat": J_hat,
            "J_of_pi_hat": J_pi, "J_star": J_star, "subopt": None if J_star is None else J_star - J_pi,
            "policy": pol}


def cmd_online(args):
    inst = _instance(args)
    game = inst.game
    S, A, B, H = game.dims
    grid = PrescriptionGrid(A, B, args.mesh)
    beta = _beta(args.beta)
    if args.algorithm == "mle-ovi":
        if inst.phi is None:
            raise ConfigError("mle-ovi needs a linear feature map")
        if isinstance(beta, str):
            beta, _ = expand_beta(beta, algorithm="mle-ovi", T=args.T, H=H, eta=game.eta, d=inst.phi.shape[-1],
                                  delta=args.delta, n_class=None)
        tr = mle_ovi(game, args.T, args.scheme, phi=inst.phi, beta=beta, c1=args.c1, grid=grid, seed=args.seed,
                     delta=args.delta, sample_size=args.sample_size, gamma2_scale=args.gamma2_scale)
    elif args.algorithm == "mle-golf":
        _ensure_myopic_classes(inst, grid)
        if beta is None or isinstance(beta, str):
            beta, _ = expand_beta("paper-farsighted", algorithm="mle-golf", T=args.T, H=H, eta=game.eta, d=None,
                                  delta=args.delta, n_class=len(inst.U_class) * len(inst.theta_class))
        tr = mle_golf(game, args.T, inst.U_class, inst.theta_class, beta, grid=grid, seed=args.seed)
    else:
        if inst.model_class is None or inst.policy_class is None:
            raise ConfigError("omle needs a model class and a policy class")
        if beta is None or isinstance(beta, str):
            beta, _ = expand_beta("paper-farsighted", algorithm="omle", T=args.T, H=H, eta=game.eta, d=None,
                                  delta=args.delta, n_class=len(inst.model_class))
        tr = omle_farsighted(game, args.T, inst.model_class, inst.policy_class, beta, seed=args.seed,
                             true_index=inst.true_index)
    if args.out:
        tr.to_csv(args.out)
    rep = {"algorithm": args.algorithm, "T": args.T, "beta": tr.beta, "J_star": tr.J_star,
           "regret": tr.cum_regret[-1] if tr.cum_regret else 0.0,
           "final_subopt": tr.subopt[-1] if tr.subopt else None}
    if tr.truth_in_set:
        rep["truth_always_in_set"] = all(tr.truth_in_set)
    return rep


def cmd_gen(args):
    if not args.out:
        raise ConfigError("gen needs --out")
    inst = _instance(args)
    game = inst.game
    if args.what == "game":
        save_game(game, args.out, inst.linear)
        if inst.model_class is not None:
            save_classes(Path(args.out).with_suffix(".classes.json"), policy_class=inst.policy_class,
                         model_class=inst.model_class)
            doc = json.loads(Path(args.out).with_suffix(".classes.json").read_text())
            doc["true_index"] = inst.true_index
            Path(args.out).with_suffix(".classes.json").write_text(json.dumps(doc))
        return {"written": args.out, "dims": game.dims, "hash": game.content_hash()}
    if args.what == "classes":
        S, A, B, H = game.dims
        grid = PrescriptionGrid(A, B, args.mesh)
        _ensure_myopic_classes(inst, grid)
        save_classes(args.out, inst.U_class, inst.theta_class, inst.policy_class)
        return {"written": args.out, "sizes": [len(inst.U_class), len(inst.theta_class), len(inst.policy_class)]}
    sampler = fixed_policy_sampler(_load_policy(args.policy)) if args.policy else deterministic_policy_sampler(game)
    ds = generate_offline_dataset(game, sampler, args.T, seed=args.seed)
    ds.save(args.out)
    return {"written": args.out, "T": len(ds)}


def cmd_verify(args):
    results = run_battery(n=args.n, seed=args.seed)
    out = Path(args.out or "verify")
    out.mkdir(parents=True, exist_ok=True)
    write_junit(results, out / "junit.xml")
    table = slack_table(results)
    (out / "slacks.txt").write_text(table + "\n")
    if not args.quiet:
        print(table)
    failed = [r.name for r in results if not r.passed]
    return {"_exit": EXIT_VERIFY if failed else 0, "failed": failed}


def cmd_sweep(args):
    if not args.config:
        raise ConfigError("sweep needs --config")
    cfg = ExperimentConfig.load(args.config)
    res = run_experiment(cfg, args.out)
    rep = {"out": str(res.out_dir), "status": res.status, "runs": len(res.records),
           "failed": sum(r["status"] != "ok" for r in res.records)}
    rep["_exit"] = res.exit_code
    return rep


def cmd_plotdata(args):
    return {"written": [str(p) for p in emit_plots(args.result_dir)]}


COMMANDS = {"plan": cmd_plan, "respond": cmd_respond, "fit": cmd_fit, "offline": cmd_offline, "online": cmd_online,
            "gen": cmd_gen, "verify": cmd_verify, "sweep": cmd_sweep, "plotdata": cmd_plotdata}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        rep = COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    code = rep.pop("_exit", 0)
    if args.command != "verify":
        _emit(args, rep)
    elif not args.quiet and rep["failed"]:
        print("failed checks: " + ", ".join(rep["failed"]), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
