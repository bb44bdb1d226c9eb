"""Command line interface.

Exit status: 0 on success, 2 on invalid input, 3 when a time limit fired
but a (possibly suboptimal) result was still produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .envs import ENVIRONMENTS, random_mdp
from .io import MdpParseError, load_mdp, load_tree, save_json_mdp, save_tree, write_history
from .mdp import (
    MdpValidationError,
    expected_return,
    greedy_policy,
    policy_evaluation,
    q_backup,
    uniform_policy,
    value_iteration,
)
from .rsbb import Infeasible, StageProblem, solve
from .spot import SpotConfig, _weights, return_scale, spot_run
from .tree import TreeValidationError, tree_to_dot, tree_to_json, tree_to_policy

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_TIMEOUT = 3


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _add_mdp_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mdp", type=Path, help="MDP file: .json, or a PRISM .tra (siblings .sta/.trew/.lab)")
    src.add_argument("--env", choices=sorted(ENVIRONMENTS), help="built-in environment")
    p.add_argument("--gamma", type=float, default=None, help="discount (PRISM default 0.99)")


def _add_solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--delta", type=float, default=1e-6, help="absolute optimality gap")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phi-mode", choices=("one", "occupancy", "softmax"), default="one",
                   help="state weights in the per-iteration objective")
    p.add_argument("--trace", type=Path, default=None, help="write one JSON line per processed solver node")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotree", description="Decision-tree policies for finite MDPs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="one branch-and-bound solve of the per-iteration problem")
    _add_mdp_args(p)
    _add_solver_args(p)
    p.add_argument("--v-old", default="zero",
                   help="value function to back up: zero, optimal, uniform, or a tree JSON file")
    p.add_argument("--iter-timeout-s", type=float, default=None, help="solver time limit")
    p.add_argument("--out", type=Path, default=None, help="write the tree here")

    p = sub.add_parser("spot", help="iterative tree-policy optimization")
    _add_mdp_args(p)
    _add_solver_args(p)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--phi", default="0.5", help="probability of freeing a node group; comma list for a schedule")
    p.add_argument("--iter-timeout-s", type=float, default=300.0)
    p.add_argument("--total-timeout-s", type=float, default=3600.0)
    p.add_argument("--init", choices=("random", "constant"), default="random")
    p.add_argument("--warm-start", type=Path, default=None, help="initial tree JSON")
    p.add_argument("--no-explore", action="store_true", help="evaluate V_old without epsilon-greedy exploration")
    p.add_argument("--history", type=Path, default=None, help="write per-iteration JSON lines here")
    p.add_argument("--out", type=Path, default=None, help="write the best tree here")

    p = sub.add_parser("eval", help="exact and normalized return of a tree")
    _add_mdp_args(p)
    p.add_argument("--tree", type=Path, required=True)

    p = sub.add_parser("export-dot", help="Graphviz source for a tree")
    p.add_argument("--tree", type=Path, required=True)
    p.add_argument("--mdp", type=Path, default=None, help="take feature and action names from this MDP")
    p.add_argument("--env", choices=sorted(ENVIRONMENTS), default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("gen", help="write a generated MDP as JSON")
    p.add_argument("env", choices=sorted(ENVIRONMENTS) + ["random"])
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--states", type=int, default=20)
    p.add_argument("--actions", type=int, default=4)
    p.add_argument("--features", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    return parser


def _mdp(args):
    if getattr(args, "env", None):
        kwargs = {} if args.gamma is None else {"gamma": args.gamma}
        return ENVIRONMENTS[args.env](**kwargs)
    if getattr(args, "mdp", None) is None:
        return None
    return load_mdp(args.mdp, gamma=getattr(args, "gamma", None))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _v_old(mdp, spec: str) -> np.ndarray:
    if spec == "zero":
        return np.zeros(mdp.n_states)
    if spec == "optimal":
        return value_iteration(mdp)
    if spec == "uniform":
        return policy_evaluation(mdp, uniform_policy(mdp))
    tree = load_tree(spec, mdp.n_features, mdp.n_actions)
    return policy_evaluation(mdp, tree_to_policy(tree, mdp))


def cmd_solve(args) -> int:
    mdp = _mdp(args)
    v_old = _v_old(mdp, args.v_old)
    if args.phi_mode == "one":
        weights = np.ones(mdp.n_states)
    else:
        weights = _weights(mdp, greedy_policy(q_backup(mdp, v_old)), args.phi_mode)
    prob = StageProblem(weights, q_backup(mdp, v_old), mdp.features, args.depth)
    report = solve(prob, delta=args.delta, time_limit=args.iter_timeout_s, workers=args.workers,
                   seed=args.seed, trace=args.trace)
    if args.out:
        save_tree(report.tree, args.out)
    _emit({
        "objective": report.objective,
        "upper": report.upper,
        "gap": report.gap,
        "nodes": report.nodes,
        "termination": report.termination,
        "seed": report.seed,
        "workers": report.workers,
        "wall_time": report.wall_time,
        "tree": tree_to_json(report.tree),
    })
    return EXIT_TIMEOUT if report.termination == "time_limit" else EXIT_OK


def cmd_spot(args) -> int:
    mdp = _mdp(args)
    try:
        phi = [float(v) for v in str(args.phi).split(",")]
    except ValueError:
        raise CliError("argument", f"--phi must be a number or a comma list, got {args.phi!r}") from None
    warm = load_tree(args.warm_start, mdp.n_features, mdp.n_actions) if args.warm_start else None
    cfg = SpotConfig(
        depth=args.depth,
        n_iter=args.iters,
        phi=phi[0] if len(phi) == 1 else phi,
        iter_time_limit=args.iter_timeout_s,
        total_time_limit=args.total_timeout_s,
        phi_mode=args.phi_mode,
        delta=args.delta,
        workers=args.workers,
        seed=args.seed,
        warm_start=warm,
        init="warm" if warm is not None else args.init,
        explore=not args.no_explore,
    )
    result = spot_run(mdp, cfg, trace=args.trace)
    if args.history:
        write_history(result.history, args.history)
    if args.out:
        save_tree(result.best_tree, args.out)
    _emit({
        "best_return": result.best_return,
        "best_normalized_return": result.best_normalized,
        "normalization": "random/optimal",
        "iterations": len(result.history) - 1,
        "termination": result.termination,
        "tree": tree_to_json(result.best_tree),
    })
    return EXIT_TIMEOUT if result.termination == "time_limit" else EXIT_OK


def cmd_eval(args) -> int:
    mdp = _mdp(args)
    tree = load_tree(args.tree, mdp.n_features, mdp.n_actions)
    v = policy_evaluation(mdp, tree_to_policy(tree, mdp))
    j = expected_return(mdp, v)
    scale = return_scale(mdp)
    _emit({
        "return": j,
        "normalized_return": scale.normalize(j),
        "normalization": "random/optimal",
        "random_return": scale.random,
        "optimal_return": scale.optimal,
    })
    return EXIT_OK


def cmd_export_dot(args) -> int:
    tree = load_tree(args.tree)
    mdp = _mdp(argparse.Namespace(env=args.env, mdp=args.mdp, gamma=None))
    names = (mdp.feature_names, mdp.action_names) if mdp is not None else (None, None)
    dot = tree_to_dot(tree, *names)
    if args.out:
        args.out.write_text(dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def cmd_gen(args) -> int:
    kwargs = {} if args.gamma is None else {"gamma": args.gamma}
    if args.env == "random":
        mdp = random_mdp(args.states, args.actions, args.features, args.seed, **kwargs)
    else:
        mdp = ENVIRONMENTS[args.env](**kwargs)
    out = args.out or Path(f"{mdp.name}.json")
    save_json_mdp(mdp, out)
    _emit({"path": str(out), "num_states": mdp.n_states, "num_actions": mdp.n_actions,
           "num_features": mdp.n_features})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "spot": cmd_spot, "eval": cmd_eval, "export-dot": cmd_export_dot, "gen": cmd_gen}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except MdpValidationError as exc:
        err = {"error": "validation", "check": exc.check, "message": str(exc)}
    except MdpParseError as exc:
        err = {"error": "parse", "path": exc.path, "line": exc.line, "message": str(exc)}
    except TreeValidationError as exc:
        err = {"error": "tree", "violations": exc.violations, "message": str(exc)}
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
    except Infeasible as exc:
        err = {"error": "infeasible", "message": str(exc)}
    except (OSError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err), file=sys.stderr)
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
