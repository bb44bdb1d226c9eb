"""Iterative tree-policy improvement: fix part of the tree, re-solve, evaluate."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import (
    Mdp,
    deterministic_policy,
    epsilon_greedy_return,
    expected_return,
    greedy_policy,
    occupancy,
    policy_evaluation,
    q_backup,
    uniform_policy,
    value_iteration,
)
from .rsbb import Box, Infeasible, StageProblem, propagate, solve
from .tree import TreePolicy, TreeShape, constant_tree, random_tree, tree_to_json, tree_to_policy, validate

__all__ = [
    "SpotConfig",
    "SpotState",
    "SpotResult",
    "ReturnScale",
    "make_mask",
    "return_scale",
    "normalized_return",
    "policy_return",
    "spot_run",
]

logger = logging.getLogger(__name__)

PHI_MODES = {"one": "one", "occupancy": "exact", "exact": "exact", "softmax": "softmax"}
INIT_MODES = ("random", "constant", "warm")

# exact occupancy can vanish on unreachable states; keep every weight positive
MIN_WEIGHT = 1e-9


@dataclass
class SpotConfig:
    depth: int = 3
    n_iter: int = 10
    phi: float | Sequence[float] = 0.5
    iter_time_limit: float | None = 300.0
    total_time_limit: float | None = 3600.0
    phi_mode: str = "one"
    delta: float = 1e-6
    workers: int = 1
    seed: int | None = 0
    warm_start: TreePolicy | None = None
    init: str = "random"
    explore: bool = True

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")
        phis = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if phis.size == 0 or np.any(phis < 0) or np.any(phis > 1):
            raise ValueError("phi values must lie in [0, 1]")
        for name in ("iter_time_limit", "total_time_limit"):
            cap = getattr(self, name)
            if cap is not None and cap <= 0:
                raise ValueError(f"{name} must be positive")
        if self.phi_mode not in PHI_MODES:
            raise ValueError(f"phi_mode must be one of {sorted(PHI_MODES)}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.warm_start is not None:
            self.init = "warm"
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.init == "warm" and self.warm_start is None:
            raise ValueError("init='warm' needs a warm_start tree")

    def phi_at(self, iteration: int) -> float:
        """Threshold for 1-based ``iteration``; a short schedule repeats its last entry."""
        phis = np.atleast_1d(np.asarray(self.phi, dtype=float))
        return float(phis[min(iteration - 1, len(phis) - 1)])


@dataclass
class SpotState:
    iteration: int
    v_old: np.ndarray
    weights: np.ndarray
    incumbent: TreePolicy
    best_tree: TreePolicy
    best_return: float


@dataclass
class SpotResult:
    best_tree: TreePolicy
    best_return: float
    best_normalized: float
    history: list[dict] = field(repr=False)
    termination: str  # "completed" or "time_limit"
    state: SpotState = field(repr=False)

    @property
    def returns(self) -> list[float]:
        return [rec["return"] for rec in self.history]

    @property
    def best_so_far(self) -> list[float]:
        return [rec["best_return"] for rec in self.history]


def make_mask(incumbent: TreePolicy, phi: float, rng: np.random.Generator) -> Box:
    """Box that frees each node group of ``incumbent`` with probability ``phi``.

    Coins are drawn in one batch ordered ``[d_1..d_B, (a,b)_1..(a,b)_B, c_1..c_L]``;
    a group whose coin is below ``phi`` keeps its full bounds, the rest are
    pinned to the incumbent.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    shape = TreeShape(incumbent.depth)
    nb, nl = shape.n_branch, shape.n_leaves
    coins = rng.random(2 * nb + nl)
    free_d, free_ab, free_c = coins[:nb] < phi, coins[nb:2 * nb] < phi, coins[2 * nb:] < phi
    box = Box.full(incumbent.depth, incumbent.n_features, incumbent.n_actions)
    d, a, c = incumbent.d.astype(bool), incumbent.a.astype(bool), incumbent.c.astype(bool)
    b = np.where(incumbent.d == 1, incumbent.b, 0.0)
    fix = ~free_d
    box.d_lo[fix] = box.d_hi[fix] = d[fix]
    fix = ~free_ab
    box.a_lo[fix] = a[fix]
    box.a_hi[fix] = a[fix]
    box.b_lo[fix] = box.b_hi[fix] = b[fix]
    fix = ~free_c
    box.c_lo[fix] = c[fix]
    box.c_hi[fix] = c[fix]
    tight = propagate(box)
    assert tight is not None and tight.contains(incumbent), "mask excludes the incumbent"
    return tight


@dataclass(frozen=True)
class ReturnScale:
    random: float
    optimal: float

    def normalize(self, j: float) -> float:
        span = self.optimal - self.random
        if abs(span) <= 1e-12 * (1.0 + abs(self.optimal)):
            return 1.0 if abs(j - self.optimal) <= 1e-9 * (1.0 + abs(self.optimal)) else 0.0
        return (j - self.random) / span


def return_scale(mdp: Mdp) -> ReturnScale:
    """Expected returns of the uniform-random policy and of an optimal policy."""
    v_star = value_iteration(mdp, tol=1e-10)
    v_opt = policy_evaluation(mdp, greedy_policy(q_backup(mdp, v_star)))
    j_opt = max(expected_return(mdp, v_opt), expected_return(mdp, v_star))
    j_rand = expected_return(mdp, policy_evaluation(mdp, uniform_policy(mdp)))
    return ReturnScale(j_rand, j_opt)


def _policy_matrix(mdp: Mdp, policy) -> np.ndarray:
    if isinstance(policy, TreePolicy):
        return tree_to_policy(policy, mdp)
    policy = np.asarray(policy)
    if policy.ndim == 1:
        return deterministic_policy(policy, mdp.n_actions)
    return policy.astype(float)


def policy_return(mdp: Mdp, policy) -> float:
    """Exact ``sum_i p0(i) V(i)`` of a tree, action vector or policy matrix."""
    return expected_return(mdp, policy_evaluation(mdp, _policy_matrix(mdp, policy)))


def normalized_return(mdp: Mdp, policy, scale: ReturnScale | None = None) -> float:
    """Return rescaled so the uniform-random policy scores 0 and an optimal one 1.

    When both coincide the result is 1 for a policy matching them and 0 otherwise.
    """
    scale = return_scale(mdp) if scale is None else scale
    return scale.normalize(policy_return(mdp, policy))


def _weights(mdp: Mdp, mu: np.ndarray, mode: str) -> np.ndarray:
    w = occupancy(mdp, mu, mode=PHI_MODES[mode]).values
    return np.maximum(w, MIN_WEIGHT * max(float(w.max()), 1.0))


def _initial_tree(mdp: Mdp, cfg: SpotConfig, rng: np.random.Generator) -> TreePolicy:
    if cfg.init == "warm":
        tree = cfg.warm_start
        if (tree.depth, tree.n_features, tree.n_actions) != (cfg.depth, mdp.n_features, mdp.n_actions):
            raise ValueError(
                f"warm start has depth {tree.depth}, {tree.n_features} features and {tree.n_actions} actions; "
                f"expected {cfg.depth}, {mdp.n_features} and {mdp.n_actions}"
            )
        problems = validate(tree)
        if problems:
            raise ValueError("invalid warm start tree: " + "; ".join(problems))
        return tree
    if cfg.init == "constant":
        return constant_tree(cfg.depth, mdp.n_features, mdp.n_actions)
    return random_tree(cfg.depth, mdp.features, mdp.n_actions, rng)


def spot_run(
    mdp: Mdp,
    cfg: SpotConfig,
    callback: Callable[[dict], None] | None = None,
    trace=None,
    scale: ReturnScale | None = None,
    on_solve: Callable[[int, StageProblem, object], None] | None = None,
) -> SpotResult:
    """Improve a depth-``cfg.depth`` tree policy for ``cfg.n_iter`` iterations.

    Each iteration backs up ``V_old`` once, frees a random part of the
    current tree, re-optimizes that part exactly (up to ``cfg.delta`` or the
    iteration time cap) and evaluates the result. The tree with the highest
    exact expected return seen, including the initial one, is returned.

    ``callback`` receives each history record as it is produced;
    ``on_solve(iteration, stage_problem, solve_report)`` sees every solve;
    ``trace`` is forwarded to every solve.
    """
    mdp.validate()
    if trace is not None and not callable(trace) and not hasattr(trace, "write"):
        with open(trace, "w") as fh:
            return spot_run(mdp, cfg, callback=callback, trace=fh, scale=scale, on_solve=on_solve)
    start = time.monotonic()
    deadline = None if cfg.total_time_limit is None else start + cfg.total_time_limit
    rng = np.random.default_rng(cfg.seed)
    scale = return_scale(mdp) if scale is None else scale

    tree = _initial_tree(mdp, cfg, rng)
    mu = tree_to_policy(tree, mdp)
    v = policy_evaluation(mdp, mu)
    j = expected_return(mdp, v)
    state = SpotState(0, v, _weights(mdp, mu, cfg.phi_mode), tree, tree, j)
    history = [_record(0, None, None, j, scale, state, start, tree)]
    if callback:
        callback(history[-1])

    termination = "completed"
    for it in range(1, cfg.n_iter + 1):
        limit = cfg.iter_time_limit
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                termination = "time_limit"
                break
            limit = remaining if limit is None else min(limit, remaining)
        phi = cfg.phi_at(it)
        q = q_backup(mdp, state.v_old)
        prob = StageProblem(state.weights, q, mdp.features, cfg.depth)
        box = make_mask(state.incumbent, phi, rng)
        solver_seed = int(rng.integers(2**31))
        try:
            report = solve(prob, box, delta=cfg.delta, time_limit=limit, workers=cfg.workers,
                           seed=solver_seed, trace=trace, incumbent=state.incumbent)
        except Infeasible as exc:
            raise RuntimeError(f"iteration {it}: masked problem infeasible ({exc})") from exc
        if on_solve:
            on_solve(it, prob, report)
        tree = report.tree
        mu = tree_to_policy(tree, mdp)
        v = policy_evaluation(mdp, mu)
        j = expected_return(mdp, v)
        if j > state.best_return:
            state.best_tree, state.best_return = tree, j
        if cfg.explore:
            v, _ = epsilon_greedy_return(mdp, mu, 1.0 / it)
        state.iteration = it
        state.v_old = v
        state.weights = _weights(mdp, mu, cfg.phi_mode)
        state.incumbent = tree
        history.append(_record(it, phi, report, j, scale, state, start, tree))
        if callback:
            callback(history[-1])
        logger.info("iteration %d: return %.6g (best %.6g), solver %s", it, j, state.best_return, report.termination)
        if report.termination == "time_limit" and deadline is not None and time.monotonic() >= deadline:
            termination = "time_limit"
            break

    return SpotResult(
        best_tree=state.best_tree,
        best_return=state.best_return,
        best_normalized=scale.normalize(state.best_return),
        history=history,
        termination=termination,
        state=state,
    )


def _record(it, phi, report, j, scale, state, start, tree) -> dict:
    return {
        "iteration": it,
        "phi": phi,
        "objective": None if report is None else report.objective,
        "gap": None if report is None else report.gap,
        "nodes": None if report is None else report.nodes,
        "solver_termination": None if report is None else report.termination,
        "return": j,
        "normalized_return": scale.normalize(j),
        "best_return": state.best_return,
        "wall_time": time.monotonic() - start,
        "tree": tree_to_json(tree),
    }
