"""Depth-bounded decision-tree policies for finite discounted MDPs.

The per-iteration tree problem is solved by a branch-and-bound search over
tree variables with closed-form bounds; :func:`spot_run` wraps it in an
iterative policy-improvement loop.
"""

from .envs import frozen_lake, random_mdp, tiger_vs_antelope
from .estimator import SpotTreePolicy
from .io import load_mdp, load_prism, load_tree, save_json_mdp, save_tree
from .mdp import (
    Mdp,
    MdpValidationError,
    epsilon_greedy_return,
    expected_return,
    greedy_policy,
    occupancy,
    policy_evaluation,
    q_backup,
    uniform_policy,
    value_iteration,
)
from .rsbb import Box, SolveReport, StageProblem, solve
from .spot import SpotConfig, SpotResult, make_mask, normalized_return, spot_run
from .tree import TreePolicy, route, route_all, tree_to_dot, tree_to_json

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Mdp",
    "MdpValidationError",
    "SolveReport",
    "SpotConfig",
    "SpotResult",
    "SpotTreePolicy",
    "StageProblem",
    "TreePolicy",
    "epsilon_greedy_return",
    "expected_return",
    "frozen_lake",
    "greedy_policy",
    "load_mdp",
    "load_prism",
    "load_tree",
    "make_mask",
    "normalized_return",
    "occupancy",
    "policy_evaluation",
    "q_backup",
    "random_mdp",
    "route",
    "route_all",
    "save_json_mdp",
    "save_tree",
    "solve",
    "spot_run",
    "tiger_vs_antelope",
    "tree_to_dot",
    "tree_to_json",
    "uniform_policy",
    "value_iteration",
]
