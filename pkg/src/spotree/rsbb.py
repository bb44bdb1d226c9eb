"""Reduced-space branch-and-bound over tree-structure variables.

The per-iteration problem is ``max_m sum_i Phi_i * Q[i, action_m(x_i)]`` over
trees ``m = (a, b, c, d)`` lying in a box of variable bounds. Only the tree
variables are branched on; the per-state routing and action are resolved in
closed form.

Bounds at a search node:

* upper: drop the requirement that all states share one tree, so each state
  independently takes its best action over the leaves it can still reach.
* lower: build one feasible tree inside the box and evaluate it exactly.

A state whose reachable leaves all force the same action is *determined*;
its contribution is fixed for the node and every descendant.

Thresholds are kept on a finite grid: with the strict ``x < b`` test, a
threshold anywhere in ``(v, w]`` for consecutive observed values ``v < w``
routes the data exactly like ``b = w``.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .tree import Epsilons, TreePolicy, TreeShape, canonicalize, compute_epsilons, threshold_grid

__all__ = [
    "Box",
    "StageProblem",
    "BbNode",
    "SolveReport",
    "Infeasible",
    "propagate",
    "snap_thresholds",
    "reduce_thresholds",
    "reachable_leaves",
    "predetermine",
    "upper_bound",
    "lower_bound",
    "evaluate_node",
    "solved_exactly",
    "branch",
    "solve",
]

logger = logging.getLogger(__name__)

WIDTH_TOL = 1e-9


class Infeasible(Exception):
    """The box contains no feasible tree."""


@dataclass
class Box:
    """Interval bounds on every tree variable; arrays mirror :class:`TreePolicy`."""

    depth: int
    d_lo: np.ndarray
    d_hi: np.ndarray
    a_lo: np.ndarray
    a_hi: np.ndarray
    b_lo: np.ndarray
    b_hi: np.ndarray
    c_lo: np.ndarray
    c_hi: np.ndarray

    @classmethod
    def full(cls, depth: int, n_features: int, n_actions: int) -> "Box":
        shape = TreeShape(depth)
        nb, nl = shape.n_branch, shape.n_leaves
        return cls(
            depth,
            np.zeros(nb, bool),
            np.ones(nb, bool),
            np.zeros((nb, n_features), bool),
            np.ones((nb, n_features), bool),
            np.zeros(nb),
            np.ones(nb),
            np.zeros((nl, n_actions), bool),
            np.ones((nl, n_actions), bool),
        )

    @classmethod
    def point(cls, tree: TreePolicy) -> "Box":
        d, a, c = tree.d.astype(bool), tree.a.astype(bool), tree.c.astype(bool)
        return cls(tree.depth, d.copy(), d.copy(), a.copy(), a.copy(),
                   tree.b.copy(), tree.b.copy(), c.copy(), c.copy())

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.depth)

    def copy(self) -> "Box":
        return Box(self.depth, self.d_lo.copy(), self.d_hi.copy(), self.a_lo.copy(), self.a_hi.copy(),
                   self.b_lo.copy(), self.b_hi.copy(), self.c_lo.copy(), self.c_hi.copy())

    def contains(self, tree: TreePolicy, atol: float = 0.0) -> bool:
        d, a, c = tree.d.astype(bool), tree.a.astype(bool), tree.c.astype(bool)
        return bool(
            np.all(self.d_lo <= d) and np.all(d <= self.d_hi)
            and np.all(self.a_lo <= a) and np.all(a <= self.a_hi)
            and np.all(self.c_lo <= c) and np.all(c <= self.c_hi)
            and np.all(self.b_lo - atol <= tree.b) and np.all(tree.b <= self.b_hi + atol)
        )

    def is_point(self) -> bool:
        return bool(
            np.array_equal(self.d_lo, self.d_hi) and np.array_equal(self.a_lo, self.a_hi)
            and np.array_equal(self.c_lo, self.c_hi) and np.all(self.b_hi - self.b_lo <= 0)
        )

    def to_tree(self) -> TreePolicy:
        if not self.is_point():
            raise ValueError("box is not a single tree")
        return TreePolicy(self.depth, self.a_lo, self.b_lo, self.d_lo, self.c_lo)


def _levels(depth: int) -> list[np.ndarray]:
    """0-based branch rows grouped by tree level."""
    return [np.arange(2**lv - 1, 2 ** (lv + 1) - 1) for lv in range(max(depth, 0))]


def propagate(box: Box) -> Box | None:
    """Tighten ``box`` to a fixed point of the tree constraints.

    Returns a new box, or ``None`` when the box holds no feasible tree.
    """
    box = box.copy()
    if (box.a_lo > box.a_hi).any() or (box.c_lo > box.c_hi).any() or (box.b_lo > box.b_hi).any():
        return None
    # one action per leaf
    n_lo = box.c_lo.sum(axis=1)
    if n_lo.max() > 1 or not box.c_hi.any(axis=1).all():
        return None
    forced = n_lo == 1
    box.c_hi[forced] = box.c_lo[forced]
    single = box.c_hi.sum(axis=1) == 1
    box.c_lo[single] = box.c_hi[single]
    if len(box.d_lo) == 0:
        return box
    if box.b_hi.min() < 0 or box.b_lo.max() > 1:
        return None
    np.maximum(box.b_lo, 0.0, out=box.b_lo)
    np.minimum(box.b_hi, 1.0, out=box.b_hi)
    levels = _LEVELS.get(box.depth)
    if levels is None:
        levels = _LEVELS[box.depth] = _levels(box.depth)
    while True:
        d_lo, d_hi = box.d_lo.copy(), box.d_hi.copy()
        a_lo_n = box.a_lo.sum(axis=1)
        if a_lo_n.max() > 1:
            return None
        has_a = a_lo_n == 1
        box.a_hi[has_a] = box.a_lo[has_a]
        # a selected feature or a positive threshold needs a split
        box.d_lo |= has_a | (box.b_lo > 0)
        # a split needs a selectable feature
        box.d_hi &= box.a_hi.any(axis=1)
        # d_child <= d_parent, in both directions across all levels
        for rows in reversed(levels[:-1]):
            box.d_lo[rows] |= box.d_lo[2 * rows + 1] | box.d_lo[2 * rows + 2]
        for rows in levels[:-1]:
            box.d_hi[2 * rows + 1] &= box.d_hi[rows]
            box.d_hi[2 * rows + 2] &= box.d_hi[rows]
        if (box.d_lo & ~box.d_hi).any():
            return None
        off = ~box.d_hi
        box.a_hi[off] = False
        box.b_hi[off] = 0.0
        one = box.d_lo & (box.a_hi.sum(axis=1) == 1)
        box.a_lo[one] = box.a_hi[one]
        if np.array_equal(d_lo, box.d_lo) and np.array_equal(d_hi, box.d_hi) and not (one & ~has_a).any():
            break
    if (box.b_lo > box.b_hi).any():
        return None
    return box


_LEVELS: dict[int, list] = {}


def _ceil(grid: np.ndarray, values):
    idx = np.searchsorted(grid, np.asarray(values) - 1e-12, side="left")
    return grid[np.minimum(idx, len(grid) - 1)]


def snap_thresholds(box: Box, grid: np.ndarray) -> Box | None:
    """Round threshold bounds up onto ``grid`` (see :func:`~spotree.tree.threshold_grid`).

    Every threshold in the original interval routes the data exactly like
    some grid point in the snapped one and vice versa, so the optimum over
    the box is unchanged while the search space becomes finite.
    """
    box = box.copy()
    box.b_lo = _ceil(grid, box.b_lo)
    box.b_hi = _ceil(grid, box.b_hi)
    if (box.b_lo > box.b_hi).any():
        return None
    return box


@dataclass(frozen=True, eq=False)
class StageProblem:
    """``max over trees of sum_i weights[i] * q[i, action(x_i)]``."""

    weights: np.ndarray
    q: np.ndarray
    features: np.ndarray
    depth: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        q = np.asarray(self.q, dtype=float)
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        if w.ndim != 1 or q.shape[0] != len(w) or X.shape[0] != len(w):
            raise ValueError("weights, q and features must agree on the number of states")
        if (w <= 0).any():
            raise ValueError("state weights must be strictly positive")
        if not np.all(np.isfinite(q)):
            raise ValueError("q must be finite")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "features", X)

    @classmethod
    def from_mdp(cls, mdp, q, weights=None, depth: int = 2) -> "StageProblem":
        w = np.ones(mdp.n_states) if weights is None else weights
        return cls(w, q, mdp.features, depth)

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.depth)

    @property
    def n_states(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_actions(self) -> int:
        return self.q.shape[1]

    @cached_property
    def wq(self) -> np.ndarray:
        return self.weights[:, None] * self.q

    @cached_property
    def grid(self) -> np.ndarray:
        return threshold_grid(self.features)

    def feature_grid(self, j: int) -> np.ndarray:
        return self._feature_grids[j]

    @cached_property
    def _feature_grids(self) -> list[np.ndarray]:
        return [threshold_grid(self.features[:, j]) for j in range(self.n_features)]

    @cached_property
    def epsilons(self) -> Epsilons:
        return compute_epsilons(self.features)

    def full_box(self) -> Box:
        return Box.full(self.depth, self.n_features, self.n_actions)

    def contributions(self, tree: TreePolicy) -> np.ndarray:
        c = _Compact.from_tree(tree)
        acts = c.acts[_leaf_rows(c, self.features)]
        return self.wq[np.arange(self.n_states), acts]

    def objective(self, tree: TreePolicy) -> float:
        return float(self.contributions(tree).sum())


class _Compact(NamedTuple):
    """Tree as split feature per branch row (-1: no split), thresholds, leaf actions."""

    feat: np.ndarray
    b: np.ndarray
    acts: np.ndarray

    @classmethod
    def from_tree(cls, tree: TreePolicy) -> "_Compact":
        return cls(np.asarray(tree.split_feature), np.where(tree.d == 1, tree.b, 0.0), np.asarray(tree.leaf_action))

    def to_tree(self, depth: int, n_features: int, n_actions: int) -> TreePolicy:
        return TreePolicy.from_splits(depth, self.feat, self.b, self.acts, n_features, n_actions)

    def inside(self, box: Box) -> bool:
        split = self.feat >= 0
        rows = np.flatnonzero(split)
        if (box.d_hi[rows] == 0).any() or (box.d_lo[~split]).any():
            return False
        if not np.all(box.a_hi[rows, self.feat[rows]]):
            return False
        lo_set = box.a_lo.any(axis=1)
        if (lo_set & ~split).any() or (lo_set[rows] & ~box.a_lo[rows, self.feat[rows]]).any():
            return False
        if (self.b < box.b_lo).any() or (self.b > box.b_hi).any():
            return False
        leaves = np.arange(len(self.acts))
        return bool(np.all(box.c_hi[leaves, self.acts]) and not (box.c_lo.any(axis=1) & ~box.c_lo[leaves, self.acts]).any())


def _leaf_rows(tree: _Compact, X: np.ndarray) -> np.ndarray:
    """0-based leaf row reached by every row of ``X``."""
    depth = int(np.log2(len(tree.acts)))
    t = np.zeros(len(X), dtype=np.int64)  # 0-based heap row
    rows = np.arange(len(X))
    for _ in range(depth):
        j = tree.feat[t]
        left = (j >= 0) & (X[rows, np.maximum(j, 0)] < tree.b[t])
        t = 2 * t + np.where(left, 1, 2)
    return t - (len(tree.acts) - 1)


@dataclass
class BbNode:
    box: Box
    lower: float = -np.inf
    upper: float = np.inf
    best: _Compact | None = None  # tree achieving ``lower``
    reach: np.ndarray | None = None  # (S, n_leaves) leaves each state may reach
    node_reach: np.ndarray | None = None  # (S, n_branch) branch nodes each state may visit
    options: np.ndarray | None = None  # (S, n_branch) number of routing options
    determined: np.ndarray | None = None  # (S,) fixed action or -1
    id: int = 0
    level: int = 0
    branched: str | None = None

    @property
    def tree(self) -> TreePolicy | None:
        if self.best is None:
            return None
        return self.best.to_tree(self.box.depth, self.box.a_hi.shape[1], self.box.c_hi.shape[1])


def _routing(box: Box, X: np.ndarray):
    """Per-state reachable leaves, visited branch nodes and option counts."""
    shape = box.shape
    S = len(X)
    nb = shape.n_branch
    visit = np.zeros((S, shape.n_nodes + 1), bool)
    visit[:, 1] = True
    options = np.zeros((S, nb), np.int8)
    no = np.zeros(S, bool)
    for t in range(1, nb + 1):
        r = t - 1
        here = visit[:, t]
        if box.d_hi[r]:
            xs = X[:, box.a_hi[r]]
            left = (xs < box.b_hi[r]).any(axis=1)
            right = (xs >= box.b_lo[r]).any(axis=1)
        else:
            left = right = no
        visit[:, 2 * t] |= here & left
        visit[:, 2 * t + 1] |= here & right
        nosplit = not box.d_lo[r]
        if nosplit:
            visit[:, shape.rightmost_leaf(t)] |= here
        options[:, r] = left.view(np.int8) + right.view(np.int8) + nosplit
    return visit[:, nb + 1:], visit[:, 1:nb + 1], options


def reachable_leaves(box: Box, x: np.ndarray):
    """Leaves reachable by some tree in ``box``.

    For a single feature vector returns a frozenset of leaf heap indices; for
    a 2-d array returns the ``(n_rows, n_leaves)`` boolean matrix.
    """
    x = np.asarray(x, dtype=float)
    leaf, _, _ = _routing(box, np.atleast_2d(x))
    if x.ndim == 1:
        offset = box.shape.n_leaves
        return frozenset(int(t) + offset for t in np.flatnonzero(leaf[0]))
    return leaf


def predetermine(node: BbNode, prob: StageProblem) -> np.ndarray:
    """Fix the action of every state whose reachable leaves all force one action.

    Returns per-state action indices, ``-1`` where undetermined. Entries
    already set on ``node.determined`` are kept.
    """
    det = np.full(prob.n_states, -1) if node.determined is None else node.determined.copy()
    und = np.flatnonzero(det < 0)
    if len(und):
        c_lo = node.box.c_lo
        leaf_act = np.where(c_lo.any(axis=1), c_lo.argmax(axis=1), -1)
        reach = node.reach[und]
        hi = np.where(reach, leaf_act, -2).max(axis=1)
        lo = np.where(reach, leaf_act, np.iinfo(np.int64).max).min(axis=1)
        hit = (hi == lo) & (lo >= 0)
        det[und[hit]] = lo[hit]
    node.determined = det
    return det


def _per_state_upper(node: BbNode, prob: StageProblem) -> np.ndarray:
    det = node.determined
    vals = np.empty(prob.n_states)
    fixed = det >= 0
    vals[fixed] = prob.wq[fixed, det[fixed]]
    und = ~fixed
    if und.any():
        wq = prob.wq[und]
        leaf_best = np.where(node.box.c_hi[None, :, :], wq[:, None, :], -np.inf).max(axis=2)
        best = np.where(node.reach[und], leaf_best, -np.inf).max(axis=1)
        if (best == -np.inf).any():
            raise Infeasible("a state has no reachable leaf with an allowed action")
        vals[und] = best
    return vals


def upper_bound(node: BbNode, prob: StageProblem) -> float:
    """Sum over states of the best value each state can reach on its own."""
    return float(_per_state_upper(node, prob).sum())


def _heuristic(box: Box, prob: StageProblem) -> _Compact:
    nb = box.shape.n_branch
    feat = np.full(nb, -1)
    b = np.zeros(nb)
    for r in np.flatnonzero(box.d_hi):
        j = int(np.argmax(box.a_hi[r]))
        feat[r] = j
        mid = 0.5 * (box.b_lo[r] + box.b_hi[r])
        b[r] = mid
        # any threshold routes like the grid point just above it
        for grid in (prob.feature_grid(j), prob.grid):
            g = grid[min(np.searchsorted(grid, mid - 1e-12), len(grid) - 1)]
            if box.b_lo[r] <= g <= box.b_hi[r]:
                b[r] = g
                break
    nl = box.shape.n_leaves
    leaves = _leaf_rows(_Compact(feat, b, np.zeros(nl, np.int64)), prob.features)
    onehot = np.zeros((prob.n_states, nl))
    onehot[np.arange(prob.n_states), leaves] = 1.0
    totals = np.where(box.c_hi, onehot.T @ prob.wq, -np.inf)
    return _Compact(feat, b, totals.argmax(axis=1)), float(totals.max(axis=1).sum())


class _Lookahead:
    """Best value of an unconstrained depth-``k`` subtree for a set of states, memoized."""

    def __init__(self, prob: StageProblem):
        self.prob = prob
        self.memo: dict = {}

    def splits(self, idx: np.ndarray, j: int, cand: np.ndarray):
        """Left-side sums and left counts for thresholds ``cand`` on feature ``j``."""
        wq = self.prob.wq
        vals = self.prob.features[idx, j]
        order = np.argsort(vals, kind="stable")
        cums = np.vstack([np.zeros(wq.shape[1]), np.cumsum(wq[idx[order]], axis=0)])
        n_left = np.searchsorted(vals[order], cand, side="left")
        return cums[n_left], n_left, idx[order]

    def value(self, idx: np.ndarray, k: int) -> float:
        wq = self.prob.wq[idx]
        total = wq.sum(axis=0)
        best = float(total.max())
        if k == 0 or len(idx) < 2:
            return best
        ceiling = float(wq.max(axis=1).sum())
        key = (idx.tobytes(), k)
        if key in self.memo:
            return self.memo[key]
        for j in range(self.prob.n_features):
            cand = np.unique(self.prob.features[idx, j])[1:]
            if not len(cand):
                continue
            left, n_left, ordered = self.splits(idx, j, cand)
            if k == 1:
                best = max(best, float((left.max(axis=1) + (total - left).max(axis=1)).max()))
            else:
                for n in n_left:
                    lo, hi = np.sort(ordered[:n]), np.sort(ordered[n:])
                    best = max(best, self.value(lo, k - 1) + self.value(hi, k - 1))
                    if best >= ceiling - 1e-12 * (1 + abs(ceiling)):
                        break
            if best >= ceiling - 1e-12 * (1 + abs(ceiling)):
                break
        self.memo[key] = best
        return best


def _greedy(box: Box, prob: StageProblem, lookahead: int = 2) -> tuple[_Compact, float]:
    """Top-down tree inside ``box``.

    Each node takes the allowed split (or no split) whose sides score best,
    scoring a side by the best unconstrained subtree of depth up to
    ``lookahead`` below it.
    """
    nb, nl = box.shape.n_branch, box.shape.n_leaves
    X, wq = prob.features, prob.wq
    look = _Lookahead(prob)
    depth_of = np.floor(np.log2(np.arange(1, nb + 1))).astype(int)
    feat = np.full(nb, -1)
    b = np.zeros(nb)
    members = [None] * (nb + nl)
    members[0] = np.arange(prob.n_states)
    may_split = box.d_hi.copy()
    for r in range(nb):
        idx = members[r]
        k = min(lookahead, box.depth - depth_of[r] - 1)
        best = (-np.inf, 0, -1, 0.0)
        if not box.d_lo[r]:
            best = (float(wq[idx].sum(axis=0).max()), 0, -1, 0.0)
        if may_split[r] and len(idx):
            total = wq[idx].sum(axis=0)
            for j in np.flatnonzero(box.a_hi[r]):
                grid = prob.feature_grid(j)
                cand = np.union1d(grid[(grid >= box.b_lo[r]) & (grid <= box.b_hi[r])], [box.b_lo[r]])
                left, n_left, ordered = look.splits(idx, j, cand)
                both = (n_left > 0) & (n_left < len(idx))
                if k == 0:
                    score = left.max(axis=1) + (total - left).max(axis=1)
                else:
                    score = [look.value(np.sort(ordered[:n]), k) + look.value(np.sort(ordered[n:]), k) for n in n_left]
                for t in range(len(cand)):
                    key = (score[t], int(both[t]))
                    if key > best[:2]:
                        best = (score[t], int(both[t]), j, cand[t])
        elif box.d_lo[r]:
            j = int(np.argmax(box.a_hi[r]))
            best = (0.0, 0, j, box.b_lo[r])
        _, _, j, thr = best
        if j < 0:
            # no split here rules out splits below (4g)
            for child in (2 * r + 1, 2 * r + 2):
                if child < nb:
                    may_split[child] = False
            members[2 * r + 1] = idx[:0]
            members[2 * r + 2] = idx
        else:
            feat[r], b[r] = j, thr
            go_left = X[idx, j] < thr
            members[2 * r + 1] = idx[go_left]
            members[2 * r + 2] = idx[~go_left]
    totals = np.array([wq[members[nb + t]].sum(axis=0) for t in range(nl)]).reshape(nl, -1)
    totals = np.where(box.c_hi, totals, -np.inf)
    return _Compact(feat, b, totals.argmax(axis=1)), float(totals.max(axis=1).sum())


def _value(tree: _Compact, prob: StageProblem) -> float:
    acts = tree.acts[_leaf_rows(tree, prob.features)]
    return float(prob.wq[np.arange(prob.n_states), acts].sum())


def _lower(node: BbNode, prob: StageProblem, hint) -> tuple[float, _Compact]:
    """``hint`` is ``None`` or ``(tree, value)`` with the tree's exact objective."""
    box = node.box
    if (box.d_lo & ~box.d_hi).any() or (box.d_hi & ~box.a_hi.any(axis=1)).any() or not box.c_hi.any(axis=1).all():
        raise Infeasible("contradictory binary bounds")
    tree, value = _heuristic(box, prob)
    if hint is not None and hint[1] > value and hint[0].inside(box):
        tree, value = hint
    return value, tree


def lower_bound(node: BbNode, prob: StageProblem, hint: TreePolicy | None = None) -> tuple[float, TreePolicy]:
    """Objective of a feasible tree inside the box, and that tree.

    Splits wherever allowed, picks the lowest selectable feature and the
    interval midpoint, then gives each leaf its best allowed action for the
    states routed there. If ``hint`` lies in the box and scores higher it is
    returned instead.
    """
    if hint is not None:
        hint = _Compact.from_tree(hint)
        hint = (hint, _value(hint, prob))
    value, tree = _lower(node, prob, hint)
    return value, tree.to_tree(prob.depth, prob.n_features, prob.n_actions)


def evaluate_node(node: BbNode, prob: StageProblem, hint: TreePolicy | _Compact | None = None) -> bool:
    """Fill in reachability, determined states and both bounds.

    Returns ``False`` when the node is infeasible.
    """
    if isinstance(hint, TreePolicy):
        hint = _Compact.from_tree(hint)
    if isinstance(hint, _Compact):
        hint = (hint, _value(hint, prob))
    node.reach, node.node_reach, node.options = _routing(node.box, prob.features)
    if not node.reach.any(axis=1).all():
        return False
    predetermine(node, prob)
    try:
        node.upper = upper_bound(node, prob)
        node.lower, node.best = _lower(node, prob, hint)
    except Infeasible:
        return False
    return True


def reduce_thresholds(box: Box, prob: StageProblem) -> Box:
    """Snap threshold bounds onto the grid of the node's selected feature.

    Once a node's feature ``j`` is fixed only the values of ``x_j`` matter, so
    ``[lo, hi]`` is replaced by the routing-equivalent ``[ceil_j(lo), ceil_j(hi)]``.
    """
    fixed = np.flatnonzero(box.a_lo.any(axis=1))
    if not len(fixed):
        return box
    box = box.copy()
    for r in fixed:
        g = prob.feature_grid(int(np.argmax(box.a_lo[r])))
        box.b_lo[r], box.b_hi[r] = _ceil(g, (box.b_lo[r], box.b_hi[r]))
    return box


def solved_exactly(node: BbNode) -> bool:
    """True when the node's lower-bound tree is optimal over its box.

    That holds once every undetermined state has a single reachable leaf:
    the heuristic then gives each leaf its best allowed action for exactly
    the states that must end there.
    """
    und = node.determined < 0
    return bool(np.all(node.reach[und].sum(axis=1) == 1))


def _bisect(lo: float, hi: float, grid: np.ndarray | None) -> tuple[float, float]:
    """Upper end of the left half and lower end of the right half."""
    mid = 0.5 * (lo + hi)
    if grid is None:
        return mid, mid
    inside = grid[(grid >= lo) & (grid <= hi)]
    if len(inside) < 2:
        return mid, mid
    left_hi = inside[inside <= mid].max()
    right_lo = inside[inside > left_hi].min()
    return float(left_hi), float(right_lo)


def branch(node: BbNode, rng: np.random.Generator, prob: StageProblem | None = None) -> tuple[Box, Box]:
    """Split the node's box in two.

    Split flags go first, in ascending node order. Otherwise a coin ``u`` is
    compared with ``tau = 1 - max_width(b) / 2``: ``u > tau`` branches a
    feature selector (or a leaf action once all selectors are fixed), else the
    widest threshold interval is bisected. Only variables that can still
    change the outcome of some undetermined state are considered.

    With ``prob`` given, thresholds are bisected on its grid.
    """
    box = node.box
    und = node.determined < 0 if node.determined is not None else np.ones(len(node.reach), bool)
    visits = node.node_reach[und]
    ambiguous = (visits & (node.options[und] >= 2)).any(axis=0)
    active = visits.any(axis=0)

    d_free = np.flatnonzero(active & (box.d_lo != box.d_hi))
    if len(d_free):
        r = d_free[0]
        zero, one = box.copy(), box.copy()
        zero.d_hi[r] = False
        one.d_lo[r] = True
        node.branched = f"d[{r + 1}]"
        return zero, one

    live = ambiguous & box.d_hi
    widths = np.where(live, box.b_hi - box.b_lo, 0.0)
    width = float(widths.max()) if len(widths) else 0.0
    tau = 1.0 - 0.5 * width
    u = rng.random()
    if width <= WIDTH_TOL:
        order = ("a", "c")
    elif u > tau:
        order = ("a", "c", "b")
    else:
        order = ("b", "a", "c")
    for kind in order:
        if kind == "a":
            free = live[:, None] & box.a_hi & ~box.a_lo & (box.a_hi.sum(axis=1) > 1)[:, None]
            if free.any():
                r, j = np.argwhere(free)[0]
                zero, one = box.copy(), box.copy()
                zero.a_hi[r, j] = False
                one.a_lo[r, j] = True
                node.branched = f"a[{j},{r + 1}]"
                return zero, one
        elif kind == "c":
            free = node.reach[und].any(axis=0)[:, None] & box.c_hi & ~box.c_lo
            if free.any():
                r, k = np.argwhere(free)[0]
                zero, one = box.copy(), box.copy()
                zero.c_hi[r, k] = False
                one.c_lo[r, k] = True
                node.branched = f"c[{k},{r + box.shape.n_leaves}]"
                return zero, one
        elif width > WIDTH_TOL:
            r = int(np.argmax(widths))
            grid = None
            if prob is not None:
                fixed = box.a_lo[r].any()
                grid = prob.feature_grid(int(np.argmax(box.a_lo[r]))) if fixed else prob.grid
            left_hi, right_lo = _bisect(box.b_lo[r], box.b_hi[r], grid)
            left, right = box.copy(), box.copy()
            left.b_hi[r] = left_hi
            right.b_lo[r] = right_lo
            node.branched = f"b[{r + 1}]@{left_hi:.6g}"
            return left, right
    raise RuntimeError("no branching variable left although the node gap is open")


@dataclass
class SolveReport:
    tree: TreePolicy
    objective: float
    upper: float
    gap: float
    nodes: int
    wall_time: float
    termination: str  # "gap", "queue_empty" or "time_limit"
    seed: int | None
    workers: int = 1
    history: list = field(default_factory=list, repr=False)


class _Search:
    """Best-first search state shared by the serial and per-worker loops."""

    def __init__(self, prob, delta, deadline, rng, trace=None, shared=None, check=True):
        self.prob = prob
        self.delta = delta
        self.deadline = deadline
        self.rng = rng
        self.trace = trace
        self.shared = shared
        self.check = check
        self.counter = itertools.count()
        self.open: dict[int, BbNode] = {}
        self.by_lower: list = []
        self.by_upper: list = []
        self.best = -np.inf
        self.best_tree: _Compact | None = None
        self.nodes = 0
        self.history: list[tuple[float, float]] = []

    def incumbent(self) -> float:
        if self.shared is not None:
            other = self.shared.value
            if other > self.best:
                return other
        return self.best

    def offer(self, value: float, tree: _Compact) -> None:
        if value > self.best:
            self.best, self.best_tree = value, tree
            if self.shared is not None:
                with self.shared.get_lock():
                    if value > self.shared.value:
                        self.shared.value = value

    @staticmethod
    def _tol(beta):
        return 1e-12 * (1.0 + abs(beta))

    def push(self, node: BbNode) -> None:
        beta = self.incumbent()
        if node.upper <= beta + self._tol(beta):
            return
        node.id = next(self.counter)
        self.open[node.id] = node
        heapq.heappush(self.by_lower, (-node.lower, node.id))
        heapq.heappush(self.by_upper, (-node.upper, node.id))

    def global_upper(self) -> float:
        beta = self.incumbent()
        while self.by_upper:
            neg, nid = self.by_upper[0]
            if nid in self.open:
                if -neg > beta + self._tol(beta):
                    return -neg
                # dominated by the incumbent
                del self.open[nid]
            heapq.heappop(self.by_upper)
        return beta

    def pop(self) -> BbNode | None:
        while self.by_lower:
            _, nid = heapq.heappop(self.by_lower)
            node = self.open.pop(nid, None)
            if node is None:
                continue
            beta = self.incumbent()
            if node.upper <= beta + self._tol(beta):
                continue
            return node
        return None

    def make_child(self, parent: BbNode, box: Box) -> BbNode | None:
        box = propagate(box)
        if box is None:
            return None
        box = reduce_thresholds(box, self.prob)
        child = BbNode(box, determined=parent.determined.copy(), level=parent.level + 1)
        if not evaluate_node(child, self.prob, hint=(parent.best, parent.lower)):
            return None
        if self.check:
            assert child.upper <= parent.upper + 1e-9 * (1 + abs(parent.upper)), "child upper bound exceeds parent"
        return child

    def run(self, max_open: int | None = None) -> str:
        """Search until the gap closes, the queue empties or time runs out."""
        prev_alpha = np.inf
        prev_beta = -np.inf
        while True:
            alpha = self.global_upper()
            beta = self.incumbent()
            if self.check:
                scale = 1e-9 * (1.0 + abs(alpha))
                assert beta >= prev_beta - scale, "global lower bound decreased"
                # a worker only sees its share of the open nodes
                if self.shared is None:
                    assert alpha <= prev_alpha + scale, "global upper bound increased"
                    assert beta <= alpha + scale, "lower bound above upper bound"
            prev_alpha, prev_beta = alpha, beta
            self.history.append((beta, alpha))
            if not self.open:
                return "queue_empty"
            if alpha - beta <= self.delta:
                return "gap"
            if self.deadline is not None and time.monotonic() >= self.deadline:
                return "time_limit"
            if max_open is not None and len(self.open) >= max_open:
                return "ramp_up"
            node = self.pop()
            if node is None:
                continue
            self.nodes += 1
            children = branch(node, self.rng, self.prob)
            for box in children:
                child = self.make_child(node, box)
                if child is None:
                    continue
                self.offer(child.lower, child.best)
                if not solved_exactly(child):
                    self.push(child)
            if self.trace is not None:
                self.trace({
                    "node": node.id, "depth": node.level, "beta": node.lower, "alpha": node.upper,
                    "branched": node.branched, "global_beta": self.incumbent(), "global_alpha": self.global_upper(),
                })


def _worker(prob, nodes, best, best_tree, shared, delta, deadline, seed, wid, out):
    search = _Search(prob, delta, deadline, np.random.default_rng([seed, wid + 1]), shared=shared)
    search.best, search.best_tree = best, best_tree
    for node in nodes:
        search.push(node)
    reason = search.run()
    out.put((wid, search.best, search.best_tree, search.global_upper(), search.nodes, reason))


def solve(
    prob: StageProblem,
    box0: Box | None = None,
    delta: float = 1e-6,
    time_limit: float | None = None,
    workers: int = 1,
    seed: int | None = 0,
    trace=None,
    incumbent: TreePolicy | None = None,
) -> SolveReport:
    """Maximise the stage objective over the trees in ``box0``.

    Stops once the global gap is at most ``delta``, the open queue is empty
    or ``time_limit`` seconds have passed; the returned tree is always
    feasible. ``trace`` may be a callable receiving one dict per processed
    node, or a path / writable file receiving JSON lines. ``incumbent`` is
    an optional known-feasible tree that seeds the lower bound when it lies
    in the box.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    start = time.monotonic()
    deadline = None if time_limit is None else start + time_limit
    box0 = prob.full_box() if box0 is None else box0
    if box0.depth != prob.depth:
        raise ValueError("box depth does not match the problem depth")
    root_box = propagate(box0)
    root_box = None if root_box is None else snap_thresholds(root_box, prob.grid)
    root_box = None if root_box is None else propagate(root_box)
    if root_box is None:
        raise Infeasible("the initial box holds no feasible tree")
    root_box = reduce_thresholds(root_box, prob)

    sink, close = _trace_sink(trace)
    rng = np.random.default_rng(seed)
    search = _Search(prob, delta, deadline, rng, trace=sink)
    root = BbNode(root_box, determined=np.full(prob.n_states, -1))
    hint = _greedy(root_box, prob)
    if incumbent is not None:
        inc = _Compact.from_tree(canonicalize(incumbent, prob.features))
        inc = (inc, _value(inc, prob))
        hint = max(hint, inc, key=lambda h: h[1])
    if not evaluate_node(root, prob, hint=hint):
        raise Infeasible("the initial box holds no feasible tree")
    search.offer(root.lower, root.best)
    if not solved_exactly(root):
        search.push(root)

    try:
        if workers <= 1:
            reason = search.run()
            best, tree, alpha, nodes = search.best, search.best_tree, search.global_upper(), search.nodes
        else:
            best, tree, alpha, nodes, reason = _solve_parallel(search, workers, seed, deadline)
    finally:
        if close:
            sink.close()

    tree = tree.to_tree(prob.depth, prob.n_features, prob.n_actions)
    objective = prob.objective(tree)
    assert abs(objective - best) <= 1e-9 * (1 + abs(best)), "incumbent value does not re-evaluate"
    alpha = max(alpha, objective)
    return SolveReport(
        tree=tree,
        objective=objective,
        upper=alpha,
        gap=alpha - objective,
        nodes=nodes,
        wall_time=time.monotonic() - start,
        termination=reason,
        seed=seed,
        workers=workers,
        history=search.history,
    )


def _solve_parallel(search: _Search, workers: int, seed, deadline):
    """Ramp up serially, then split the open nodes across forked workers."""
    reason = search.run(max_open=4 * workers)
    if reason != "ramp_up":
        return search.best, search.best_tree, search.global_upper(), search.nodes, reason
    ctx = mp.get_context("fork")
    shared = ctx.Value("d", search.best)
    pending = sorted(search.open.values(), key=lambda n: (-n.lower, n.id))
    chunks = [pending[w::workers] for w in range(workers)]
    out = ctx.SimpleQueue()
    procs = [
        ctx.Process(
            target=_worker,
            args=(search.prob, chunk, search.best, search.best_tree, shared, search.delta, deadline,
                  0 if seed is None else seed, w, out),
        )
        for w, chunk in enumerate(chunks)
    ]
    for p in procs:
        p.start()
    results = [out.get() for _ in procs]
    for p in procs:
        p.join()
    best, tree = search.best, search.best_tree
    alpha = best
    nodes = search.nodes
    reasons = set()
    for _, value, wtree, walpha, wnodes, wreason in sorted(results, key=lambda r: r[0]):
        nodes += wnodes
        alpha = max(alpha, walpha)
        reasons.add(wreason)
        if value > best:
            best, tree = value, wtree
    alpha = max(alpha, best)
    if alpha - best <= search.delta:
        reason = "gap"
    elif "time_limit" in reasons:
        reason = "time_limit"
    else:
        reason = "queue_empty"
    return best, tree, alpha, nodes, reason


class _JsonLines:
    def __init__(self, fh, owned):
        self.fh, self.owned = fh, owned

    def __call__(self, record):
        self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.owned:
            self.fh.close()


def _trace_sink(trace):
    if trace is None or callable(trace):
        return trace, False
    if hasattr(trace, "write"):
        return _JsonLines(trace, False), True
    return _JsonLines(open(trace, "w"), True), True
