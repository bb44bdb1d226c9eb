"""Depth-bounded axis-aligned decision-tree policies.

Nodes use 1-based heap numbering: the root is 1, node ``t`` has children
``2t`` and ``2t + 1``. Branch nodes are ``1 .. 2**D - 1``, leaves are
``2**D .. 2**(D+1) - 1``. Array storage is 0-based, so branch node ``t`` lives
at row ``t - 1`` and leaf ``t`` at row ``t - 2**D``.

At a branch node with ``split == 1`` and selected feature ``j`` a state goes
left iff ``x[j] < threshold``; a node that does not split sends every state
right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "TreeShape",
    "TreePolicy",
    "TreeValidationError",
    "Epsilons",
    "compute_epsilons",
    "route",
    "route_all",
    "tree_to_policy",
    "tree_actions",
    "validate",
    "threshold_grid",
    "canonicalize",
    "candidate_thresholds",
    "random_tree",
    "constant_tree",
    "tree_to_json",
    "tree_from_json",
    "tree_to_dot",
]


class TreeValidationError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid tree: " + "; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class TreeShape:
    depth: int

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def n_branch(self) -> int:
        return 2**self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    @property
    def branch_nodes(self) -> range:
        return range(1, self.n_branch + 1)

    @property
    def leaf_nodes(self) -> range:
        return range(self.n_branch + 1, self.n_nodes + 1)

    @staticmethod
    def parent(t: int) -> int:
        return t // 2

    def ancestors(self, t: int) -> tuple[list[int], list[int]]:
        """``(A_L(t), A_R(t))``: ancestors whose left / right branch leads to ``t``."""
        left, right = [], []
        while t > 1:
            p = t // 2
            (left if t % 2 == 0 else right).append(p)
            t = p
        return left[::-1], right[::-1]

    def rightmost_leaf(self, t: int) -> int:
        while t <= self.n_branch:
            t = 2 * t + 1
        return t


@dataclass(frozen=True, eq=False)
class TreePolicy:
    """Concrete tree in MILP form.

    ``a``: (n_branch, F) 0/1 feature selection, ``b``: (n_branch,) thresholds,
    ``d``: (n_branch,) split flags, ``c``: (n_leaves, A) 0/1 leaf actions.
    """

    depth: int
    a: np.ndarray
    b: np.ndarray
    d: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for key, dtype in (("a", np.int8), ("b", float), ("d", np.int8), ("c", np.int8)):
            arr = np.array(getattr(self, key), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        shape = self.shape
        if self.a.ndim != 2 or self.a.shape[0] != shape.n_branch:
            raise ValueError(f"a must have {shape.n_branch} rows")
        if self.b.shape != (shape.n_branch,) or self.d.shape != (shape.n_branch,):
            raise ValueError(f"b and d must have length {shape.n_branch}")
        if self.c.ndim != 2 or self.c.shape[0] != shape.n_leaves:
            raise ValueError(f"c must have {shape.n_leaves} rows")

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.depth)

    @property
    def n_features(self) -> int:
        return self.a.shape[1]

    @property
    def n_actions(self) -> int:
        return self.c.shape[1]

    @classmethod
    def from_splits(cls, depth, features, thresholds, actions, n_features, n_actions) -> "TreePolicy":
        """Compact constructor.

        ``features[t-1]`` is the feature index at branch node ``t`` or ``-1``
        for a node that does not split; ``actions`` lists one action per leaf.
        """
        shape = TreeShape(depth)
        a = np.zeros((shape.n_branch, n_features), dtype=np.int8)
        d = np.zeros(shape.n_branch, dtype=np.int8)
        b = np.zeros(shape.n_branch)
        for m, (j, thr) in enumerate(zip(features, thresholds)):
            if j is not None and j >= 0:
                a[m, j] = 1
                d[m] = 1
                b[m] = thr
        c = np.zeros((shape.n_leaves, n_actions), dtype=np.int8)
        c[np.arange(shape.n_leaves), np.asarray(actions, dtype=np.int64)] = 1
        return cls(depth, a, b, d, c)

    @cached_property
    def split_feature(self) -> np.ndarray:
        """Selected feature per branch node, ``-1`` where the node does not split."""
        feat = np.where(self.a.any(axis=1), self.a.argmax(axis=1), -1)
        return np.where(self.d == 1, feat, -1)

    @cached_property
    def leaf_action(self) -> np.ndarray:
        return self.c.argmax(axis=1)

    def same_as(self, other: "TreePolicy") -> bool:
        return (
            self.depth == other.depth
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.d, other.d)
            and np.array_equal(self.c, other.c)
        )


def validate(tree: TreePolicy) -> list[str]:
    """All violated structural constraints; an empty list means the tree is valid.

    Checks one action per leaf (4b), one feature iff split (4e),
    ``0 <= b <= d`` (4f), ``d_t <= d_parent`` (4g) and binary domains.
    """
    out = []
    for name in ("a", "c", "d"):
        arr = getattr(tree, name)
        if np.any((arr != 0) & (arr != 1)):
            out.append(f"binary: {name} has non 0/1 entries")
    shape = tree.shape
    for row, t in enumerate(shape.leaf_nodes):
        if tree.c[row].sum() != 1:
            out.append(f"4b: leaf {t} has {int(tree.c[row].sum())} actions")
    for row, t in enumerate(shape.branch_nodes):
        if tree.a[row].sum() != tree.d[row]:
            out.append(f"4e: node {t} selects {int(tree.a[row].sum())} features with split={int(tree.d[row])}")
        if not 0.0 <= tree.b[row] <= tree.d[row]:
            out.append(f"4f: node {t} threshold {tree.b[row]:g} outside [0, {int(tree.d[row])}]")
        if t > 1 and tree.d[row] > tree.d[t // 2 - 1]:
            out.append(f"4g: node {t} splits but its parent {t // 2} does not")
    return out


def _require_valid(tree: TreePolicy) -> None:
    problems = validate(tree)
    if problems:
        raise TreeValidationError(problems)


def route(tree: TreePolicy, x) -> int:
    """Heap index of the leaf reached by feature vector ``x``."""
    _require_valid(tree)
    x = np.asarray(x, dtype=float)
    t = 1
    feat = tree.split_feature
    n_branch = tree.shape.n_branch
    while t <= n_branch:
        j = feat[t - 1]
        t = 2 * t if (j >= 0 and x[j] < tree.b[t - 1]) else 2 * t + 1
    return t


def route_all(tree: TreePolicy, X: np.ndarray, check: bool = True) -> np.ndarray:
    """Leaf heap index for every row of ``X``."""
    if check:
        _require_valid(tree)
    X = np.asarray(X, dtype=float)
    t = np.ones(len(X), dtype=np.int64)
    feat = tree.split_feature
    rows = np.arange(len(X))
    for _ in range(tree.depth):
        j = feat[t - 1]
        xj = X[rows, np.maximum(j, 0)]
        go_left = (j >= 0) & (xj < tree.b[t - 1])
        t = 2 * t + (~go_left)
    return t


def tree_actions(tree: TreePolicy, X: np.ndarray, check: bool = True) -> np.ndarray:
    leaves = route_all(tree, X, check=check)
    return tree.leaf_action[leaves - tree.shape.n_leaves]


def tree_to_policy(tree: TreePolicy, mdp) -> np.ndarray:
    """Deterministic one-hot state policy induced by routing each state."""
    acts = tree_actions(tree, mdp.features)
    mu = np.zeros((mdp.n_states, tree.n_actions))
    mu[np.arange(mdp.n_states), acts] = 1.0
    return mu


@dataclass(frozen=True)
class Epsilons:
    eps: np.ndarray
    eps_min: float
    eps_max: float


def compute_epsilons(features: np.ndarray) -> Epsilons:
    """Smallest positive gap between sorted distinct values, per feature.

    Constant features get a gap of 1.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    eps = np.ones(X.shape[1])
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        if len(vals) > 1:
            eps[j] = np.diff(vals).min()
    return Epsilons(eps, float(eps.min()), float(eps.max()))


def threshold_grid(features: np.ndarray) -> np.ndarray:
    """Sorted thresholds that realise every distinct routing of the data.

    With the strict ``x < b`` test every ``b`` in ``(v_k, v_{k+1}]`` routes
    identically, for every feature, whenever ``v_k < v_{k+1}`` are consecutive
    points of this grid. So a threshold can always be replaced by the
    smallest grid point at or above it.
    """
    vals = np.unique(np.concatenate([np.asarray(features, dtype=float).ravel(), [0.0, 1.0]]))
    return vals


def canonicalize(tree: TreePolicy, features: np.ndarray) -> TreePolicy:
    """Snap each split threshold up onto the observed values of its feature.

    Routing of every row of ``features`` is unchanged.
    """
    X = np.atleast_2d(features)
    b = tree.b.copy()
    for r, j in enumerate(tree.split_feature):
        if j >= 0:
            g = threshold_grid(X[:, j])
            b[r] = g[min(np.searchsorted(g, b[r] - 1e-12), len(g) - 1)]
    return TreePolicy(tree.depth, tree.a, b, tree.d, tree.c)


def candidate_thresholds(values: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct values of one feature."""
    v = np.unique(values)
    return (v[:-1] + v[1:]) / 2.0


def random_tree(depth: int, features: np.ndarray, n_actions: int, rng: np.random.Generator) -> TreePolicy:
    """Fully split tree with thresholds drawn from each feature's observed values."""
    X = np.atleast_2d(features)
    shape = TreeShape(depth)
    feats, thrs = [], []
    for _ in shape.branch_nodes:
        j = int(rng.integers(X.shape[1]))
        feats.append(j)
        thrs.append(float(rng.choice(np.unique(X[:, j]))))
    actions = rng.integers(n_actions, size=shape.n_leaves)
    return TreePolicy.from_splits(depth, feats, thrs, actions, X.shape[1], n_actions)


def constant_tree(depth: int, n_features: int, n_actions: int, action: int = 0) -> TreePolicy:
    shape = TreeShape(depth)
    return TreePolicy.from_splits(
        depth, [-1] * shape.n_branch, [0.0] * shape.n_branch, [action] * shape.n_leaves, n_features, n_actions
    )


def tree_to_json(tree: TreePolicy) -> dict:
    shape = tree.shape
    nodes = []
    for row, t in enumerate(shape.branch_nodes):
        j = int(tree.split_feature[row])
        node = {"id": t, "kind": "branch", "split": bool(tree.d[row])}
        if j >= 0:
            node["feature"] = j
            node["threshold"] = float(tree.b[row])
        nodes.append(node)
    for row, t in enumerate(shape.leaf_nodes):
        nodes.append({"id": t, "kind": "leaf", "action": int(tree.leaf_action[row])})
    return {"depth": tree.depth, "n_features": tree.n_features, "n_actions": tree.n_actions, "nodes": nodes}


def tree_from_json(doc: dict | str, n_features: int | None = None, n_actions: int | None = None) -> TreePolicy:
    """Inverse of :func:`tree_to_json`; ``doc`` may be a dict or JSON text."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    depth = int(doc["depth"])
    shape = TreeShape(depth)
    for key, want in (("n_features", n_features), ("n_actions", n_actions)):
        if want is not None and doc.get(key) is not None and int(doc[key]) != want:
            raise ValueError(f"tree has {key}={doc[key]}, expected {want}")
    n_features = n_features if n_features is not None else doc.get("n_features")
    n_actions = n_actions if n_actions is not None else doc.get("n_actions")
    if n_features is None or n_actions is None:
        raise ValueError("tree document lacks n_features/n_actions")
    feats = [-1] * shape.n_branch
    thrs = [0.0] * shape.n_branch
    actions = [None] * shape.n_leaves
    seen = set()
    for node in doc["nodes"]:
        t = int(node["id"])
        seen.add(t)
        if node["kind"] == "branch":
            if t not in shape.branch_nodes:
                raise ValueError(f"node {t} is not a branch node at depth {depth}")
            if node.get("split", "feature" in node):
                feats[t - 1] = int(node["feature"])
                thrs[t - 1] = float(node["threshold"])
        elif node["kind"] == "leaf":
            if t not in shape.leaf_nodes:
                raise ValueError(f"node {t} is not a leaf at depth {depth}")
            actions[t - shape.n_leaves] = int(node["action"])
        else:
            raise ValueError(f"unknown node kind {node['kind']!r}")
    if seen != set(range(1, shape.n_nodes + 1)):
        raise ValueError("tree document must list every node exactly once")
    return TreePolicy.from_splits(depth, feats, thrs, actions, n_features, n_actions)


def tree_to_dot(tree: TreePolicy, feature_names=None, action_names=None) -> str:
    """Graphviz source; branch labels read ``x[j] < b``, edges True/False."""
    shape = tree.shape
    lines = ["digraph tree {", "  node [fontname=helvetica];"]
    fname = (lambda j: str(feature_names[j])) if feature_names else (lambda j: f"x[{j}]")
    aname = (lambda k: str(action_names[k])) if action_names else (lambda k: f"action {k}")
    for row, t in enumerate(shape.branch_nodes):
        j = tree.split_feature[row]
        label = f"{fname(j)} < {tree.b[row]:.6g}" if j >= 0 else "no split"
        lines.append(f'  n{t} [shape=box, label="{label}"];')
        lines.append(f'  n{t} -> n{2 * t} [label="True"];')
        lines.append(f'  n{t} -> n{2 * t + 1} [label="False"];')
    for row, t in enumerate(shape.leaf_nodes):
        lines.append(f'  n{t} [shape=ellipse, label="{aname(tree.leaf_action[row])}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
