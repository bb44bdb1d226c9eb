import json

import numpy as np
import pytest

from oracles import (
    best_tree_value,
    enumerate_box,
    enumerate_small,
    random_box,
    random_instance,
    route_leaf,
    sample_tree,
)
from spotree.envs import frozen_lake, random_mdp
from spotree.mdp import q_backup, value_iteration
from spotree.rsbb import (
    BbNode,
    Box,
    Infeasible,
    StageProblem,
    branch,
    evaluate_node,
    lower_bound,
    predetermine,
    propagate,
    reachable_leaves,
    solve,
    upper_bound,
)
from spotree.tree import TreePolicy, random_tree, route


def problem(mdp, depth, weights=None, v=None):
    v = np.zeros(mdp.n_states) if v is None else v
    w = np.ones(mdp.n_states) if weights is None else weights
    return StageProblem(w, q_backup(mdp, v), mdp.features, depth)


def node_for(box, prob):
    node = BbNode(box, determined=np.full(prob.n_states, -1))
    assert evaluate_node(node, prob)
    return node


def lake_problem(depth):
    mdp = frozen_lake()
    return problem(mdp, depth, v=value_iteration(mdp))


# ---------------------------------------------------------------- reachability


def test_point_box_reaches_only_the_routed_leaf():
    rng = np.random.default_rng(0)
    X = rng.random((30, 3))
    for _ in range(20):
        tree = random_tree(int(rng.integers(0, 4)), X, 3, rng)
        box = Box.point(tree)
        for x in X[:5]:
            assert reachable_leaves(box, x) == {route(tree, x)}


def test_full_box_reaches_every_leaf():
    box = Box.full(3, 2, 2)
    assert reachable_leaves(box, [0.3, 0.7]) == frozenset(range(8, 16))


def test_d1_interval_example_against_threshold_grid():
    box = Box.full(1, 2, 2)
    box.a_lo[0] = box.a_hi[0] = [True, False]
    box.d_lo[0] = True
    box.b_lo[0], box.b_hi[0] = 0.2, 0.6
    x = np.array([0.8, 0.1])
    got = reachable_leaves(box, x)
    expected = {route(TreePolicy.from_splits(1, [0], [b], [0, 1], 2, 2), x) for b in np.linspace(0.2, 0.6, 100)}
    assert got == expected == {3}


def test_reachability_covers_sampled_trees():
    rng = np.random.default_rng(1)
    mdp = random_mdp(12, 3, 2, rng)
    prob = problem(mdp, 2)
    for _ in range(100):
        box = random_box(prob, rng)
        if box is None:
            continue
        reach = reachable_leaves(box, prob.features)
        for _ in range(10):
            tree = sample_tree(box, rng, prob.grid)
            if tree is None:
                continue
            leaves = route_leaf(tree, prob.features)
            assert reach[np.arange(prob.n_states), leaves - 4].all()


# ---------------------------------------------------------------- bounds


def test_point_box_bounds_are_tight():
    rng = np.random.default_rng(2)
    prob = lake_problem(2)
    for _ in range(10):
        tree = random_tree(2, prob.features, 4, rng)
        node = node_for(Box.point(tree), prob)
        assert node.upper == pytest.approx(prob.objective(tree), abs=1e-12)
        assert node.lower == pytest.approx(prob.objective(tree), abs=1e-12)


def test_full_box_upper_is_unrestricted_bound():
    prob = lake_problem(2)
    node = node_for(prob.full_box(), prob)
    assert upper_bound(node, prob) == pytest.approx(prob.wq.max(axis=1).sum())


def test_full_box_depth_zero_lower_is_best_constant_action():
    prob = lake_problem(0)
    node = BbNode(prob.full_box(), determined=np.full(prob.n_states, -1))
    evaluate_node(node, prob)
    value, tree = lower_bound(node, prob)
    assert value == pytest.approx(prob.wq.sum(axis=0).max())
    assert tree.leaf_action[0] == prob.wq.sum(axis=0).argmax()


def test_upper_bound_dominates_sampled_trees():
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        mdp = random_mdp(int(rng.integers(3, 10)), 3, 2, rng)
        prob = problem(mdp, 2, weights=rng.random(mdp.n_states) + 0.1, v=rng.normal(size=mdp.n_states))
        box = random_box(prob, rng)
        if box is None:
            continue
        node = node_for(box, prob)
        for _ in range(200):
            tree = sample_tree(box, rng, prob.grid)
            if tree is not None:
                assert prob.objective(tree) <= node.upper + 1e-9


def test_lower_bound_below_box_optimum_and_feasible():
    for seed in range(30):
        rng = np.random.default_rng(200 + seed)
        mdp = random_mdp(10, 3, 2, rng)
        prob = problem(mdp, 2, v=rng.normal(size=10))
        box = random_box(prob, rng)
        if box is None:
            continue
        trees = enumerate_box(box, prob.grid)
        if not trees:
            continue
        node = node_for(box, prob)
        value, tree = lower_bound(node, prob)
        assert box.contains(tree)
        assert value == pytest.approx(prob.objective(tree), abs=1e-12)
        assert value <= max(prob.objective(t) for t in trees) + 1e-9


def test_bound_sandwich_against_enumeration():
    checked = 0
    for seed in range(80):
        rng = np.random.default_rng(300 + seed)
        mdp = random_mdp(int(rng.integers(2, 9)), int(rng.integers(2, 4)), 2, rng)
        prob = problem(mdp, int(rng.integers(1, 3)), v=rng.normal(size=mdp.n_states))
        box = random_box(prob, rng)
        if box is None:
            continue
        trees = enumerate_box(box, prob.grid)
        if not trees:
            continue
        node = BbNode(box, determined=np.full(prob.n_states, -1))
        if not evaluate_node(node, prob):
            continue
        best = max(prob.objective(t) for t in trees)
        assert node.lower <= best + 1e-9 <= node.upper + 2e-9
        checked += 1
    assert checked >= 20


# ---------------------------------------------------------------- pre-determination


def test_all_leaves_forced_to_one_action_determines_every_state():
    prob = lake_problem(2)
    box = prob.full_box()
    box.c_lo[:, 2] = True
    box.c_hi[:] = False
    box.c_hi[:, 2] = True
    node = node_for(propagate(box), prob)
    np.testing.assert_array_equal(node.determined, 2)
    assert node.upper == pytest.approx(prob.wq[:, 2].sum())


def test_free_actions_leave_states_undetermined():
    prob = lake_problem(2)
    node = node_for(prob.full_box(), prob)
    assert np.all(node.determined == -1)


def test_two_reachable_leaves_with_same_forced_action():
    # root splits on feature 0 at 0.5; leaves 6 and 7 (right subtree) share action 1
    prob = lake_problem(2)
    box = prob.full_box()
    box.d_lo[0] = True
    box.a_lo[0] = box.a_hi[0] = [True, False]
    box.b_lo[0] = box.b_hi[0] = 0.5
    box.c_lo[2:] = box.c_hi[2:] = [False, True, False, False]
    box = propagate(box)
    node = node_for(box, prob)
    right = prob.features[:, 0] >= 0.5
    assert np.all(node.determined[right] == 1)
    assert np.all(node.determined[~right] == -1)
    for tree in enumerate_box(box, prob.grid, limit=200_000):
        acts = tree.leaf_action[route_leaf(tree, prob.features) - 4]
        assert np.all(acts[right] == 1)


def test_determined_entries_persist():
    prob = lake_problem(1)
    node = BbNode(prob.full_box(), determined=np.full(prob.n_states, -1))
    evaluate_node(node, prob)
    node.determined[0] = 3
    assert predetermine(node, prob)[0] == 3


# ---------------------------------------------------------------- propagation


def test_root_not_split_forces_whole_tree_flat():
    box = Box.full(2, 2, 2)
    box.d_hi[0] = False
    tight = propagate(box)
    assert not tight.d_hi.any() and not tight.a_hi.any() and np.all(tight.b_hi == 0)
    assert reachable_leaves(tight, [0.1, 0.9]) == {7}


def test_two_forced_actions_is_infeasible():
    box = Box.full(1, 2, 3)
    box.c_lo[0, :2] = True
    assert propagate(box) is None


def test_single_remaining_action_is_fixed():
    box = Box.full(1, 2, 3)
    box.c_hi[1, :2] = False
    assert propagate(box).c_lo[1, 2]


def test_split_without_features_is_infeasible():
    box = Box.full(1, 2, 2)
    box.d_lo[0] = True
    box.a_hi[0] = False
    assert propagate(box) is None


def test_forced_child_split_forces_parent():
    box = Box.full(2, 2, 2)
    box.d_lo[2] = True
    assert propagate(box).d_lo[0]


def test_propagation_keeps_exactly_the_feasible_trees():
    rng = np.random.default_rng(4)
    grid = np.array([0.0, 0.5, 1.0])
    universe = _stack(enumerate_box(Box.full(2, 2, 3), grid, limit=10**6))
    for _ in range(300):
        box = Box.full(2, 2, 3)
        for r in range(3):
            u = rng.random()
            box.d_lo[r] = u < 0.2
            box.d_hi[r] = u < 0.8
            box.a_hi[r] = rng.random(2) < 0.8
            box.a_lo[r] = box.a_hi[r] & (rng.random(2) < 0.2)
        box.c_hi = rng.random((4, 3)) < 0.8
        box.c_lo = box.c_hi & (rng.random((4, 3)) < 0.15)
        raw = _members(box, universe)
        tight = propagate(box.copy())
        if tight is None:
            assert not raw.any()
        else:
            np.testing.assert_array_equal(raw, _members(tight, universe))


def _stack(trees):
    return {k: np.stack([getattr(t, k) for t in trees]).astype(float) for k in "abcd"}


def _members(box, u):
    """Which trees of the stacked universe satisfy every bound of ``box``."""
    ok = np.ones(len(u["d"]), bool)
    for k in "acd":
        lo, hi = getattr(box, k + "_lo"), getattr(box, k + "_hi")
        v = u[k].reshape(len(ok), -1)
        ok &= np.all((v >= lo.ravel()) & (v <= hi.ravel()), axis=1)
    return ok & np.all((u["b"] >= box.b_lo) & (u["b"] <= box.b_hi), axis=1)


# ---------------------------------------------------------------- branching


def _branch_node(box, prob):
    node = node_for(box, prob)
    return node


def test_branch_on_root_split_flag_first():
    prob = lake_problem(1)
    node = _branch_node(prob.full_box(), prob)
    zero, one = branch(node, np.random.default_rng(0))
    assert not zero.d_hi[0] and one.d_lo[0]
    assert node.branched == "d[1]"


def test_branch_bisects_threshold_at_midpoint():
    prob = lake_problem(1)
    box = prob.full_box()
    box.d_lo[0] = True
    box.a_lo[0] = box.a_hi[0] = [True, False]
    box.b_lo[0], box.b_hi[0] = 0.2, 0.6
    box.c_lo[:] = box.c_hi[:] = [[True, False, False, False], [False, True, False, False]]
    node = _branch_node(box, prob)
    left, right = branch(node, np.random.default_rng(0))
    assert (left.b_lo[0], left.b_hi[0]) == (0.2, pytest.approx(0.4))
    assert (right.b_lo[0], right.b_hi[0]) == (pytest.approx(0.4), 0.6)


def test_zero_width_thresholds_branch_on_features():
    prob = lake_problem(1)
    box = prob.full_box()
    box.d_lo[0] = True
    box.b_lo[0] = box.b_hi[0] = 0.5
    node = _branch_node(box, prob)
    for seed in range(20):
        zero, one = branch(node, np.random.default_rng(seed))
        assert node.branched == "a[0,1]"
        assert not zero.a_hi[0, 0] and one.a_lo[0, 0]


def test_branch_children_partition_the_box():
    prob = lake_problem(2)
    rng = np.random.default_rng(5)
    for _ in range(30):
        box = random_box(prob, rng)
        if box is None:
            continue
        node = BbNode(box, determined=np.full(prob.n_states, -1))
        if not evaluate_node(node, prob) or node.upper - node.lower <= 1e-9:
            continue
        kids = branch(node, rng, prob)
        for _ in range(30):
            tree = sample_tree(box, rng, prob.grid)
            if tree is None:
                continue
            # each tree lies in a child, up to threshold snapping on the grid
            inside = [k.contains(tree) for k in kids]
            if not any(inside):
                leaves = route_leaf(tree, prob.features)
                assert any(_routes_like_some_member(k, tree, leaves, prob) for k in kids)


def _routes_like_some_member(box, tree, leaves, prob):
    feats = tree.split_feature
    b = tree.b.copy()
    for r, j in enumerate(feats):
        if j >= 0 and not box.b_lo[r] <= b[r] <= box.b_hi[r]:
            b[r] = np.clip(b[r], box.b_lo[r], box.b_hi[r])
    moved = TreePolicy.from_splits(tree.depth, feats, b, tree.leaf_action, tree.n_features, tree.n_actions)
    return box.contains(moved) and np.array_equal(route_leaf(moved, prob.features), leaves)


# ---------------------------------------------------------------- solve


def test_depth_zero_solve_is_best_constant_action():
    mdp = random_mdp(9, 4, 2, 11)
    prob = problem(mdp, 0, v=np.ones(9))
    report = solve(prob)
    assert report.objective == pytest.approx(prob.wq.sum(axis=0).max(), abs=1e-12)
    assert report.tree.leaf_action[0] == prob.wq.sum(axis=0).argmax()


def test_frozen_lake_depth_one_matches_literal_enumeration():
    mdp = frozen_lake()
    prob = problem(mdp, 1, v=np.zeros(16))
    prob = StageProblem(np.ones(16), q_backup(mdp, value_iteration(mdp)), mdp.features, 1)
    report = solve(prob, delta=1e-9)
    assert abs(report.objective - enumerate_small(prob.wq, prob.features, 1)) <= 1e-9


def test_twenty_state_depth_two_matches_oracle():
    rng = np.random.default_rng(12)
    mdp = random_mdp(20, 3, 3, rng)
    prob = problem(mdp, 2, v=rng.normal(size=20))
    report = solve(prob, delta=1e-6)
    assert abs(report.objective - best_tree_value(prob.wq, prob.features, 2)) <= 1e-6
    assert report.gap <= 1e-6 and report.termination in ("gap", "queue_empty")


def test_report_tree_re_evaluates_and_validates():
    prob = problem(random_instance(3), 2)
    report = solve(prob)
    assert report.objective == prob.objective(report.tree)
    assert report.upper >= report.objective


def test_solve_respects_box_and_incumbent():
    prob = lake_problem(2)
    box = prob.full_box()
    box.c_hi[:, 0] = False
    report = solve(prob, box)
    assert not np.any(report.tree.leaf_action == 0)
    inc = report.tree
    again = solve(prob, box, incumbent=inc)
    assert again.objective >= prob.objective(inc) - 1e-12


def test_time_limit_still_returns_feasible_tree():
    mdp = random_mdp(20, 4, 3, 7)
    prob = problem(mdp, 3, v=np.random.default_rng(7).normal(size=20))
    report = solve(prob, time_limit=1e-3)
    assert report.termination in ("time_limit", "gap", "queue_empty")
    assert report.objective == prob.objective(report.tree)


def test_infeasible_box_raises():
    prob = lake_problem(1)
    box = prob.full_box()
    box.c_lo[0, :2] = True
    with pytest.raises(Infeasible):
        solve(prob, box)


def test_bad_arguments_rejected():
    prob = lake_problem(1)
    with pytest.raises(ValueError):
        solve(prob, delta=0)
    with pytest.raises(ValueError):
        solve(prob, Box.full(2, 2, 4))
    with pytest.raises(ValueError):
        StageProblem(np.zeros(16), prob.q, prob.features, 1)


def test_trace_writes_one_line_per_processed_node(tmp_path):
    prob = problem(random_instance(4), 2, v=np.random.default_rng(4).normal(size=random_instance(4).n_states))
    path = tmp_path / "trace.jsonl"
    report = solve(prob, trace=path)
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    assert len(lines) == report.nodes
    for rec in lines:
        assert {"node", "depth", "beta", "alpha", "branched"} <= set(rec)
        assert rec["beta"] <= rec["alpha"] + 1e-9


def test_same_seed_same_result():
    prob = problem(random_instance(15), 2, v=np.ones(random_instance(15).n_states))
    a, b = solve(prob, seed=3), solve(prob, seed=3)
    assert a.nodes == b.nodes and a.tree.same_as(b.tree)
