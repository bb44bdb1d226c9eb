"""Built-in MDP generators."""

from __future__ import annotations

import numpy as np

from .mdp import Mdp, normalize_features

__all__ = ["frozen_lake", "tiger_vs_antelope", "random_mdp", "ENVIRONMENTS"]

FROZEN_LAKE_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")

# row, col offsets for left, down, right, up (the usual gym action order)
_LAKE_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


def frozen_lake(gamma: float = 0.99, desc=FROZEN_LAKE_4X4) -> Mdp:
    """Slippery Frozen Lake.

    A move goes in the intended direction or either perpendicular one with
    probability 1/3 each; moves into a wall stay put. Entering the goal pays
    1. Holes and the goal are absorbing. Features are ``(row, col)`` scaled
    to [0, 1].
    """
    n_rows, n_cols = len(desc), len(desc[0])
    S = n_rows * n_cols
    src, act, dst, prob, rew = [], [], [], [], []

    def cell(r, c):
        return r * n_cols + c

    for r in range(n_rows):
        for c in range(n_cols):
            s = cell(r, c)
            for a in range(4):
                if desc[r][c] in "HG":
                    src.append(s); act.append(a); dst.append(s); prob.append(1.0); rew.append(0.0)
                    continue
                outcomes: dict[int, float] = {}
                for slip in (a - 1, a, a + 1):
                    dr, dc = _LAKE_MOVES[slip % 4]
                    nr = min(max(r + dr, 0), n_rows - 1)
                    nc = min(max(c + dc, 0), n_cols - 1)
                    outcomes[cell(nr, nc)] = outcomes.get(cell(nr, nc), 0.0) + 1.0 / 3.0
                for s2, p in outcomes.items():
                    r2, c2 = divmod(s2, n_cols)
                    src.append(s); act.append(a); dst.append(s2); prob.append(p)
                    rew.append(1.0 if desc[r2][c2] == "G" else 0.0)
    rows, cols = np.divmod(np.arange(S), n_cols)
    features = np.column_stack([rows / (n_rows - 1), cols / (n_cols - 1)])
    initial = np.zeros(S)
    for r in range(n_rows):
        for c in range(n_cols):
            if desc[r][c] == "S":
                initial[cell(r, c)] = 1.0
    return Mdp(
        n_states=S, n_actions=4, src=src, action=act, dst=dst, prob=prob, reward=rew,
        features=features, initial=initial, gamma=gamma,
        feature_names=("row", "col"), action_names=("left", "down", "right", "up"),
        name="frozen_lake_4x4",
    )


# tiger moves: up, right, down, left, wait as (dx, dy)
_TIGER_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0), (0, 0))
_ANTELOPE_MOVES = ((0, 0), (0, 1), (1, 0), (0, -1), (-1, 0))


def tiger_state(ax: int, ay: int, tx: int, ty: int, size: int = 5) -> int:
    return ((ax * size + ay) * size + tx) * size + ty


def tiger_vs_antelope(gamma: float = 0.99, size: int = 5) -> Mdp:
    """Tiger chases an antelope on a ``size x size`` grid.

    State ``(antelope_x, antelope_y, tiger_x, tiger_y)``. The tiger moves
    deterministically (up, right, down, left, wait; walls block). At the same
    time the antelope stays or steps to a neighbouring cell, uniformly among
    cells inside the grid other than the tiger's current cell. Capture (both
    on one cell afterwards) pays 1; capture states are absorbing.
    Start distribution: uniform over non-capture states.
    """
    n = size
    S = n**4
    src, act, dst, prob, rew = [], [], [], [], []
    initial = np.zeros(S)
    features = np.zeros((S, 4))
    for ax in range(n):
        for ay in range(n):
            for tx in range(n):
                for ty in range(n):
                    s = tiger_state(ax, ay, tx, ty, n)
                    features[s] = (ax, ay, tx, ty)
                    if (ax, ay) == (tx, ty):
                        for k in range(5):
                            src.append(s); act.append(k); dst.append(s); prob.append(1.0); rew.append(0.0)
                        continue
                    initial[s] = 1.0
                    moves = []
                    for dx, dy in _ANTELOPE_MOVES:
                        nx, ny = ax + dx, ay + dy
                        if 0 <= nx < n and 0 <= ny < n and (nx, ny) != (tx, ty):
                            moves.append((nx, ny))
                    p = 1.0 / len(moves)
                    for k, (dx, dy) in enumerate(_TIGER_MOVES):
                        ntx = min(max(tx + dx, 0), n - 1)
                        nty = min(max(ty + dy, 0), n - 1)
                        for nx, ny in moves:
                            src.append(s); act.append(k)
                            dst.append(tiger_state(nx, ny, ntx, nty, n))
                            prob.append(p)
                            rew.append(1.0 if (nx, ny) == (ntx, nty) else 0.0)
    initial /= initial.sum()
    return Mdp(
        n_states=S, n_actions=5, src=src, action=act, dst=dst, prob=prob, reward=rew,
        features=features / (n - 1), initial=initial, gamma=gamma,
        feature_names=("antelope_x", "antelope_y", "tiger_x", "tiger_y"),
        action_names=("up", "right", "down", "left", "wait"),
        name="tiger_vs_ant",
    )


def random_mdp(
    n_states: int,
    n_actions: int,
    n_features: int,
    rng: np.random.Generator | int | None = None,
    gamma: float = 0.9,
    branching: int = 3,
    levels: int = 5,
) -> Mdp:
    """Garnet-style random MDP.

    Each ``(state, action)`` reaches ``branching`` random successors with
    Dirichlet probabilities; rewards are uniform in [0, 1). Features are
    drawn from ``levels`` evenly spaced values so that ties occur, then
    min-max scaled per column.
    """
    rng = np.random.default_rng(rng)
    branching = min(branching, n_states)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(branching))
    R = rng.random((n_states, n_actions, n_states))
    features = normalize_features(rng.integers(levels, size=(n_states, n_features)).astype(float))
    initial = rng.dirichlet(np.ones(n_states))
    return Mdp.from_dense(P, R, features, initial, gamma, name=f"random_{n_states}x{n_actions}")


ENVIRONMENTS = {
    "frozen_lake": frozen_lake,
    "tiger_vs_ant": tiger_vs_antelope,
}
