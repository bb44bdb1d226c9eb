"""Writers for small PRISM explicit-state bundles used as test inputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_bundle(directory, stem, n_states, rows, valuations, names, rewards=None, init=(0,), action_labels=None):
    """``rows`` are ``(src, choice, dst, prob)``; ``valuations`` one tuple of raw values per state."""
    directory = Path(directory)
    choices = len({(s, c) for s, c, _, _ in rows})
    lines = [f"{n_states} {choices} {len(rows)}"]
    for s, c, d, p in rows:
        label = f" {action_labels[c]}" if action_labels else ""
        lines.append(f"{s} {c} {d} {p!r}{label}")
    (directory / f"{stem}.tra").write_text("\n".join(lines) + "\n")
    sta = ["(" + ",".join(names) + ")"]
    sta += [f"{i}:(" + ",".join(str(v) for v in vals) + ")" for i, vals in enumerate(valuations)]
    (directory / f"{stem}.sta").write_text("\n".join(sta) + "\n")
    if rewards is not None:
        rew = [f"{n_states} {choices} {len(rewards)}"]
        rew += [f"{s} {c} {d} {r!r}" for (s, c, d), r in rewards.items()]
        (directory / f"{stem}.trew").write_text("\n".join(rew) + "\n")
    if init is not None:
        lab = ['0="init" 1="deadlock"'] + [f"{s}: 0" for s in init]
        (directory / f"{stem}.lab").write_text("\n".join(lab) + "\n")
    return directory / f"{stem}.tra"


def bundle_from_mdp(mdp, directory, stem="model", scale=None):
    """Export an MDP; features are written verbatim, or as integers ``round(x * scale)``."""
    if scale is None:
        raw = [tuple(repr(float(v)) for v in row) for row in mdp.features]
    else:
        raw = [tuple(int(v) for v in row) for row in np.rint(mdp.features * scale)]
    rows, rewards = [], {}
    for s, a, d, p, r in zip(mdp.src, mdp.action, mdp.dst, mdp.prob, mdp.reward):
        rows.append((int(s), int(a), int(d), float(p)))
        if r:
            rewards[(int(s), int(a), int(d))] = float(r)
    names = [f"v{j}" for j in range(mdp.n_features)]
    init = [int(i) for i in np.flatnonzero(mdp.initial)]
    return write_bundle(directory, stem, mdp.n_states, rows, raw, names, rewards, init)
