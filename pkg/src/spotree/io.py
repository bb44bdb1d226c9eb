"""Reading and writing MDPs, trees and run histories.

Grammars are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import Mdp, MdpValidationError, normalize_features
from .tree import TreePolicy, TreeValidationError, tree_from_json, tree_to_json

__all__ = [
    "MdpParseError",
    "UnknownFieldError",
    "PrismBundle",
    "load_mdp",
    "load_json_mdp",
    "save_json_mdp",
    "mdp_to_json",
    "mdp_from_json",
    "load_prism",
    "load_tree",
    "save_tree",
    "write_history",
    "read_history",
]

PRISM_PROB_ATOL = 1e-6

JSON_REQUIRED = ("gamma", "num_states", "num_actions", "num_features", "features", "initial", "transitions")
JSON_OPTIONAL = ("feature_names", "action_names", "name")
TRANSITION_FIELDS = ("from", "action", "to", "prob", "reward")


class MdpParseError(ValueError):
    """Malformed input file (MDP or tree). ``line`` is 1-based when known."""

    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class UnknownFieldError(MdpParseError):
    def __init__(self, path, fields, context: str = "document"):
        super().__init__(path, f"unknown field(s) in {context}: {', '.join(sorted(fields))}")
        self.fields = tuple(sorted(fields))


# ---------------------------------------------------------------- JSON


def mdp_to_json(mdp: Mdp) -> dict:
    doc = {
        "gamma": mdp.gamma,
        "num_states": mdp.n_states,
        "num_actions": mdp.n_actions,
        "num_features": mdp.n_features,
        "features": mdp.features.tolist(),
        "initial": mdp.initial.tolist(),
        "transitions": [
            {"from": int(s), "action": int(a), "to": int(d), "prob": float(p), "reward": float(r)}
            for s, a, d, p, r in zip(mdp.src, mdp.action, mdp.dst, mdp.prob, mdp.reward)
        ],
        "name": mdp.name,
    }
    if mdp.feature_names is not None:
        doc["feature_names"] = list(mdp.feature_names)
    if mdp.action_names is not None:
        doc["action_names"] = list(mdp.action_names)
    return doc


def _int_field(doc, key, path):
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise MdpParseError(path, f"{key!r} must be an integer")
    return value


def mdp_from_json(doc: dict, path="<json>") -> Mdp:
    """Build an :class:`Mdp` from a parsed JSON document; features are min-max scaled."""
    if not isinstance(doc, dict):
        raise MdpParseError(path, "top level must be an object")
    unknown = set(doc) - set(JSON_REQUIRED) - set(JSON_OPTIONAL)
    if unknown:
        raise UnknownFieldError(path, unknown)
    missing = [k for k in JSON_REQUIRED if k not in doc]
    if missing:
        raise MdpParseError(path, f"missing field(s): {', '.join(missing)}")
    S = _int_field(doc, "num_states", path)
    A = _int_field(doc, "num_actions", path)
    F = _int_field(doc, "num_features", path)
    rows = []
    for n, t in enumerate(doc["transitions"]):
        if not isinstance(t, dict):
            raise MdpParseError(path, f"transition {n} must be an object")
        extra = set(t) - set(TRANSITION_FIELDS)
        if extra:
            raise UnknownFieldError(path, extra, context=f"transition {n}")
        lacking = [k for k in TRANSITION_FIELDS if k not in t]
        if lacking:
            raise MdpParseError(path, f"transition {n} lacks {', '.join(lacking)}")
        rows.append(tuple(t[k] for k in TRANSITION_FIELDS))
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    if arr.size and np.any(arr[:, :3] != np.round(arr[:, :3])):
        raise MdpParseError(path, "transition indices must be integers")
    try:
        features = np.asarray(doc["features"], dtype=float).reshape(S, F) if S * F else np.zeros((S, F))
    except ValueError as exc:
        raise MdpParseError(path, f"features must be a {S} x {F} matrix") from exc
    return Mdp(
        n_states=S,
        n_actions=A,
        src=arr[:, 0].astype(np.int64),
        action=arr[:, 1].astype(np.int64),
        dst=arr[:, 2].astype(np.int64),
        prob=arr[:, 3],
        reward=arr[:, 4],
        features=normalize_features(features),
        initial=np.asarray(doc["initial"], dtype=float),
        gamma=float(doc["gamma"]),
        feature_names=doc.get("feature_names"),
        action_names=doc.get("action_names"),
        name=doc.get("name", Path(str(path)).stem),
    )


def load_json_mdp(path) -> Mdp:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MdpParseError(path, exc.msg, exc.lineno) from exc
    return mdp_from_json(doc, path)


def save_json_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_json(mdp), indent=1) + "\n")


# ---------------------------------------------------------------- PRISM explicit export


@dataclass(frozen=True)
class PrismBundle:
    tra: Path
    sta: Path
    trew: Path | None = None
    lab: Path | None = None

    @classmethod
    def find(cls, path) -> "PrismBundle":
        """Locate a bundle from its ``.tra`` file, any sibling, a stem or a directory."""
        path = Path(path)
        if path.is_dir():
            tras = sorted(path.glob("*.tra"))
            if len(tras) != 1:
                raise MdpParseError(path, f"expected exactly one .tra file, found {len(tras)}")
            stem = tras[0].with_suffix("")
        else:
            stem = path.with_suffix("") if path.suffix in (".tra", ".sta", ".trew", ".lab") else path
        tra, sta = stem.with_suffix(".tra"), stem.with_suffix(".sta")
        for p in (tra, sta):
            if not p.exists():
                raise MdpParseError(p, "file not found")
        trew, lab = stem.with_suffix(".trew"), stem.with_suffix(".lab")
        return cls(tra, sta, trew if trew.exists() else None, lab if lab.exists() else None)


def _data_lines(path: Path):
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                yield n, line


def _header_ints(path, n, line, counts):
    try:
        vals = [int(v) for v in line.split()]
    except ValueError:
        raise MdpParseError(path, "header must contain integers", n) from None
    if len(vals) not in counts:
        raise MdpParseError(path, f"header must have {' or '.join(map(str, counts))} integers", n)
    return vals


def _read_tra(path: Path):
    lines = _data_lines(path)
    try:
        n, head = next(lines)
    except StopIteration:
        raise MdpParseError(path, "empty file") from None
    n_states = _header_ints(path, n, head, (3,))[0]
    rows = []
    labels = {}
    for n, line in lines:
        parts = line.split()
        if len(parts) not in (4, 5):
            raise MdpParseError(path, "expected 'src choice dst prob [action]'", n)
        try:
            s, c, d = int(parts[0]), int(parts[1]), int(parts[2])
            p = float(parts[3])
        except ValueError:
            raise MdpParseError(path, "malformed number", n) from None
        if not (0 <= s < n_states and 0 <= d < n_states) or c < 0:
            raise MdpParseError(path, "state or choice index out of range", n)
        if not math.isfinite(p) or p < 0:
            raise MdpParseError(path, "probability must be finite and non-negative", n)
        if len(parts) == 5:
            labels[(s, c)] = parts[4]
        rows.append((s, c, d, p, n))
    return n_states, rows, labels


def _parse_value(token: str) -> float:
    if token == "true":
        return 1.0
    if token == "false":
        return 0.0
    return float(token)


_STA_LINE = re.compile(r"^(\d+):\((.*)\)$")


def _read_sta(path: Path, n_states: int):
    lines = _data_lines(path)
    try:
        n, head = next(lines)
    except StopIteration:
        raise MdpParseError(path, "empty file") from None
    if not (head.startswith("(") and head.endswith(")")):
        raise MdpParseError(path, "header must look like '(var1,var2,...)'", n)
    names = [v.strip() for v in head[1:-1].split(",") if v.strip()]
    X = np.full((n_states, len(names)), np.nan)
    for n, line in lines:
        m = _STA_LINE.match(line)
        if not m:
            raise MdpParseError(path, "expected 'index:(v1,...)'", n)
        i = int(m.group(1))
        if i >= n_states:
            raise MdpParseError(path, f"state {i} out of range", n)
        tokens = [t.strip() for t in m.group(2).split(",")] if m.group(2) else []
        if len(tokens) != len(names):
            raise MdpParseError(path, f"expected {len(names)} values", n)
        try:
            X[i] = [_parse_value(t) for t in tokens]
        except ValueError:
            raise MdpParseError(path, "malformed value", n) from None
    if np.isnan(X).any():
        missing = int(np.flatnonzero(np.isnan(X).any(axis=1))[0])
        raise MdpParseError(path, f"no valuation for state {missing}")
    return names, X


def _read_trew(path: Path, known: dict):
    lines = _data_lines(path)
    try:
        n, head = next(lines)
    except StopIteration:
        return {}
    _header_ints(path, n, head, (2, 3))
    rewards = {}
    for n, line in lines:
        parts = line.split()
        if len(parts) != 4:
            raise MdpParseError(path, "expected 'src choice dst reward'", n)
        try:
            key = (int(parts[0]), int(parts[1]), int(parts[2]))
            r = float(parts[3])
        except ValueError:
            raise MdpParseError(path, "malformed number", n) from None
        if key not in known:
            raise MdpParseError(path, f"reward for transition {key} that is not in the .tra file", n)
        rewards[key] = rewards.get(key, 0.0) + r
    return rewards


def _read_initial(path: Path, n_states: int) -> np.ndarray | None:
    lines = _data_lines(path)
    try:
        n, head = next(lines)
    except StopIteration:
        return None
    labels = dict(re.findall(r'(\d+)="([^"]*)"', head))
    init = [k for k, v in labels.items() if v == "init"]
    if not init:
        return None
    init_id = init[0]
    p0 = np.zeros(n_states)
    for n, line in lines:
        state, _, ids = line.partition(":")
        try:
            s = int(state)
        except ValueError:
            raise MdpParseError(path, "expected 'state: label ids'", n) from None
        if init_id in ids.split():
            if not 0 <= s < n_states:
                raise MdpParseError(path, f"state {s} out of range", n)
            p0[s] = 1.0
    return p0 / p0.sum() if p0.sum() else None


def load_prism(path, gamma: float = 0.99) -> Mdp:
    """Load a PRISM explicit-state export.

    Choice ``c`` of a state becomes action ``c``; the action count is the
    largest number of choices of any state. A state with fewer choices
    repeats its first choice in the missing slots, and a state without any
    becomes a zero-reward self-loop. The start distribution is uniform over
    the states labelled ``init`` (state 0 without a label file).
    """
    bundle = path if isinstance(path, PrismBundle) else PrismBundle.find(path)
    n_states, rows, labels = _read_tra(bundle.tra)
    names, X = _read_sta(bundle.sta, n_states)

    sums: dict[tuple[int, int], float] = {}
    known: dict[tuple[int, int, int], int] = {}
    for s, c, d, p, n in rows:
        sums[(s, c)] = sums.get((s, c), 0.0) + p
        known[(s, c, d)] = n
    for (s, c), total in sums.items():
        if abs(total - 1.0) > PRISM_PROB_ATOL:
            raise MdpValidationError(
                "probability", f"{bundle.tra}: outgoing probabilities of (state={s}, choice={c}) sum to {total:.12g}"
            )
    rewards = _read_trew(bundle.trew, known) if bundle.trew else {}

    choices = np.zeros(n_states, dtype=np.int64)
    for s, c in sums:
        choices[s] = max(choices[s], c + 1)
    for s in range(n_states):
        for c in range(choices[s]):
            if (s, c) not in sums:
                raise MdpParseError(bundle.tra, f"state {s} skips choice {c}")
    n_actions = max(int(choices.max()), 1)

    src, act, dst, prob, rew = [], [], [], [], []
    by_choice: dict[tuple[int, int], list] = {}
    for s, c, d, p, _ in rows:
        by_choice.setdefault((s, c), []).append((d, p / sums[(s, c)], rewards.get((s, c, d), 0.0)))
    for s in range(n_states):
        for k in range(n_actions):
            outs = by_choice.get((s, k)) or by_choice.get((s, 0)) or [(s, 1.0, 0.0)]
            for d, p, r in outs:
                src.append(s); act.append(k); dst.append(d); prob.append(p); rew.append(r)

    initial = _read_initial(bundle.lab, n_states) if bundle.lab else None
    if initial is None:
        initial = np.zeros(n_states)
        initial[0] = 1.0
    action_names = None
    if labels:
        action_names = tuple(labels.get((0, k), f"choice{k}") for k in range(n_actions))
    return Mdp(
        n_states=n_states, n_actions=n_actions, src=src, action=act, dst=dst, prob=prob, reward=rew,
        features=normalize_features(X), initial=initial, gamma=gamma,
        feature_names=tuple(names), action_names=action_names, name=bundle.tra.stem,
    )


def load_mdp(path, gamma: float | None = None) -> Mdp:
    """Load JSON (``.json``) or a PRISM export (anything else).

    ``gamma`` overrides the discount of a JSON file and sets that of a PRISM
    model (default 0.99).
    """
    path = Path(path)
    if path.suffix == ".json":
        mdp = load_json_mdp(path)
        if gamma is not None and gamma != mdp.gamma:
            mdp = Mdp(**{**_fields(mdp), "gamma": gamma})
        return mdp
    return load_prism(path, gamma=0.99 if gamma is None else gamma)


def _fields(mdp: Mdp) -> dict:
    keys = ("n_states", "n_actions", "src", "action", "dst", "prob", "reward", "features", "initial",
            "gamma", "feature_names", "action_names", "name")
    return {k: getattr(mdp, k) for k in keys}


# ---------------------------------------------------------------- trees and histories


def save_tree(tree: TreePolicy, path) -> None:
    Path(path).write_text(json.dumps(tree_to_json(tree), indent=1) + "\n")


def load_tree(path, n_features: int | None = None, n_actions: int | None = None) -> TreePolicy:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MdpParseError(path, exc.msg, exc.lineno) from exc
    try:
        return tree_from_json(doc, n_features=n_features, n_actions=n_actions)
    except (KeyError, TypeError) as exc:
        raise MdpParseError(path, f"malformed tree document ({exc!r})") from exc
    except ValueError as exc:
        if isinstance(exc, TreeValidationError):
            raise
        raise MdpParseError(path, str(exc)) from exc


def write_history(records, path) -> None:
    """One JSON object per line, keys sorted."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
