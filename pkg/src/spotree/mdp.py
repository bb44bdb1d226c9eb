"""Tabular MDPs and exact evaluation primitives.

Value functions, policies and Q-tables are plain numpy arrays:

* value function: ``(n_states,)``
* state policy ``mu``: ``(n_states, n_actions)``, rows sum to one
* Q-table: ``(n_states, n_actions)``

Transitions are stored sparsely as ``(src, action, dst, prob, reward)``
records. Expected immediate rewards are derived from them on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mdp",
    "MdpValidationError",
    "ConvergenceError",
    "Occupancy",
    "value_iteration",
    "policy_evaluation",
    "occupancy",
    "q_backup",
    "greedy_policy",
    "uniform_policy",
    "deterministic_policy",
    "expected_return",
    "epsilon_greedy_return",
    "normalize_features",
]

PROB_ATOL = 1e-9


class MdpValidationError(ValueError):
    """An MDP invariant does not hold. ``check`` names the failed test."""

    def __init__(self, check: str, message: str):
        super().__init__(f"{check}: {message}")
        self.check = check


class ConvergenceError(RuntimeError):
    """An iterative sweep hit ``max_iters`` before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def normalize_features(x: np.ndarray) -> np.ndarray:
    """Min-max scale every column to [0, 1]; constant columns become 0."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2-d array")
    lo = x.min(axis=0) if len(x) else np.zeros(x.shape[1])
    hi = x.max(axis=0) if len(x) else np.zeros(x.shape[1])
    span = hi - lo
    out = np.zeros_like(x)
    varying = span > 0
    out[:, varying] = (x[:, varying] - lo[varying]) / span[varying]
    return out


@dataclass(frozen=True, eq=False)
class Mdp:
    """A finite discounted MDP with per-state feature vectors.

    Parameters
    ----------
    n_states, n_actions : int
    src, action, dst : int arrays of equal length
        One record per transition ``src --action--> dst``.
    prob, reward : float arrays
        Transition probability and the reward collected on that transition.
    features : (n_states, n_features) array
        Must already lie in [0, 1]; see :func:`normalize_features`.
    initial : (n_states,) array
        Initial state distribution.
    gamma : float
        Discount factor in [0, 1).
    """

    n_states: int
    n_actions: int
    src: np.ndarray
    action: np.ndarray
    dst: np.ndarray
    prob: np.ndarray
    reward: np.ndarray
    features: np.ndarray
    initial: np.ndarray
    gamma: float
    feature_names: tuple[str, ...] | None = None
    action_names: tuple[str, ...] | None = None
    name: str = field(default="mdp", compare=False)

    def __post_init__(self):
        conv = {
            "src": np.asarray(self.src, dtype=np.int64),
            "action": np.asarray(self.action, dtype=np.int64),
            "dst": np.asarray(self.dst, dtype=np.int64),
            "prob": np.asarray(self.prob, dtype=float),
            "reward": np.asarray(self.reward, dtype=float),
            "features": np.atleast_2d(np.asarray(self.features, dtype=float)),
            "initial": np.asarray(self.initial, dtype=float),
        }
        for key, value in conv.items():
            value.setflags(write=False)
            object.__setattr__(self, key, value)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.action_names is not None:
            object.__setattr__(self, "action_names", tuple(self.action_names))
        self.validate()

    @classmethod
    def from_dense(cls, P, R, features, initial, gamma, **kwargs) -> "Mdp":
        """Build from dense ``P[s, a, s']`` and ``R[s, a, s']`` arrays.

        ``R`` may also be ``(S, A)`` (reward independent of the next state).
        """
        P = np.asarray(P, dtype=float)
        n_states, n_actions, _ = P.shape
        R = np.asarray(R, dtype=float)
        if R.ndim == 2:
            R = np.broadcast_to(R[:, :, None], P.shape)
        s, a, d = np.nonzero(P)
        return cls(
            n_states=n_states,
            n_actions=n_actions,
            src=s,
            action=a,
            dst=d,
            prob=P[s, a, d],
            reward=R[s, a, d],
            features=features,
            initial=initial,
            gamma=gamma,
            **kwargs,
        )

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        S, A = self.n_states, self.n_actions
        if S < 1 or A < 1:
            raise MdpValidationError("dimensions", "need at least one state and one action")
        n = len(self.src)
        if not (len(self.action) == len(self.dst) == len(self.prob) == len(self.reward) == n):
            raise MdpValidationError("transitions", "transition arrays differ in length")
        if n and (self.src.min() < 0 or self.src.max() >= S or self.dst.min() < 0 or self.dst.max() >= S):
            raise MdpValidationError("transitions", "state index out of range")
        if n and (self.action.min() < 0 or self.action.max() >= A):
            raise MdpValidationError("transitions", "action index out of range")
        if not np.all(np.isfinite(self.prob)) or np.any(self.prob < 0):
            raise MdpValidationError("probability", "probabilities must be finite and non-negative")
        if not np.all(np.isfinite(self.reward)):
            raise MdpValidationError("reward", "rewards must be finite")
        sums = np.zeros((S, A))
        np.add.at(sums, (self.src, self.action), self.prob)
        bad = np.argwhere(np.abs(sums - 1.0) > PROB_ATOL)
        if len(bad):
            i, k = bad[0]
            raise MdpValidationError(
                "probability",
                f"outgoing probabilities of (state={i}, action={k}) sum to {sums[i, k]:.12g}",
            )
        if self.features.shape[0] != S:
            raise MdpValidationError("features", f"expected {S} feature rows, got {self.features.shape[0]}")
        if self.features.size and (
            not np.all(np.isfinite(self.features)) or self.features.min() < 0 or self.features.max() > 1
        ):
            raise MdpValidationError("features", "feature values must lie in [0, 1]")
        if self.initial.shape != (S,):
            raise MdpValidationError("initial", f"initial distribution must have length {S}")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1.0) > PROB_ATOL:
            raise MdpValidationError("initial", "initial distribution must be non-negative and sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise MdpValidationError("gamma", f"discount must lie in [0, 1), got {self.gamma}")
        if self.feature_names is not None and len(self.feature_names) != self.n_features:
            raise MdpValidationError("features", "feature_names length does not match features")
        if self.action_names is not None and len(self.action_names) != A:
            raise MdpValidationError("actions", "action_names length does not match n_actions")

    @cached_property
    def _matrices(self) -> tuple[list[sp.csr_matrix], np.ndarray]:
        S = self.n_states
        P, r = [], np.zeros((S, self.n_actions))
        for k in range(self.n_actions):
            sel = self.action == k
            Pk = sp.csr_matrix((self.prob[sel], (self.src[sel], self.dst[sel])), shape=(S, S))
            P.append(Pk)
            np.add.at(r[:, k], self.src[sel], self.prob[sel] * self.reward[sel])
        return P, r

    @property
    def P(self) -> list[sp.csr_matrix]:
        """Per-action sparse transition matrices."""
        return self._matrices[0]

    @property
    def expected_reward(self) -> np.ndarray:
        """``r[i, k] = sum_j P[i, k, j] R[i, k, j]``."""
        return self._matrices[1]

    @cached_property
    def r_max(self) -> float:
        return float(np.abs(self.reward).max()) if len(self.reward) else 0.0

    def policy_matrix(self, mu: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        """Markov chain ``P_mu`` and reward vector ``r_mu`` under policy ``mu``."""
        mu = _check_policy(self, mu)
        P_mu = sp.csr_matrix((self.n_states, self.n_states))
        for k in range(self.n_actions):
            if np.any(mu[:, k]):
                P_mu = P_mu + sp.diags(mu[:, k]) @ self.P[k]
        r_mu = np.einsum("ik,ik->i", mu, self.expected_reward)
        return P_mu.tocsr(), r_mu

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(P, R)`` tensors of shape ``(S, A, S)``; for small models only."""
        S, A = self.n_states, self.n_actions
        P = np.zeros((S, A, S))
        PR = np.zeros((S, A, S))
        np.add.at(P, (self.src, self.action, self.dst), self.prob)
        np.add.at(PR, (self.src, self.action, self.dst), self.prob * self.reward)
        R = np.divide(PR, P, out=np.zeros_like(P), where=P > 0)
        return P, R


@dataclass(frozen=True)
class Occupancy:
    """Per-state weights used to scale each state's contribution."""

    values: np.ndarray
    mode: str  # "exact", "one" or "softmax"


def _check_policy(mdp: Mdp, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}, got {mu.shape}")
    if np.any(mu < 0) or np.any(np.abs(mu.sum(axis=1) - 1.0) > PROB_ATOL):
        raise ValueError("policy rows must be non-negative and sum to 1")
    return mu


def uniform_policy(mdp: Mdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    """One-hot policy matrix from a vector of action indices."""
    actions = np.asarray(actions, dtype=np.int64)
    mu = np.zeros((len(actions), n_actions))
    mu[np.arange(len(actions)), actions] = 1.0
    return mu


def q_backup(mdp: Mdp, v_old: np.ndarray) -> np.ndarray:
    """``Q[i, k] = sum_j P[i, k, j] (R[i, k, j] + gamma * v_old[j])``."""
    v_old = np.asarray(v_old, dtype=float)
    if v_old.shape != (mdp.n_states,):
        raise ValueError(f"value function must have shape ({mdp.n_states},), got {v_old.shape}")
    q = mdp.expected_reward.copy()
    if mdp.gamma:
        for k in range(mdp.n_actions):
            q[:, k] += mdp.gamma * (mdp.P[k] @ v_old)
    return q


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """One-hot argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    return deterministic_policy(np.argmax(q, axis=1), q.shape[1])


def value_iteration(
    mdp: Mdp,
    tol: float = 1e-9,
    max_iters: int = 1_000_000,
    check_contraction: bool = True,
    callback=None,
) -> np.ndarray:
    """Optimal value function with Bellman residual ``<= tol``.

    Every sweep checks the contraction ``|V_{t+1} - V_t| <= gamma |V_t - V_{t-1}|``.
    ``callback`` receives each sweep's sup-norm step.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    prev_step = None
    for it in range(max_iters):
        v_new = q_backup(mdp, v).max(axis=1)
        step = float(np.abs(v_new - v).max())
        if callback is not None:
            callback(step)
        if check_contraction and prev_step is not None:
            slack = 1e-12 * (1.0 + float(np.abs(v_new).max()))
            assert step <= mdp.gamma * prev_step + slack, "value iteration failed to contract"
        if step <= tol:
            return v
        prev_step = step
        v = v_new
    raise ConvergenceError("value iteration did not converge", step, max_iters)


def policy_evaluation(mdp: Mdp, mu: np.ndarray, tol: float = 1e-10, max_iters: int = 1_000_000) -> np.ndarray:
    """Value of the (possibly stochastic) policy ``mu``.

    Iterates ``V <- r_mu + gamma P_mu V`` until the residual is below
    ``tol * (1 - gamma)``, which bounds the distance to the true value by ``tol``.
    """
    P_mu, r_mu = mdp.policy_matrix(mu)
    target = tol * (1.0 - mdp.gamma)
    v = np.zeros(mdp.n_states)
    for it in range(max_iters):
        v_new = r_mu + mdp.gamma * (P_mu @ v)
        res = float(np.abs(v_new - v).max())
        v = v_new
        if res <= target:
            return v
    raise ConvergenceError("policy evaluation did not converge", res, max_iters)


def occupancy(
    mdp: Mdp, mu: np.ndarray, tol: float = 1e-10, mode: str = "exact", max_iters: int = 1_000_000
) -> Occupancy:
    """Discounted state-visitation weights under ``mu``.

    ``mode="exact"`` solves ``phi = p0 + gamma P_mu^T phi``; ``"softmax"``
    applies a unit-temperature softmax to the exact measure; ``"one"``
    returns all-ones weights.
    """
    if mode == "one":
        return Occupancy(np.ones(mdp.n_states), "one")
    if mode not in ("exact", "softmax"):
        raise ValueError(f"unknown occupancy mode {mode!r}")
    P_mu, _ = mdp.policy_matrix(mu)
    P_t = P_mu.T.tocsr()
    target = tol * (1.0 - mdp.gamma)
    phi = mdp.initial.copy()
    for it in range(max_iters):
        phi_new = mdp.initial + mdp.gamma * (P_t @ phi)
        res = float(np.abs(phi_new - phi).max())
        phi = phi_new
        if res <= target:
            break
    else:
        raise ConvergenceError("occupancy did not converge", res, max_iters)
    if mode == "softmax":
        z = np.exp(phi - phi.max())
        return Occupancy(z / z.sum(), "softmax")
    return Occupancy(phi, "exact")


def expected_return(mdp: Mdp, v: np.ndarray) -> float:
    """``sum_i p0(i) V(i)``."""
    return float(mdp.initial @ v)


def epsilon_greedy_return(mdp: Mdp, mu: np.ndarray, eps: float, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Evaluate ``(1 - eps) mu + eps * uniform`` and its expected return."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    mix = (1.0 - eps) * np.asarray(mu, dtype=float) + eps * uniform_policy(mdp)
    v = policy_evaluation(mdp, mix, tol=tol)
    return v, expected_return(mdp, v)
