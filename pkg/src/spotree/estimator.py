"""scikit-learn style wrapper around :func:`spotree.spot.spot_run`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .mdp import Mdp
from .spot import SpotConfig, normalized_return, spot_run
from .tree import TreePolicy, route_all, tree_actions, tree_to_dot

__all__ = ["SpotTreePolicy"]


class SpotTreePolicy(BaseEstimator):
    """Depth-bounded decision-tree policy fitted to an :class:`~spotree.mdp.Mdp`.

    ``fit`` takes the MDP in place of a design matrix. After fitting,
    ``predict`` maps feature rows (scaled like the MDP's features) to
    actions.

    Attributes
    ----------
    tree_ : TreePolicy
        Best tree found.
    best_return_ : float
        Its exact expected return.
    normalized_return_ : float
    history_ : list of dict
        One record per iteration (iteration 0 is the initial tree).
    termination_ : str
    n_features_in_, n_actions_ : int
    """

    def __init__(
        self,
        depth=3,
        n_iter=10,
        phi=0.5,
        iter_time_limit=300.0,
        total_time_limit=3600.0,
        phi_mode="one",
        delta=1e-6,
        workers=1,
        random_state=0,
        init="random",
        warm_start=None,
        explore=True,
    ):
        self.depth = depth
        self.n_iter = n_iter
        self.phi = phi
        self.iter_time_limit = iter_time_limit
        self.total_time_limit = total_time_limit
        self.phi_mode = phi_mode
        self.delta = delta
        self.workers = workers
        self.random_state = random_state
        self.init = init
        self.warm_start = warm_start
        self.explore = explore

    def _config(self) -> SpotConfig:
        if self.random_state is not None and not isinstance(self.random_state, (int, np.integer)):
            raise ValueError("random_state must be an integer or None")
        if self.warm_start is not None and not isinstance(self.warm_start, TreePolicy):
            raise TypeError("warm_start must be a TreePolicy")
        return SpotConfig(
            depth=self.depth,
            n_iter=self.n_iter,
            phi=self.phi,
            iter_time_limit=self.iter_time_limit,
            total_time_limit=self.total_time_limit,
            phi_mode=self.phi_mode,
            delta=self.delta,
            workers=self.workers,
            seed=None if self.random_state is None else int(self.random_state),
            warm_start=self.warm_start,
            init="warm" if self.warm_start is not None else self.init,
            explore=self.explore,
        )

    def fit(self, mdp, y=None):
        if not isinstance(mdp, Mdp):
            raise TypeError(f"fit expects an Mdp, got {type(mdp).__name__}")
        result = spot_run(mdp, self._config())
        self.tree_ = result.best_tree
        self.best_return_ = result.best_return
        self.normalized_return_ = result.best_normalized
        self.history_ = result.history
        self.termination_ = result.termination
        self.n_features_in_ = mdp.n_features
        self.n_actions_ = mdp.n_actions
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but the policy was fitted with {self.n_features_in_}")
        return X

    def predict(self, X) -> np.ndarray:
        """Action index for every row of ``X``."""
        X = self._check_X(X)
        return tree_actions(self.tree_, X)

    def apply(self, X) -> np.ndarray:
        """Heap index of the leaf each row of ``X`` lands in."""
        X = self._check_X(X)
        return route_all(self.tree_, X)

    def score(self, mdp, y=None) -> float:
        """Normalized return of the fitted tree on ``mdp``."""
        check_is_fitted(self, "tree_")
        return normalized_return(mdp, self.tree_)

    def to_dot(self, feature_names=None, action_names=None) -> str:
        check_is_fitted(self, "tree_")
        return tree_to_dot(self.tree_, feature_names, action_names)
