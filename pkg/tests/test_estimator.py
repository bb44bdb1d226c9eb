import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import route_leaf
from spotree.envs import frozen_lake
from spotree.estimator import SpotTreePolicy
from spotree.spot import policy_return
from spotree.tree import constant_tree


@pytest.fixture(scope="module")
def fitted():
    return SpotTreePolicy(depth=2, n_iter=3, random_state=1).fit(frozen_lake())


def test_params_round_trip_through_clone():
    est = SpotTreePolicy(depth=4, phi=[1.0, 0.5], random_state=3)
    params = est.get_params()
    assert params["depth"] == 4 and params["phi"] == [1.0, 0.5]
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(depth=1)
    assert est.depth == 1


def test_fit_sets_attributes(fitted):
    mdp = frozen_lake()
    assert fitted.n_features_in_ == 2 and fitted.n_actions_ == 4
    assert len(fitted.history_) == 4
    assert fitted.best_return_ == pytest.approx(policy_return(mdp, fitted.tree_))
    assert fitted.score(mdp) == pytest.approx(fitted.normalized_return_)


def test_predict_and_apply_match_routing_oracle(fitted):
    X = np.random.default_rng(0).random((40, 2))
    leaves = route_leaf(fitted.tree_, X)
    np.testing.assert_array_equal(fitted.apply(X), leaves)
    np.testing.assert_array_equal(fitted.predict(X), fitted.tree_.leaf_action[leaves - 4])


def test_input_validation(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted.predict(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        fitted.predict([[np.nan, 0.0]])
    with pytest.raises(TypeError):
        SpotTreePolicy().fit(np.zeros((3, 2)))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SpotTreePolicy().predict([[0.0, 0.0]])


def test_bad_params_fail_at_fit():
    with pytest.raises(ValueError):
        SpotTreePolicy(phi=2.0).fit(frozen_lake())
    with pytest.raises(TypeError):
        SpotTreePolicy(warm_start="tree.json").fit(frozen_lake())


def test_warm_start_and_dot():
    warm = constant_tree(2, 2, 4, action=1)
    est = SpotTreePolicy(depth=2, n_iter=1, warm_start=warm).fit(frozen_lake())
    assert est.best_return_ >= policy_return(frozen_lake(), warm)
    assert est.to_dot().startswith("digraph")
