import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stigcn.data import SyntheticSpec, generate_synthetic
from stigcn.estimator import STIGCNClassifier, check_skeleton_array
from stigcn.graph import build_topology


@pytest.fixture(scope="module")
def mini_data():
    spec = SyntheticSpec(class_count=3, samples_per_class=4, frames=8, seed=2, phase_jitter=1.0)
    ds = generate_synthetic(spec, build_topology("mini5"))
    return ds.X, np.array(["wave", "nod", "kick"])[ds.y]


def _clf(**kw):
    return STIGCNClassifier(**{"network": "toy", "topology": "mini5", "epochs": 3, "batch_size": 4, **kw})


def test_params_round_trip_through_clone():
    clf = _clf(lr=0.02, seed=3)
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()
    assert twin.set_params(epochs=5).epochs == 5 and clf.epochs == 3


def test_fit_predict_transform_shapes(mini_data):
    X, y = mini_data
    clf = _clf().fit(X, y)
    assert list(clf.classes_) == ["kick", "nod", "wave"]
    assert len(clf.history_) == 3
    pred = clf.predict(X)
    assert pred.shape == (12,) and set(pred) <= set(clf.classes_)
    proba = clf.predict_proba(X)
    assert proba.shape == (12, 3) and np.allclose(proba.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(clf.classes_[proba.argmax(axis=1)], pred)
    assert clf.transform(X).shape == (12, 16) == (12, clf.n_features_out_)
    assert 0.0 <= clf.score(X, y) <= 1.0
    # rank-4 input is one body
    assert clf.predict(X[..., 0]).tolist() == pred.tolist()


def test_fit_is_seed_deterministic_in_float64(mini_data):
    X, y = mini_data
    a = _clf(precision="f64").fit(X, y).decision_function(X)
    b = _clf(precision="f64").fit(X, y).decision_function(X)
    assert np.array_equal(a, b)


def test_unfitted_and_bad_input(mini_data):
    X, y = mini_data
    with pytest.raises(NotFittedError):
        _clf().predict(X)
    with pytest.raises(ValueError, match="labels"):
        _clf().fit(X, y[:-1])
    with pytest.raises(ValueError, match="joints"):
        STIGCNClassifier(network="toy", topology="ntu25", epochs=1).fit(X, y)
    clf = _clf(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="joints"):
        clf.predict(np.zeros((1, 3, 8, 6, 1)))


def test_check_skeleton_array():
    assert check_skeleton_array(np.zeros((2, 3, 4, 5))).shape == (2, 3, 4, 5, 1)
    with pytest.raises(ValueError, match="shape"):
        check_skeleton_array(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError, match="channels"):
        check_skeleton_array(np.zeros((1, 2, 4, 5, 1)), channels=3)
    bad = np.zeros((1, 3, 4, 5, 1))
    bad[0, 0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        check_skeleton_array(bad)
