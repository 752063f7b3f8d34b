import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from sklearn.base import clone

from toggle_fqi.regress import ExtraTreesRegressor

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def training_sets(draw, max_rows=60):
    m = draw(st.integers(1, max_rows))
    X = draw(hnp.arrays(np.float64, (m, 3), elements=finite))
    y = draw(hnp.arrays(np.float64, m, elements=finite))
    return X, y


def probe_points(X, n=40, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = X.min(axis=0) - 5, X.max(axis=0) + 5
    return np.vstack([X, rng.uniform(lo, hi, (n, X.shape[1]))])


def test_constant_targets():
    rng = np.random.default_rng(1)
    X = rng.random((200, 3))
    model = ExtraTreesRegressor(n_trees=10, seed=0).fit(X, np.full(200, 7.0))
    assert np.all(model.predict(probe_points(X)) == 7.0)
    assert model.n_leaves_ == 10


def test_single_sample():
    model = ExtraTreesRegressor(seed=3).fit([[1.0, 2.0, 0.0]], [4.25])
    assert np.all(model.predict(probe_points(np.array([[1.0, 2.0, 0.0]]))) == 4.25)


def test_large_n_min_gives_global_mean():
    rng = np.random.default_rng(2)
    X, y = rng.random((30, 3)), rng.normal(size=30)
    model = ExtraTreesRegressor(n_trees=5, n_min=31, seed=0).fit(X, y)
    oracle = sum(y.tolist()) / len(y)
    np.testing.assert_allclose(model.predict(probe_points(X)), oracle, rtol=1e-12)
    assert model.n_leaves_ == 5


def test_single_tree_interpolates():
    rng = np.random.default_rng(3)
    X, y = rng.random((500, 3)), rng.normal(size=500)
    model = ExtraTreesRegressor(n_trees=1, n_min=2, seed=9).fit(X, y)
    assert np.array_equal(model.predict(X), y)


def test_ensemble_mean_of_two_trees():
    # two root-only trees holding 1.0 and 3.0
    payload = {
        "format": "extra-trees", "format_version": 1, "n_features": 3,
        "params": {"n_trees": 2, "k_splits": 3, "n_min": 2, "seed": None},
        "roots": [0, 1], "feature": [-1, -1], "threshold": [0.0, 0.0], "left": [-1, -1],
        "right": [-1, -1], "value": [1.0, 3.0], "n_node_samples": [1, 1],
    }
    model = ExtraTreesRegressor.from_dict(payload)
    assert model.predict([[0.0, 0.0, 1.0]])[0] == 2.0
    np.testing.assert_array_equal(model.predict_per_tree([[5.0, 5.0, 0.0]]), [[1.0], [3.0]])


def test_predictions_piecewise_constant():
    rng = np.random.default_rng(4)
    X, y = rng.random((100, 3)), rng.normal(size=100)
    model = ExtraTreesRegressor(n_trees=7, seed=1).fit(X, y)
    # a point and a tiny perturbation of it sit in the same leaves unless a
    # threshold separates them
    p = np.array([[0.5, 0.5, 0.5]])
    q = p + 1e-13
    if not np.any(np.abs(model.threshold_ - 0.5) < 1e-12):
        assert model.predict(p)[0] == model.predict(q)[0]


@settings(max_examples=60, deadline=None)
@given(training_sets(), st.integers(1, 3), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_range_bounded(data, k, n_min, seed):
    X, y = data
    model = ExtraTreesRegressor(n_trees=4, k_splits=k, n_min=n_min, seed=seed).fit(X, y)
    pred = model.predict(probe_points(X))
    assert np.all(pred >= y.min() - 1e-9 * max(1, abs(y.min())))
    assert np.all(pred <= y.max() + 1e-9 * max(1, abs(y.max())))


@settings(max_examples=40, deadline=None)
@given(training_sets(), finite, st.integers(0, 2**32 - 1))
def test_constant_targets_exact(data, c, seed):
    X, _ = data
    model = ExtraTreesRegressor(n_trees=3, seed=seed).fit(X, np.full(len(X), c))
    assert np.all(model.predict(probe_points(X)) == c)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 3, elements=finite), finite, st.integers(0, 2**32 - 1))
def test_single_sample_exact(x, target, seed):
    model = ExtraTreesRegressor(n_trees=3, seed=seed).fit(x[None, :], [target])
    assert np.all(model.predict(probe_points(x[None, :])) == target)


@settings(max_examples=40, deadline=None)
@given(training_sets(max_rows=120), st.integers(0, 2**32 - 1))
def test_leaf_count_non_increasing_in_n_min(data, seed):
    X, y = data
    counts = [ExtraTreesRegressor(n_trees=3, n_min=n, seed=seed).fit(X, y).n_leaves_ for n in range(2, 12)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_leaf_count_non_increasing_at_scale():
    rng = np.random.default_rng(5)
    X = rng.random((3000, 3))
    y = np.sin(6 * X[:, 0]) + X[:, 1] + 0.1 * rng.normal(size=3000)
    counts = [ExtraTreesRegressor(n_trees=5, n_min=n, seed=11).fit(X, y).n_leaves_ for n in (2, 3, 5, 8, 20, 100)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] > counts[-1]


@settings(max_examples=30, deadline=None)
@given(training_sets(), st.integers(0, 2**32 - 1))
def test_seed_reproducible(data, seed):
    X, y = data
    a = ExtraTreesRegressor(n_trees=4, seed=seed).fit(X, y)
    b = ExtraTreesRegressor(n_trees=4, seed=seed).fit(X, y)
    assert a.dumps() == b.dumps()
    probe = probe_points(X)
    assert a.predict(probe).tobytes() == b.predict(probe).tobytes()


def test_different_seeds_differ():
    rng = np.random.default_rng(6)
    X, y = rng.random((200, 3)), rng.normal(size=200)
    a = ExtraTreesRegressor(n_trees=2, seed=1).fit(X, y)
    b = ExtraTreesRegressor(n_trees=2, seed=2).fit(X, y)
    assert a.dumps() != b.dumps()


def test_every_leaf_reached():
    rng = np.random.default_rng(7)
    X, y = rng.random((400, 3)), rng.normal(size=400)
    model = ExtraTreesRegressor(n_trees=6, n_min=4, seed=0).fit(X, y)
    leaves = model.feature_ < 0
    assert np.all(model.n_node_samples_[leaves] >= 1)
    internal = ~leaves
    assert np.all(model.right_[internal] == model.left_[internal] + 1)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    X, y = rng.random((300, 3)), rng.normal(size=300)
    model = ExtraTreesRegressor(n_trees=5, n_min=3, seed=4).fit(X, y)
    again = ExtraTreesRegressor.loads(model.dumps())
    probe = probe_points(X)
    assert np.array_equal(model.predict(probe), again.predict(probe))
    assert again.get_params() == model.get_params()
    assert again.dumps() == model.dumps()


def test_rejects_bad_payload():
    model = ExtraTreesRegressor(n_trees=1, seed=0).fit([[0, 0, 0], [1, 1, 1]], [0, 1])
    payload = model.to_dict()
    payload["format_version"] = 99
    with pytest.raises(ValueError):
        ExtraTreesRegressor.from_dict(payload)


def test_estimator_api():
    model = ExtraTreesRegressor(n_trees=3, k_splits=2, n_min=5, seed=1)
    assert model.get_params() == {"n_trees": 3, "k_splits": 2, "n_min": 5, "seed": 1}
    twin = clone(model)
    assert twin.get_params() == model.get_params() and twin is not model
    rng = np.random.default_rng(0)
    X = rng.random((50, 3))
    assert model.fit(X, X.sum(axis=1)).score(X, X.sum(axis=1)) > 0.5


@pytest.mark.parametrize(
    "X, y, message",
    [
        (np.empty((0, 3)), np.empty(0), "empty"),
        ([[0.0, 0.0, 0.0]], [np.nan], "finite"),
        ([[0.0, 0.0, 0.0]], [np.inf], "finite"),
        ([[np.nan, 0.0, 0.0]], [1.0], "finite"),
    ],
)
def test_fit_errors(X, y, message):
    with pytest.raises(ValueError, match=message):
        ExtraTreesRegressor(seed=0).fit(X, y)


@pytest.mark.parametrize("params", [{"n_trees": 0}, {"k_splits": 0}, {"k_splits": 4}, {"n_min": 1}])
def test_config_errors(params):
    with pytest.raises(ValueError):
        ExtraTreesRegressor(**params).fit(np.zeros((3, 3)), np.arange(3.0))


def test_predict_checks_dimension():
    model = ExtraTreesRegressor(n_trees=1, seed=0).fit(np.eye(3), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 2)))
