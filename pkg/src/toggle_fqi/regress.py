"""Extremely randomized trees regression.

A small, self-contained Extra-Trees ensemble with a scikit-learn compatible
estimator interface. Tree construction and traversal are compiled with numba;
the fitted trees are stored as flat node arrays so that they serialise
exactly.
"""
from __future__ import annotations

import json

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FORMAT_VERSION = 1


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_LEFT_SALT = np.uint64(0x632BE59BD9B4E019)
_RIGHT_SALT = np.uint64(0x8CB92BA72F3D8DD7)


@numba.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _next(state):
    """splitmix64 step: returns (new_state, 64 random bits)."""
    state = state + _GOLDEN
    return state, _mix64(state)


@numba.njit(cache=True)
def _uniform(state):
    state, z = _next(state)
    return state, np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _randint(state, n):
    state, z = _next(state)
    return state, np.int64(z % np.uint64(n))


@numba.njit(cache=True)
def _build_tree(X, y, k_splits, n_min, seed):
    # Rows of Xw/yw are partitioned in place so every node owns a contiguous
    # slice [a, b). Each node draws from its own stream keyed by its path from
    # the root, so the tree does not depend on traversal order and raising
    # n_min only prunes it.
    n, d = X.shape
    Xw = X.copy()
    yw = y.copy()
    cap = 2 * n
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    n_samples = np.zeros(cap, np.int64)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_key = np.empty(cap, np.uint64)
    st_node[0], st_lo[0], st_hi[0] = 0, 0, n
    st_key[0] = _mix64(np.uint64(seed) + _GOLDEN)
    sp = 1
    node_count = 1
    lo_f = np.empty(d)
    hi_f = np.empty(d)
    cand = np.empty(d, np.int64)

    while sp > 0:
        sp -= 1
        node, a, b, key = st_node[sp], st_lo[sp], st_hi[sp], st_key[sp]
        rs = key
        m = b - a
        s = 0.0
        ymin = yw[a]
        ymax = ymin
        for i in range(a, b):
            v = yw[i]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        n_samples[node] = m
        if ymin == ymax:
            value[node] = ymin
            continue
        value[node] = s / m
        if m < n_min:
            continue

        for f in range(d):
            lo_f[f] = Xw[a, f]
            hi_f[f] = Xw[a, f]
        for i in range(a + 1, b):
            for f in range(d):
                v = Xw[i, f]
                if v < lo_f[f]:
                    lo_f[f] = v
                elif v > hi_f[f]:
                    hi_f[f] = v
        nc = 0
        for f in range(d):
            if hi_f[f] > lo_f[f]:
                cand[nc] = f
                nc += 1
        if nc == 0:
            continue

        k = min(k_splits, nc)
        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        for c in range(k):
            rs, r = _randint(rs, nc - c)
            r += c
            tmp = cand[c]
            cand[c] = cand[r]
            cand[r] = tmp
            f = cand[c]
            rs, u = _uniform(rs)
            t = lo_f[f] + u * (hi_f[f] - lo_f[f])
            if t >= hi_f[f]:
                t = lo_f[f]
            sl = 0.0
            nl = 0
            for i in range(a, b):
                # branch-free: the comparison is unpredictable
                go_left = Xw[i, f] <= t
                sl += yw[i] * go_left
                nl += go_left
            sr = s - sl
            nr = m - nl
            # Maximising this is maximising variance reduction.
            score = sl * sl / nl + sr * sr / nr
            if score > best_score:
                best_score = score
                best_f = f
                best_t = t

        i = a
        j = b - 1
        while i <= j:
            if Xw[i, best_f] <= best_t:
                i += 1
            else:
                for f in range(d):
                    tmp_x = Xw[i, f]
                    Xw[i, f] = Xw[j, f]
                    Xw[j, f] = tmp_x
                tmp_y = yw[i]
                yw[i] = yw[j]
                yw[j] = tmp_y
                j -= 1
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = node_count
        right[node] = node_count + 1
        st_node[sp], st_lo[sp], st_hi[sp] = node_count + 1, i, b
        st_key[sp] = _mix64(key ^ _RIGHT_SALT)
        sp += 1
        st_node[sp], st_lo[sp], st_hi[sp] = node_count, a, i
        st_key[sp] = _mix64(key ^ _LEFT_SALT)
        sp += 1
        node_count += 2

    return (feature[:node_count].copy(), threshold[:node_count].copy(), left[:node_count].copy(),
            right[:node_count].copy(), value[:node_count].copy(), n_samples[:node_count].copy())


@numba.njit(cache=True)
def _predict(X, roots, nodes):
    # nodes rows: (feature, threshold, left child, value); right child = left + 1.
    # Tree-outer loop keeps one tree hot in cache. The mean is accumulated as
    # offsets from the first tree's value so equal leaf values average exactly.
    n = X.shape[0]
    base = np.zeros(n)
    out = np.zeros(n)
    n_trees = roots.shape[0]
    for t in range(n_trees):
        root = roots[t]
        for i in range(n):
            node = root
            f = int(nodes[node, 0])
            while f >= 0:
                child = int(nodes[node, 2])
                node = child if X[i, f] <= nodes[node, 1] else child + 1
                f = int(nodes[node, 0])
            if t == 0:
                base[i] = nodes[node, 3]
            else:
                out[i] += nodes[node, 3] - base[i]
    return base + out / n_trees


def _pack(feature, threshold, left, value):
    return np.ascontiguousarray(np.column_stack([feature, threshold, left, value]).astype(np.float64))


class ExtraTreesRegressor(RegressorMixin, BaseEstimator):
    """Ensemble of extremely randomized regression trees.

    Parameters
    ----------
    n_trees : int
        Number of trees in the ensemble.
    k_splits : int
        Number of random (feature, threshold) candidates drawn at each node;
        features are drawn without replacement among those that vary in the
        node.
    n_min : int
        Minimum number of samples required to split a node. Larger values
        give fewer, larger leaves and a smoother fit.
    seed : int or None
        Seed for the per-tree random streams.
    """

    def __init__(self, n_trees=50, k_splits=3, n_min=2, seed=None):
        self.n_trees = n_trees
        self.k_splits = k_splits
        self.n_min = n_min
        self.seed = seed

    def _check_config(self, n_features):
        errors = []
        if int(self.n_trees) < 1:
            errors.append("n_trees must be >= 1")
        if not 1 <= int(self.k_splits) <= n_features:
            errors.append(f"k_splits must be in [1, {n_features}]")
        if int(self.n_min) < 2:
            errors.append("n_min must be >= 2")
        if errors:
            raise ValueError("; ".join(errors))

    def fit(self, X, y):
        if len(X) == 0:
            raise ValueError("empty training set")
        if not np.all(np.isfinite(np.asarray(y, dtype=np.float64))):
            raise ValueError("targets must be finite")
        if not np.all(np.isfinite(np.asarray(X, dtype=np.float64))):
            raise ValueError("inputs must be finite")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self._check_config(X.shape[1])
        X = np.ascontiguousarray(X)
        y = np.ascontiguousarray(y)

        tree_seeds = np.random.SeedSequence(self.seed).generate_state(int(self.n_trees))
        trees = [_build_tree(X, y, int(self.k_splits), int(self.n_min), int(s)) for s in tree_seeds]
        self._set_trees(trees)
        self.n_features_in_ = X.shape[1]
        return self

    def _set_trees(self, trees):
        sizes = np.array([len(t[0]) for t in trees], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        feature, threshold, left, right, value, n_samples = (
            np.concatenate([t[i] for t in trees]) for i in range(6)
        )
        for off, size in zip(offsets, sizes):
            sl = slice(off, off + size)
            internal = left[sl] >= 0
            left[sl][internal] += off
            right[sl][internal] += off
        self.roots_ = offsets
        self.feature_ = feature
        self.threshold_ = threshold
        self.left_ = left
        self.right_ = right
        self.value_ = value
        self.n_node_samples_ = n_samples
        self._nodes = _pack(feature, threshold, left, value)

    def predict(self, X):
        check_is_fitted(self, "roots_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _predict(np.ascontiguousarray(X), self.roots_, self._nodes)

    def predict_per_tree(self, X):
        """Predictions of each tree separately, shape ``(n_trees, n_samples)``."""
        check_is_fitted(self, "roots_")
        X = np.ascontiguousarray(check_array(X, dtype=np.float64))
        return np.stack([
            _predict(X, self.roots_[i:i + 1], self._nodes)
            for i in range(len(self.roots_))
        ])

    @property
    def n_leaves_(self) -> int:
        check_is_fitted(self, "roots_")
        return int(np.sum(self.feature_ < 0))

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "roots_")
        return {
            "format": "extra-trees",
            "format_version": FORMAT_VERSION,
            "params": self.get_params(),
            "n_features": int(self.n_features_in_),
            "roots": self.roots_.tolist(),
            "feature": self.feature_.tolist(),
            "threshold": self.threshold_.tolist(),
            "left": self.left_.tolist(),
            "right": self.right_.tolist(),
            "value": self.value_.tolist(),
            "n_node_samples": self.n_node_samples_.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExtraTreesRegressor":
        if data.get("format") != "extra-trees":
            raise ValueError("not an extra-trees record")
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {data.get('format_version')!r}")
        est = cls(**data["params"])
        est.n_features_in_ = int(data["n_features"])
        est.roots_ = np.asarray(data["roots"], dtype=np.int64)
        est.feature_ = np.asarray(data["feature"], dtype=np.int64)
        est.threshold_ = np.asarray(data["threshold"], dtype=np.float64)
        est.left_ = np.asarray(data["left"], dtype=np.int64)
        est.right_ = np.asarray(data["right"], dtype=np.int64)
        est.value_ = np.asarray(data["value"], dtype=np.float64)
        est.n_node_samples_ = np.asarray(data["n_node_samples"], dtype=np.int64)
        internal = est.left_ >= 0
        if np.any(est.right_[internal] != est.left_[internal] + 1):
            raise ValueError("right child must directly follow left child")
        est._nodes = _pack(est.feature_, est.threshold_, est.left_, est.value_)
        return est

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ExtraTreesRegressor":
        return cls.from_dict(json.loads(text))
