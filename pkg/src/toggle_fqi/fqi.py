"""Batch Fitted Q Iteration with a tree-ensemble Q function.

The fitted estimator follows the scikit-learn conventions: hyperparameters in
``__init__``, learned state in trailing-underscore attributes, ``predict``
returning the greedy action for each state row.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import TransitionSet
from .model import ACTIONS
from .regress import ExtraTreesRegressor

POLICY_FORMAT_VERSION = 1


class FittingError(RuntimeError):
    """A regressor refit failed inside the Bellman iteration."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"regression failed at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class CostWeights:
    """Weights of the linear stage cost ``w1*n1 + w2*n2 + wu*u``.

    ``w1`` stays at 1 in normal use; it exists so the whole cost can be
    rescaled. Toggling towards high ``n1`` needs ``w2 > w1``.
    """

    w2: float = 60.0
    wu: float = 1.0
    w1: float = 1.0

    def __post_init__(self):
        if not (self.w1 > 0 and self.wu >= 0 and self.w2 >= 0):
            raise ValueError("cost weights must be nonnegative (w1 > 0)")
        if not self.w2 > self.w1:
            raise ValueError(f"w2 must exceed w1 for the toggling objective, got w2={self.w2}, w1={self.w1}")

    def scaled(self, factor: float) -> "CostWeights":
        return CostWeights(w2=self.w2 * factor, wu=self.wu * factor, w1=self.w1 * factor)


def cost(state, action, weights: CostWeights) -> float:
    """Stage cost of taking ``action`` in ``state``."""
    return float(weights.w1 * state[0] + weights.w2 * state[1] + weights.wu * action)


def cost_batch(states: np.ndarray, actions, weights: CostWeights) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    return weights.w1 * states[:, 0] + weights.w2 * states[:, 1] + weights.wu * np.asarray(actions, dtype=float)


def default_n_iterations(gamma: float, epsilon_disc: float = 1e-4) -> int:
    """Smallest ``N >= 1`` with ``gamma**N < epsilon_disc``."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not 0 < epsilon_disc <= 1:
        raise ValueError("epsilon_disc must lie in (0, 1]")
    n = max(1, math.ceil(math.log(epsilon_disc) / math.log(gamma)))
    # Guard the floating-point log ratio on both sides.
    while n > 1 and gamma ** (n - 1) < epsilon_disc:
        n -= 1
    while not gamma ** n < epsilon_disc:
        n += 1
    return n


def q_inputs(states: np.ndarray, action: int) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    return np.column_stack([states, np.full(len(states), float(action))])


QFunction = Callable[[np.ndarray], np.ndarray]


def cost_q_function(weights: CostWeights) -> QFunction:
    """``Q_0 = c`` as a Q function: ``(m, 2)`` array of stage costs."""

    def q(states):
        return np.column_stack([cost_batch(states, np.full(len(states), u), weights) for u in ACTIONS])

    return q


def bellman_targets(data: TransitionSet, q_prev: QFunction, weights: CostWeights, gamma: float) -> np.ndarray:
    """``c(n, u) + gamma * min_u' Q_prev(n+, u')`` for every triplet."""
    continuation = q_prev(data.next_states).min(axis=1)
    return cost_batch(data.states, data.actions, weights) + gamma * continuation


class Policy:
    """Greedy controller over a fitted Q function.

    Ties between the two actions resolve to ``u = 0``.
    """

    def __init__(self, q_function: ExtraTreesRegressor, weights: CostWeights | None = None,
                 gamma: float | None = None, meta: dict | None = None):
        self.q_function = q_function
        self.weights = weights
        self.gamma = gamma
        self.meta = dict(meta or {})

    def q_values(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return np.column_stack([self.q_function.predict(q_inputs(states, u)) for u in ACTIONS])

    def greedy_actions(self, states) -> np.ndarray:
        # argmin returns the first minimum, i.e. action 0 on ties.
        return np.argmin(self.q_values(states), axis=1).astype(np.int64)

    def greedy_action(self, state) -> int:
        return int(self.greedy_actions([state])[0])

    def values(self, states) -> np.ndarray:
        return self.q_values(states).min(axis=1)

    def value_of(self, state) -> float:
        return float(self.values([state])[0])

    __call__ = greedy_action

    # persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "toggle-fqi-policy",
            "format_version": POLICY_FORMAT_VERSION,
            "weights": asdict(self.weights) if self.weights is not None else None,
            "gamma": self.gamma,
            "meta": self.meta,
            "q_function": self.q_function.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        if data.get("format") != "toggle-fqi-policy" or data.get("format_version") != POLICY_FORMAT_VERSION:
            raise ValueError("unsupported policy file")
        weights = CostWeights(**data["weights"]) if data.get("weights") else None
        return cls(ExtraTreesRegressor.from_dict(data["q_function"]), weights, data.get("gamma"), data.get("meta"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Policy":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"policy file not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def greedy_action(policy: Policy, state) -> int:
    return policy.greedy_action(state)


def value_of(policy: Policy, state) -> float:
    return policy.value_of(state)


def iteration_seed(base_seed, iteration: int):
    """Seed of the regressor refit at ``iteration`` (``None`` stays ``None``)."""
    if base_seed is None:
        return None
    return int(np.random.SeedSequence([int(base_seed), int(iteration)]).generate_state(1)[0])


def refit(regressor: ExtraTreesRegressor, data: TransitionSet, targets: np.ndarray, iteration: int):
    """Clone ``regressor``, reseed it for ``iteration`` and fit it to ``targets``."""
    est = clone(regressor)
    if regressor.seed is not None:
        est.set_params(seed=iteration_seed(regressor.seed, iteration))
    try:
        return est.fit(data.inputs, targets)
    except Exception as exc:
        raise FittingError(iteration, exc) from exc


class FittedQIteration(BaseEstimator):
    """Fitted Q Iteration over a fixed set of one-step transitions.

    Parameters
    ----------
    regressor : ExtraTreesRegressor, optional
        Template regressor, cloned at every iteration. Defaults to 50 trees,
        ``k_splits=3``, ``n_min=2``, seed 0.
    gamma : float
        Discount factor in (0, 1).
    n_iterations : int or None
        Number of Bellman iterations. ``None`` picks the smallest ``N`` with
        ``gamma**N < epsilon_disc``.
    weights : CostWeights, optional
        Stage cost weights; defaults to ``CostWeights()`` (w2=60, wu=1).
    epsilon_disc : float
        Discount residual used when ``n_iterations`` is ``None``.
    record_targets : bool
        Keep the regression targets of every iteration in ``targets_history_``.
    """

    def __init__(self, regressor=None, gamma=0.75, n_iterations=None, weights=None, epsilon_disc=1e-4,
                 record_targets=False):
        self.regressor = regressor
        self.gamma = gamma
        self.n_iterations = n_iterations
        self.weights = weights
        self.epsilon_disc = epsilon_disc
        self.record_targets = record_targets

    def _resolved(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        n_it = self.n_iterations
        if n_it is None:
            n_it = default_n_iterations(self.gamma, self.epsilon_disc)
        if int(n_it) < 1:
            raise ValueError("n_iterations must be >= 1")
        regressor = self.regressor if self.regressor is not None else ExtraTreesRegressor(seed=0)
        weights = self.weights if self.weights is not None else CostWeights()
        return regressor, weights, int(n_it)

    def fit(self, data: TransitionSet, y=None):
        if len(data) == 0:
            raise ValueError("empty transition set")
        regressor, weights, n_it = self._resolved()
        q_prev = cost_q_function(weights)
        history = []
        est = None
        for k in range(1, n_it + 1):
            targets = bellman_targets(data, q_prev, weights, self.gamma)
            if self.record_targets:
                history.append(targets)
            est = refit(regressor, data, targets, k)
            q_prev = Policy(est).q_values
        self.q_function_ = est
        self.n_iterations_ = n_it
        self.policy_ = Policy(est, weights, self.gamma, {"n_iterations": n_it, "n_samples": len(data)})
        if self.record_targets:
            self.targets_history_ = history
        return self

    def predict(self, X) -> np.ndarray:
        """Greedy action for each state row of ``X``."""
        check_is_fitted(self, "policy_")
        return self.policy_.greedy_actions(check_array(X, dtype=np.float64))

    def q_values(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        return self.policy_.q_values(X)


def fqi_train(data: TransitionSet, weights: CostWeights | None = None, gamma: float = 0.75,
              n_iterations: int | None = None, regressor: ExtraTreesRegressor | None = None,
              epsilon_disc: float = 1e-4) -> Policy:
    """Run Fitted Q Iteration and return the greedy policy."""
    est = FittedQIteration(regressor=regressor, gamma=gamma, n_iterations=n_iterations, weights=weights,
                           epsilon_disc=epsilon_disc)
    return est.fit(data).policy_
