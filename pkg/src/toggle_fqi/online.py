"""Closed-loop rollouts and online adaptation of a batch-trained policy.

The online loop acts with an epsilon-greedy rule, appends the measured
transitions to the historical set (plain union), and runs a few Bellman
refit sweeps over the merged set after every batch.

Note on epsilon: here ``epsilon`` is the probability of acting *greedily*;
with probability ``1 - epsilon`` a uniformly random action is taken.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TransitionSet, merge
from .fqi import CostWeights, FittedQIteration, Policy, bellman_targets, cost, refit
from .model import (
    ToggleParams,
    TargetRegion,
    averaged_transition_batch,
    deterministic_step,
    validate_action,
    validate_state,
)


# environments ---------------------------------------------------------------

@dataclass(frozen=True)
class DeterministicEnv:
    params: ToggleParams

    def step(self, state, action, rng=None):
        return deterministic_step(state, action, self.params)

    def describe(self) -> dict:
        return {"kind": "deterministic", "params": self.params.as_dict()}


@dataclass(frozen=True)
class StochasticEnv:
    """One sampling period = mean endpoint of ``n_traj`` SSA runs of length ``dt``."""

    params: ToggleParams
    n_traj: int = 100
    dt: float = 1.0

    def step(self, state, action, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        out = averaged_transition_batch(np.asarray([state], dtype=float), np.array([action]), self.params,
                                        self.n_traj, self.dt, rng)
        return (float(out[0, 0]), float(out[0, 1]))

    def describe(self) -> dict:
        return {"kind": "stochastic", "params": self.params.as_dict(), "n_traj": self.n_traj, "dt": self.dt}


def make_env(params: ToggleParams, mode: str, n_traj: int = 100, dt: float = 1.0):
    if mode == "deterministic":
        return DeterministicEnv(params)
    if mode == "stochastic":
        return StochasticEnv(params, n_traj, dt)
    raise ValueError(f"unknown environment mode {mode!r}")


# epsilon schedule ------------------------------------------------------------

@dataclass(frozen=True)
class EpsilonSchedule:
    """Probability of the greedy branch at step ``t``.

    ``constant`` keeps ``start``; ``linear-ramp`` moves linearly from
    ``start`` to ``end`` over ``ramp_steps`` steps and then stays at ``end``.
    """

    kind: str = "linear-ramp"
    start: float = 0.3
    end: float = 1.0
    ramp_steps: int = 100

    def __post_init__(self):
        if self.kind not in ("constant", "linear-ramp"):
            raise ValueError(f"unknown epsilon schedule kind {self.kind!r}")
        if not (0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0):
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.kind == "linear-ramp" and self.end < self.start:
            raise ValueError("a linear ramp must be non-decreasing (end >= start)")
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be >= 0")

    def __call__(self, t: int) -> float:
        if self.kind == "constant" or self.ramp_steps == 0:
            return self.start if self.kind == "constant" else self.end
        if t >= self.ramp_steps:
            return self.end
        frac = max(t, 0) / self.ramp_steps
        return min(self.start + (self.end - self.start) * frac, self.end)

    @classmethod
    def greedy(cls) -> "EpsilonSchedule":
        return cls("constant", 1.0, 1.0, 0)


@dataclass(frozen=True)
class OnlineConfig:
    n_inner: int = 1
    batch_size: int = 1
    epsilon: EpsilonSchedule = field(default_factory=lambda: EpsilonSchedule(ramp_steps=100))
    horizon: int = 200
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.n_inner < 0:
            errors.append("n_inner must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.horizon < 1:
            errors.append("horizon must be >= 1")
        if self.horizon < self.batch_size:
            errors.append("horizon must be >= batch_size")
        if errors:
            raise ValueError("; ".join(errors))


# episode log -----------------------------------------------------------------

LOG_COLUMNS = ("t", "n1", "n2", "u", "greedy_flag", "cost", "n1_next", "n2_next")


@dataclass
class EpisodeLog:
    gamma: float
    meta: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    error: str | None = None

    def append(self, t, state, action, greedy, stage_cost, next_state):
        self.records.append((int(t), float(state[0]), float(state[1]), int(action), bool(greedy),
                             float(stage_cost), float(next_state[0]), float(next_state[1])))

    def __len__(self):
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        return np.array([(r[1], r[2]) for r in self.records]).reshape(-1, 2)

    @property
    def next_states(self) -> np.ndarray:
        return np.array([(r[6], r[7]) for r in self.records]).reshape(-1, 2)

    @property
    def actions(self) -> np.ndarray:
        return np.array([r[3] for r in self.records], dtype=np.int64)

    @property
    def greedy_flags(self) -> np.ndarray:
        return np.array([r[4] for r in self.records], dtype=bool)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r[5] for r in self.records])

    @property
    def cumulative_cost(self) -> float:
        total = 0.0
        for t, c in enumerate(self.costs):
            total += self.gamma ** t * c
        return total

    def visited(self) -> np.ndarray:
        """Initial state followed by every successor, ``(horizon + 1, 2)``."""
        if not self.records:
            return np.empty((0, 2))
        return np.vstack([self.states[:1], self.next_states])

    def steps_to_target(self, region: TargetRegion) -> int | None:
        """First step after which the trajectory stays inside ``region``.

        ``None`` if the final state lies outside.
        """
        visited = self.visited()
        inside = [region.contains(s) for s in visited]
        if not inside or not inside[-1]:
            return None
        k = len(inside) - 1
        while k > 0 and inside[k - 1]:
            k -= 1
        return k

    def transitions(self) -> TransitionSet:
        return TransitionSet(self.states, self.actions, self.next_states, "online-measured")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# gamma: {self.gamma!r}\n")
        for key in sorted(self.meta):
            buf.write(f"# {key}: {json.dumps(self.meta[key], sort_keys=True)}\n")
        buf.write(",".join(LOG_COLUMNS) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for t, n1, n2, u, g, c, x1, x2 in self.records:
            w.writerow([t, repr(n1), repr(n2), u, int(g), repr(c), repr(x1), repr(x2)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        gamma = None
        meta = {}
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                if key.strip() == "gamma":
                    gamma = float(value)
                else:
                    meta[key.strip()] = json.loads(value)
            elif line.startswith("t,"):
                continue
            elif line:
                t, n1, n2, u, g, c, x1, x2 = line.split(",")
                records.append((int(t), float(n1), float(n2), int(u), bool(int(g)), float(c), float(x1),
                                float(x2)))
        return cls(gamma=gamma, meta=meta, records=records)


# control loops ---------------------------------------------------------------

def epsilon_greedy_action(policy: Policy, state, epsilon_t: float, rng: np.random.Generator) -> tuple[int, bool]:
    """Greedy action with probability ``epsilon_t``, else uniform over {0, 1}."""
    if not 0.0 <= epsilon_t <= 1.0:
        raise ValueError("epsilon_t must lie in [0, 1]")
    if rng.random() < epsilon_t:
        return policy.greedy_action(state), True
    return int(rng.integers(2)), False


def _streams(seed):
    env_ss, policy_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(policy_ss)


def closed_loop_run(policy: Policy, env, weights: CostWeights, horizon: int, initial_state, seed=0,
                    gamma: float = 0.75) -> EpisodeLog:
    """Pure exploitation rollout of ``policy`` on ``env``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    env_rng, _ = _streams(seed)
    state = tuple(float(v) for v in validate_state(initial_state))
    log = EpisodeLog(gamma=gamma, meta={"env": env.describe(), "seed": seed, "horizon": horizon})
    for t in range(horizon):
        action = policy.greedy_action(state)
        try:
            nxt = env.step(state, action, env_rng)
        except Exception as exc:
            log.error = f"environment step {t} failed: {exc}"
            raise EnvironmentStepError(log, exc) from exc
        log.append(t, state, action, True, cost(state, action, weights), nxt)
        state = nxt
    return log


class EnvironmentStepError(RuntimeError):
    """Environment failure; ``partial_log`` holds every completed step."""

    def __init__(self, partial_log: EpisodeLog, cause: Exception):
        super().__init__(partial_log.error or str(cause))
        self.partial_log = partial_log


def online_run(initial_policy: Policy, historical: TransitionSet, env, fqi: FittedQIteration,
               online_cfg: OnlineConfig, initial_state):
    """Adapt ``initial_policy`` while controlling ``env``.

    ``fqi`` supplies the discount factor, cost weights and regressor
    template. After each batch of ``online_cfg.batch_size`` steps the batch
    is appended to the current transition set and ``online_cfg.n_inner``
    Bellman refit sweeps run over the whole set, each starting from the
    current Q function.

    Returns ``(policy, log, current_set)``.
    """
    if len(historical) == 0:
        raise ValueError("historical transition set is empty")
    regressor, weights, _ = fqi._resolved()
    gamma = fqi.gamma
    env_rng, policy_rng = _streams(online_cfg.seed)
    policy = initial_policy
    current = historical
    state = tuple(float(v) for v in validate_state(initial_state))
    log = EpisodeLog(gamma=gamma, meta={
        "env": env.describe(), "seed": online_cfg.seed, "horizon": online_cfg.horizon,
        "batch_size": online_cfg.batch_size, "n_inner": online_cfg.n_inner,
        "epsilon": asdict(online_cfg.epsilon),
    })
    t = 0
    sweep = 0
    while t < online_cfg.horizon:
        batch = []
        for _ in range(min(online_cfg.batch_size, online_cfg.horizon - t)):
            action, greedy = epsilon_greedy_action(policy, state, online_cfg.epsilon(t), policy_rng)
            try:
                nxt = env.step(state, action, env_rng)
            except Exception as exc:
                log.error = f"environment step {t} failed: {exc}"
                raise EnvironmentStepError(log, exc) from exc
            log.append(t, state, action, greedy, cost(state, action, weights), nxt)
            batch.append((state, action, nxt))
            state = nxt
            t += 1
        current = merge(current, TransitionSet.from_triplets(batch))
        for _ in range(online_cfg.n_inner):
            sweep += 1
            targets = bellman_targets(current, policy.q_values, weights, gamma)
            est = refit(regressor, current, targets, 10_000 + sweep)
            policy = Policy(est, weights, gamma, {"online_sweeps": sweep, "n_samples": len(current)})
    return policy, log, current


def default_epsilon(horizon: int) -> EpsilonSchedule:
    """Ramp from 0.3 to 1.0 over the first half of the horizon."""
    return EpsilonSchedule("linear-ramp", 0.3, 1.0, max(1, math.ceil(horizon / 2)))
