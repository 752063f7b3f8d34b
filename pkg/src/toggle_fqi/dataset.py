"""One-step transition sets: generation, merging and text persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import (
    ToggleParams,
    averaged_transition_batch,
    deterministic_step_batch,
)

FORMAT_VERSION = 1
PROVENANCES = ("simulated-deterministic", "simulated-stochastic", "online-measured")
COLUMNS = ("n1", "n2", "u", "n1_next", "n2_next")


class TransitionFileError(ValueError):
    """Raised for malformed transition-set files."""


@dataclass(frozen=True, eq=False)
class TransitionSet:
    """Ordered multiset of ``(state, action, next_state)`` triplets.

    Stored column-wise: ``states`` and ``next_states`` are ``(m, 2)`` float
    arrays, ``actions`` an ``(m,)`` integer array. The arrays are made
    read-only on construction.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    provenance: str = "simulated-deterministic"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64).reshape(-1, 2)
        next_states = np.array(self.next_states, dtype=np.float64).reshape(-1, 2)
        actions = np.array(self.actions, dtype=np.int64).reshape(-1)
        if not (len(states) == len(actions) == len(next_states)):
            raise ValueError("states, actions and next_states must have equal length")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for name, arr in (("states", states), ("next_states", next_states)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        if np.any((actions != 0) & (actions != 1)):
            raise ValueError("actions must be 0 or 1")
        for arr in (states, actions, next_states):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "next_states", next_states)

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        for s, u, n in zip(self.states, self.actions, self.next_states):
            yield (float(s[0]), float(s[1])), int(u), (float(n[0]), float(n[1]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionSet):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and self.metadata == other.metadata
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.next_states, other.next_states)
        )

    @property
    def inputs(self) -> np.ndarray:
        """Regression inputs ``(n1, n2, u)``, one row per triplet."""
        return np.column_stack([self.states, self.actions.astype(np.float64)])

    @classmethod
    def empty(cls, provenance: str = "online-measured") -> "TransitionSet":
        return cls(np.empty((0, 2)), np.empty(0, dtype=np.int64), np.empty((0, 2)), provenance)

    @classmethod
    def from_triplets(cls, triplets, provenance: str = "online-measured", metadata=None) -> "TransitionSet":
        triplets = list(triplets)
        if not triplets:
            return cls.empty(provenance)
        states, actions, nexts = zip(*triplets)
        return cls(np.asarray(states), np.asarray(actions), np.asarray(nexts), provenance, dict(metadata or {}))


# samplers -------------------------------------------------------------------

def default_state_box(params: ToggleParams) -> tuple[tuple[float, float], tuple[float, float]]:
    """Forward-invariant box ``[0, (c1+b)/d1] x [0, c2/d2]`` of the dynamics."""
    if params.d1 <= 0 or params.d2 <= 0:
        raise ValueError("the default state box needs positive degradation rates")
    return ((0.0, (params.c1 + params.b) / params.d1), (0.0, params.c2 / params.d2))


def uniform_box_sampler(box) -> Callable[[np.random.Generator, int], np.ndarray]:
    (lo1, hi1), (lo2, hi2) = box
    if lo1 < 0 or lo2 < 0 or hi1 < lo1 or hi2 < lo2:
        raise ValueError(f"state box {box} leaves the nonnegative quadrant or is inverted")

    def sample(rng: np.random.Generator, size: int) -> np.ndarray:
        return np.column_stack([rng.uniform(lo1, hi1, size), rng.uniform(lo2, hi2, size)])

    sample.box = box
    return sample


def bernoulli_action_sampler(p_on: float = 0.5) -> Callable[[np.random.Generator, int], np.ndarray]:
    if not 0.0 <= p_on <= 1.0:
        raise ValueError("p_on must lie in [0, 1]")

    def sample(rng: np.random.Generator, size: int) -> np.ndarray:
        return (rng.random(size) < p_on).astype(np.int64)

    sample.p_on = p_on
    return sample


def generate(params: ToggleParams, n_trajectories: int = 5000, samples_per_trajectory: int = 50,
             mode: str = "deterministic", init_sampler=None, action_sampler=None, seed=None,
             n_traj: int = 100, dt: float = 1.0) -> TransitionSet:
    """Simulate trajectories under random actions and record every step.

    All trajectories advance in lockstep; the result is ordered trajectory by
    trajectory. In stochastic mode each step is the mean of ``n_traj`` SSA
    runs of length ``dt``.
    """
    if n_trajectories < 1 or samples_per_trajectory < 1:
        raise ValueError("trajectory counts must be >= 1")
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"mode must be 'deterministic' or 'stochastic', got {mode!r}")
    init_sampler = init_sampler or uniform_box_sampler(default_state_box(params))
    action_sampler = action_sampler or bernoulli_action_sampler(0.5)
    rng = np.random.default_rng(seed)

    n, T = n_trajectories, samples_per_trajectory
    states = np.empty((n, T, 2))
    actions = np.empty((n, T), dtype=np.int64)
    nexts = np.empty((n, T, 2))
    current = np.asarray(init_sampler(rng, n), dtype=float)
    if current.shape != (n, 2) or np.any(current < 0) or not np.all(np.isfinite(current)):
        raise ValueError("init_sampler must return finite nonnegative (n, 2) states")
    for t in range(T):
        u = np.asarray(action_sampler(rng, n))
        if u.shape != (n,) or np.any((u != 0) & (u != 1)):
            raise ValueError("action_sampler must return 0/1 actions")
        if mode == "deterministic":
            nxt = deterministic_step_batch(current, u, params)
        else:
            nxt = averaged_transition_batch(current, u, params, n_traj, dt, rng)
        states[:, t], actions[:, t], nexts[:, t] = current, u, nxt
        current = nxt

    metadata = {
        "params": params.as_dict(),
        "seed": seed,
        "n_trajectories": n,
        "samples_per_trajectory": T,
    }
    if mode == "stochastic":
        metadata.update(n_traj=n_traj, dt=dt)
    provenance = "simulated-deterministic" if mode == "deterministic" else "simulated-stochastic"
    return TransitionSet(states.reshape(-1, 2), actions.reshape(-1), nexts.reshape(-1, 2), provenance, metadata)


def merge(current: TransitionSet, new: TransitionSet) -> TransitionSet:
    """Multiset union: ``current``'s triplets followed by ``new``'s.

    Provenance and metadata are taken from ``current`` unless it is empty.
    """
    if len(current) == 0:
        return new
    if len(new) == 0:
        return current
    return TransitionSet(
        np.concatenate([current.states, new.states]),
        np.concatenate([current.actions, new.actions]),
        np.concatenate([current.next_states, new.next_states]),
        current.provenance,
        dict(current.metadata),
    )


# persistence ----------------------------------------------------------------
#
# Layout:
#   # format-version: 1
#   # provenance: simulated-deterministic
#   # params: {"c1": 30.0, ...}
#   # seed: 7
#   # ... any other metadata key, value JSON-encoded
#   n1,n2,u,n1_next,n2_next
#   <one row per triplet>

def save(tset: TransitionSet, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# format-version: {FORMAT_VERSION}\n")
        fh.write(f"# provenance: {tset.provenance}\n")
        for key in sorted(tset.metadata):
            fh.write(f"# {key}: {json.dumps(tset.metadata[key], sort_keys=True)}\n")
        fh.write(",".join(COLUMNS) + "\n")
        for (s1, s2), u, (x1, x2) in zip(tset.states.tolist(), tset.actions.tolist(), tset.next_states.tolist()):
            fh.write(f"{s1!r},{s2!r},{u},{x1!r},{x2!r}\n")


def load(path) -> TransitionSet:
    path = Path(path)
    header: dict = {}
    rows = []
    saw_columns = False
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition(":")
                if not sep:
                    raise TransitionFileError(f"{path}:{lineno}: header line without 'key: value'")
                header[key.strip()] = value.strip()
                continue
            if not saw_columns:
                if tuple(c.strip() for c in line.split(",")) != COLUMNS:
                    raise TransitionFileError(f"{path}:{lineno}: expected column header {','.join(COLUMNS)}")
                saw_columns = True
                continue
            rows.append(_parse_row(line, lineno, path))
    if not rows:
        raise TransitionFileError(f"{path}: empty transition set")
    if header.get("format-version") != str(FORMAT_VERSION):
        raise TransitionFileError(f"{path}: unsupported format-version {header.get('format-version')!r}")
    provenance = header.pop("provenance", None)
    if provenance not in PROVENANCES:
        raise TransitionFileError(f"{path}: field 'provenance' has invalid value {provenance!r}")
    header.pop("format-version")
    metadata = {}
    for key, raw in header.items():
        try:
            metadata[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TransitionFileError(f"{path}: header field {key!r} is not valid JSON") from exc
    arr = np.array([r[0] for r in rows])
    acts = np.array([r[1] for r in rows], dtype=np.int64)
    nxt = np.array([r[2] for r in rows])
    return TransitionSet(arr, acts, nxt, provenance, metadata)


def _parse_row(line: str, lineno: int, path: Path):
    parts = line.split(",")
    if len(parts) != len(COLUMNS):
        raise TransitionFileError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(parts)}")
    values = []
    for name, raw in zip(COLUMNS, parts):
        try:
            v = float(raw)
        except ValueError:
            raise TransitionFileError(f"{path}:{lineno}: field {name!r} is not a number: {raw!r}") from None
        if name == "u":
            if v not in (0.0, 1.0):
                raise TransitionFileError(f"{path}:{lineno}: field 'u' must be 0 or 1, got {raw!r}")
        elif not np.isfinite(v) or v < 0:
            raise TransitionFileError(f"{path}:{lineno}: field {name!r} must be a nonnegative number, got {raw!r}")
        values.append(v)
    return (values[0], values[1]), int(values[2]), (values[3], values[4])
