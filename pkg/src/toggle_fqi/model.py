"""Genetic toggle switch dynamics.

Two views of the same two-protein network are provided:

* a discrete-time deterministic map (:func:`deterministic_step`), and
* the stochastic reaction network with four channels, simulated exactly by the
  Gillespie direct method (:func:`gillespie_run`) or averaged over an ensemble
  of short runs (:func:`averaged_transition`).

States are ``(n1, n2)`` pairs, actions are ``0`` or ``1`` (light pulse off/on).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence, Union

import numpy as np

__all__ = [
    "ACTIONS",
    "STOICHIOMETRY",
    "ToggleParams",
    "PRESETS",
    "preset",
    "deterministic_step",
    "propensities",
    "gillespie_run",
    "SSATrajectory",
    "averaged_transition",
    "averaged_transition_batch",
    "fixed_points",
    "TargetRegion",
    "target_region",
    "validate_state",
    "validate_action",
]

ACTIONS = (0, 1)

# Channel order: production-1, degradation-1, production-2, degradation-2.
STOICHIOMETRY = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.int64)


@dataclass(frozen=True)
class ToggleParams:
    """Constants of the two-gene toggle switch.

    ``c1, c2`` are synthesis rates, ``alpha1, alpha2`` cooperativity
    exponents, ``d1, d2`` degradation rates and ``b`` the number of
    protein-1 molecules added per light pulse.
    """

    c1: float
    c2: float
    alpha1: float
    alpha2: float
    d1: float
    d2: float
    b: float

    # Rates may be zero so degenerate networks (pure birth, pure death,
    # absorbing origin) can be expressed; only the exponents must be positive.
    def __post_init__(self):
        bad = [
            f.name
            for f in fields(self)
            if not math.isfinite(getattr(self, f.name))
            or (getattr(self, f.name) <= 0 if f.name.startswith("alpha") else getattr(self, f.name) < 0)
        ]
        if bad:
            raise ValueError(f"invalid ToggleParams fields: {', '.join(bad)}")

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "setting-one": ToggleParams(c1=30.0, c2=10.0, alpha1=1.0, alpha2=3.0, d1=1.0, d2=1.0, b=20.0),
    "setting-two": ToggleParams(c1=40.0, c2=60.0, alpha1=3.0, alpha2=1.0, d1=1.0, d2=1.0, b=20.0),
}


def preset(name: str) -> ToggleParams:
    """Return the named parameter preset (``setting-one`` or ``setting-two``)."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


def validate_state(state, integer: bool = False) -> np.ndarray:
    s = np.asarray(state, dtype=float)
    if s.shape != (2,):
        raise ValueError(f"state must be a pair (n1, n2), got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError(f"state must be finite and nonnegative, got {tuple(s)}")
    if integer and np.any(s != np.round(s)):
        raise ValueError(f"stochastic simulation needs integer counts, got {tuple(s)}")
    return s


def validate_action(action) -> int:
    if action not in ACTIONS:
        raise ValueError(f"action must be 0 or 1, got {action!r}")
    return int(action)


def _synthesis(n1, n2, p: ToggleParams):
    g1 = p.c1 / (1.0 + np.power(n2, p.alpha2))
    g2 = p.c2 / (1.0 + np.power(n1, p.alpha1))
    return g1, g2


def deterministic_step(state, action: int, params: ToggleParams) -> tuple[float, float]:
    """Advance the deterministic map by one sampling period.

    The increment ``g_i(n) - d_i n_i (+ b u)`` is added to the current state
    (unit-step discretisation of the mean dynamics) and the result is clamped
    at zero.
    """
    n1, n2 = validate_state(state).tolist()
    action = validate_action(action)
    g1, g2 = _synthesis(n1, n2, params)
    nxt1 = n1 + g1 - params.d1 * n1 + params.b * action
    nxt2 = n2 + g2 - params.d2 * n2
    return (max(0.0, float(nxt1)), max(0.0, float(nxt2)))


def deterministic_step_batch(states: np.ndarray, actions: np.ndarray, params: ToggleParams) -> np.ndarray:
    """Vectorised :func:`deterministic_step` over rows of ``states``."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    n1, n2 = states[:, 0], states[:, 1]
    g1, g2 = _synthesis(n1, n2, params)
    out = np.empty_like(states)
    out[:, 0] = n1 + g1 - params.d1 * n1 + params.b * actions
    out[:, 1] = n2 + g2 - params.d2 * n2
    np.maximum(out, 0.0, out=out)
    return out


def propensities(state, action: int, params: ToggleParams) -> np.ndarray:
    """Rates of the four reaction channels in fixed order.

    Returns ``(g1 + b u, d1 n1, g2, d2 n2)``.
    """
    n1, n2 = validate_state(state).tolist()
    action = validate_action(action)
    g1, g2 = _synthesis(n1, n2, params)
    return np.array([g1 + params.b * action, params.d1 * n1, g2, params.d2 * n2])


def _propensity_matrix(n1, n2, u, p: ToggleParams) -> np.ndarray:
    g1, g2 = _synthesis(n1, n2, p)
    return np.stack([g1 + p.b * u, p.d1 * n1, g2, p.d2 * n2], axis=-1)


ActionSchedule = Union[int, Sequence[tuple[float, int]]]


def _schedule_breakpoints(schedule: ActionSchedule) -> list[tuple[float, int]]:
    if isinstance(schedule, (int, np.integer)):
        return [(0.0, validate_action(int(schedule)))]
    points = sorted((float(t), validate_action(int(u))) for t, u in schedule)
    if not points or points[0][0] > 0.0:
        raise ValueError("action schedule must define the action at t=0")
    return points


@dataclass
class SSATrajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        """State holding at time ``t`` (right-continuous)."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.states[max(i, 0)]


def gillespie_run(initial, action_schedule: ActionSchedule, params: ToggleParams, t_end: float,
                  seed=None) -> SSATrajectory:
    """Simulate one exact trajectory with the direct method.

    ``action_schedule`` is either a constant action or a list of
    ``(start_time, action)`` breakpoints. The returned trajectory starts with
    the initial state at time 0 and ends with the state held at ``t_end``.
    """
    state = validate_state(initial, integer=True).astype(np.int64)
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    schedule = _schedule_breakpoints(action_schedule)
    rng = np.random.default_rng(seed)

    c1, c2, a1, a2 = params.c1, params.c2, params.alpha1, params.alpha2
    d1, d2, b = params.d1, params.d2, params.b
    n1, n2 = int(state[0]), int(state[1])
    times = [0.0]
    path = [(n1, n2)]
    t = 0.0
    k = 0
    while True:
        next_switch = schedule[k + 1][0] if k + 1 < len(schedule) else math.inf
        horizon = min(next_switch, t_end)
        # same channel order and arithmetic as propensities()
        p1 = c1 / (1.0 + float(n2) ** a2) + b * schedule[k][1]
        p2 = d1 * n1
        p3 = c2 / (1.0 + float(n1) ** a1)
        p4 = d2 * n2
        a0 = p1 + p2 + p3 + p4
        e = rng.standard_exponential()
        tau = e / a0 if a0 > 0 else math.inf
        if t + tau >= horizon:
            # No event before the next action change or the end; memorylessness
            # lets us restart the clock there.
            if horizon >= t_end:
                break
            t = horizon
            k += 1
            continue
        t += tau
        r = rng.random() * a0
        if r < p1:
            n1 += 1
        elif r < p1 + p2:
            n1 -= 1
        elif r < p1 + p2 + p3:
            n2 += 1
        else:
            n2 -= 1
        times.append(t)
        path.append((n1, n2))
    times.append(float(t_end))
    path.append((n1, n2))
    return SSATrajectory(np.asarray(times), np.asarray(path, dtype=np.int64))


def _ensemble_endpoints(n1: np.ndarray, n2: np.ndarray, u: np.ndarray, params: ToggleParams,
                        dt: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Run independent lanes of the direct method for ``dt`` time units.

    Random numbers are drawn for active lanes only, in lane order: one
    exponential per lane, then one uniform per lane that fires. With a
    single lane this is the same draw sequence as :func:`gillespie_run`.
    """
    n1 = n1.astype(float).copy()
    n2 = n2.astype(float).copy()
    u = np.asarray(u, dtype=float)
    t = np.zeros(n1.shape[0])
    active = np.arange(n1.shape[0])
    while active.size:
        a = _propensity_matrix(n1[active], n2[active], u[active], params)
        a0 = a.sum(axis=1)
        with np.errstate(divide="ignore"):
            scale = np.where(a0 > 0, 1.0 / np.where(a0 > 0, a0, 1.0), np.inf)
        tau = rng.standard_exponential(active.size) * scale
        fires = t[active] + tau < dt
        active, a, a0, tau = active[fires], a[fires], a0[fires], tau[fires]
        if not active.size:
            break
        t[active] += tau
        r = rng.random(active.size) * a0
        cum = np.cumsum(a, axis=1)
        j = np.minimum((cum <= r[:, None]).sum(axis=1), 3)
        n1[active] += STOICHIOMETRY[j, 0]
        n2[active] += STOICHIOMETRY[j, 1]
    return n1, n2


def averaged_transition_batch(states, actions, params: ToggleParams, n_traj: int = 100,
                              dt: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Ensemble-averaged one-period transition for many states at once.

    Each row of ``states`` is rounded to the nearest integer count, ``n_traj``
    SSA runs of length ``dt`` are started from it under its constant action,
    and the component-wise mean of the endpoints is returned.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != 2 or np.any(states < 0) or not np.all(np.isfinite(states)):
        raise ValueError("states must be an (m, 2) array of finite nonnegative values")
    actions = np.asarray(actions)
    if np.any((actions != 0) & (actions != 1)):
        raise ValueError("actions must be 0 or 1")
    rng = rng if rng is not None else np.random.default_rng()
    start = np.rint(states)
    m = start.shape[0]
    lane1 = np.repeat(start[:, 0], n_traj)
    lane2 = np.repeat(start[:, 1], n_traj)
    lane_u = np.repeat(actions, n_traj)
    e1, e2 = _ensemble_endpoints(lane1, lane2, lane_u, params, dt, rng)
    out = np.column_stack([e1.reshape(m, n_traj).mean(axis=1), e2.reshape(m, n_traj).mean(axis=1)])
    return out


def averaged_transition(state, action: int, params: ToggleParams, n_traj: int = 100, dt: float = 1.0,
                        seed=None) -> tuple[float, float]:
    """Mean endpoint of ``n_traj`` SSA runs of length ``dt`` from ``state``."""
    s = validate_state(state)
    validate_action(action)
    out = averaged_transition_batch(s[None, :], np.array([action]), params, n_traj, dt,
                                    np.random.default_rng(seed))
    return (float(out[0, 0]), float(out[0, 1]))


def _solve_fixed_points(starts: np.ndarray, params: ToggleParams, tol=1e-13, max_iter=10000) -> np.ndarray:
    """Damped iteration from every row of ``starts``; unconverged rows become NaN."""
    n = np.array(starts, dtype=float)
    zeros = np.zeros(len(n))
    done = np.zeros(len(n), dtype=bool)
    for _ in range(max_iter):
        nxt = deterministic_step_batch(n, zeros, params)
        done |= np.max(np.abs(nxt - n), axis=1) < tol
        n = np.where(done[:, None], n, 0.5 * n + 0.5 * nxt)
        if done.all():
            break
    out = deterministic_step_batch(n, zeros, params)
    out[~done] = np.nan
    return out


def fixed_points(params: ToggleParams, grid: int = 25) -> list[tuple[float, float]]:
    """Stable fixed points of the uncontrolled map, sorted by ``n1``.

    Found by damped fixed-point iteration from a grid of starts and kept only
    if the undamped map is locally contracting there.
    """
    if params.d1 <= 0 or params.d2 <= 0:
        raise ValueError("fixed point search needs positive degradation rates")
    hi1 = (params.c1 + params.b) / params.d1
    hi2 = params.c2 / params.d2
    xs, ys = np.meshgrid(np.linspace(0, hi1, grid), np.linspace(0, hi2, grid), indexing="ij")
    candidates = _solve_fixed_points(np.column_stack([xs.ravel(), ys.ravel()]), params)
    found: list[np.ndarray] = []
    for fp in candidates:
        if np.isnan(fp).any() or any(np.allclose(fp, f, atol=1e-8) for f in found):
            continue
        if _is_stable(fp, params):
            found.append(fp)
    return sorted((tuple(float(v) for v in f) for f in found), key=lambda f: f[0])


def _is_stable(fp, params: ToggleParams, h=1e-6) -> bool:
    jac = np.empty((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        plus = np.asarray(deterministic_step(fp + e, 0, params))
        minus = np.asarray(deterministic_step(np.maximum(fp - e, 0), 0, params))
        jac[:, i] = (plus - minus) / (e[i] + min(h, fp[i]))
    return bool(np.max(np.abs(np.linalg.eigvals(jac))) < 1.0)


@dataclass(frozen=True)
class TargetRegion:
    center: tuple[float, float]
    radius: float

    def contains(self, state) -> bool:
        d = np.hypot(state[0] - self.center[0], state[1] - self.center[1])
        return bool(d <= self.radius)


def target_region(params: ToggleParams, reference=None, fraction: float = 0.1) -> TargetRegion:
    """Ball around the n1-high stable fixed point.

    The radius is ``fraction`` times the distance from that fixed point to the
    n2-high fixed point of ``params``; when ``params`` has a single stable
    point, ``reference`` (the starting state of the task) takes its place.
    """
    fps = fixed_points(params)
    high = fps[-1]
    if len(fps) > 1:
        low = fps[0]
    elif reference is not None:
        low = tuple(float(v) for v in reference)
    else:
        raise ValueError("single stable fixed point: a reference state is required")
    dist = math.hypot(high[0] - low[0], high[1] - low[1])
    return TargetRegion(center=high, radius=fraction * dist)
