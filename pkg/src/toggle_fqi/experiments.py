"""Experiment configuration and pipeline stages behind the command line.

An experiment is fully described by one INI file (see
:func:`ExperimentConfig.render`). Per-stage random seeds are derived from the
master seed with :func:`derive_seed`, so any stage can be rerun alone and
produce the same bytes.
"""
from __future__ import annotations

import configparser
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from .fqi import CostWeights, FittedQIteration, Policy
from .model import ToggleParams, fixed_points, preset, target_region
from .online import (
    EpisodeLog,
    EpsilonSchedule,
    OnlineConfig,
    closed_loop_run,
    make_env,
    online_run,
)
from .regress import ExtraTreesRegressor

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.csv"
POLICY_FILE = "policy.json"
GRID_FILE = "policy_grid.csv"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class MissingPrerequisite(FileNotFoundError):
    pass


def derive_seed(master_seed: int, stage: str) -> int:
    """32-bit seed for ``stage``: ``SeedSequence([master, crc32(stage)])``."""
    return int(np.random.SeedSequence([int(master_seed), zlib.crc32(stage.encode())]).generate_state(1)[0])


# configuration ---------------------------------------------------------------
# ``None`` stands for "auto" and is rendered as such.

@dataclass(frozen=True)
class ExperimentSection:
    master_seed: int = 0
    output_dir: str = "runs/default"
    mode: str = "deterministic"


@dataclass(frozen=True)
class ModelSection:
    preset: str = "setting-one"
    c1: float | None = None
    c2: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    d1: float | None = None
    d2: float | None = None
    b: float | None = None


@dataclass(frozen=True)
class ControlSection:
    preset: str = "setting-one"
    initial_state: str = "auto"


@dataclass(frozen=True)
class DatasetSection:
    n_trajectories: int = 5000
    samples_per_trajectory: int = 50
    p_on: float = 0.5
    n_traj: int = 100
    dt: float = 1.0


@dataclass(frozen=True)
class CostSection:
    w2: float = 60.0
    wu: float = 1.0


@dataclass(frozen=True)
class FqiSection:
    gamma: float = 0.75
    n_iterations: int | None = None
    epsilon_disc: float = 1e-4


@dataclass(frozen=True)
class RegressorSection:
    n_trees: int = 50
    k_splits: int = 3
    n_min: int | None = None


@dataclass(frozen=True)
class OnlineSection:
    n_inner: int = 1
    batch_size: int = 1
    horizon: int = 200
    epsilon_kind: str = "linear-ramp"
    epsilon_start: float = 0.3
    epsilon_end: float = 1.0
    epsilon_ramp_steps: int | None = None


@dataclass(frozen=True)
class ReproduceSection:
    n_seeds: int = 10
    fig3_required: int = 7
    fig4_required: int = 5
    grid_resolution: int = 26
    target_fraction: float = 0.1


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "control": ControlSection,
    "dataset": DatasetSection,
    "cost": CostSection,
    "fqi": FqiSection,
    "regressor": RegressorSection,
    "online": OnlineSection,
    "reproduce": ReproduceSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    control: ControlSection = field(default_factory=ControlSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    cost: CostSection = field(default_factory=CostSection)
    fqi: FqiSection = field(default_factory=FqiSection)
    regressor: RegressorSection = field(default_factory=RegressorSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    reproduce: ReproduceSection = field(default_factory=ReproduceSection)

    # text form -----------------------------------------------------------

    def render(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                lines.append(f"{f.name} = {'auto' if value is None else _fmt(value)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.read_string(text)
        errors = []
        for name in parser.sections():
            if name not in SECTIONS:
                errors.append(f"[{name}]: unknown section")
        sections = {}
        for name, klass in SECTIONS.items():
            values = {}
            known = {f.name: f for f in fields(klass)}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in known:
                        errors.append(f"[{name}] {key}: unknown key")
                        continue
                    try:
                        values[key] = _convert(raw, known[key].type)
                    except ValueError as exc:
                        errors.append(f"[{name}] {key}: {exc}")
            sections[name] = klass(**values)
        cfg = cls(**sections)
        errors.extend(cfg.validate())
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.render(), encoding="utf-8")

    def with_overrides(self, seed=None, out=None, preset_name=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, experiment=replace(cfg.experiment, master_seed=int(seed)))
        if out is not None:
            cfg = replace(cfg, experiment=replace(cfg.experiment, output_dir=str(out)))
        if preset_name is not None:
            cfg = replace(cfg, model=replace(cfg.model, preset=preset_name))
        return cfg

    def validate(self) -> list[str]:
        errors = []
        e, d, o, r = self.experiment, self.dataset, self.online, self.regressor
        if e.mode not in ("deterministic", "stochastic"):
            errors.append(f"[experiment] mode: must be deterministic or stochastic, got {e.mode!r}")
        for sec, name in (("model", self.model.preset), ("control", self.control.preset)):
            try:
                preset(name)
            except ValueError as exc:
                errors.append(f"[{sec}] preset: {exc}")
        if self.control.initial_state != "auto":
            try:
                _parse_state(self.control.initial_state)
            except ValueError as exc:
                errors.append(f"[control] initial_state: {exc}")
        if d.n_trajectories < 1:
            errors.append("[dataset] n_trajectories: must be >= 1")
        if d.samples_per_trajectory < 1:
            errors.append("[dataset] samples_per_trajectory: must be >= 1")
        if not 0 <= d.p_on <= 1:
            errors.append("[dataset] p_on: must lie in [0, 1]")
        if d.n_traj < 1:
            errors.append("[dataset] n_traj: must be >= 1")
        if not d.dt > 0:
            errors.append("[dataset] dt: must be positive")
        try:
            self.weights()
        except ValueError as exc:
            errors.append(f"[cost] {exc}")
        if not 0 < self.fqi.gamma < 1:
            errors.append("[fqi] gamma: must lie in (0, 1)")
        if self.fqi.n_iterations is not None and self.fqi.n_iterations < 1:
            errors.append("[fqi] n_iterations: must be >= 1")
        if not 0 < self.fqi.epsilon_disc <= 1:
            errors.append("[fqi] epsilon_disc: must lie in (0, 1]")
        if r.n_trees < 1:
            errors.append("[regressor] n_trees: must be >= 1")
        if not 1 <= r.k_splits <= 3:
            errors.append("[regressor] k_splits: must lie in [1, 3]")
        if r.n_min is not None and r.n_min < 2:
            errors.append("[regressor] n_min: must be >= 2")
        try:
            self.online_config(0)
        except ValueError as exc:
            errors.append(f"[online] {exc}")
        rep = self.reproduce
        if rep.n_seeds < 1:
            errors.append("[reproduce] n_seeds: must be >= 1")
        if rep.grid_resolution < 2:
            errors.append("[reproduce] grid_resolution: must be >= 2")
        if not 0 < rep.target_fraction < 1:
            errors.append("[reproduce] target_fraction: must lie in (0, 1)")
        return errors

    # resolved objects ----------------------------------------------------

    def train_params(self) -> ToggleParams:
        base = preset(self.model.preset).as_dict()
        for key in base:
            value = getattr(self.model, key)
            if value is not None:
                base[key] = value
        return ToggleParams(**base)

    def control_params(self) -> ToggleParams:
        return preset(self.control.preset)

    def weights(self) -> CostWeights:
        return CostWeights(w2=self.cost.w2, wu=self.cost.wu)

    def regressor_for(self, mode: str | None = None, seed: int | None = None) -> ExtraTreesRegressor:
        mode = mode or self.experiment.mode
        n_min = self.regressor.n_min
        if n_min is None:
            n_min = 2 if mode == "deterministic" else 5
        if seed is None:
            seed = derive_seed(self.experiment.master_seed, "regressor")
        return ExtraTreesRegressor(n_trees=self.regressor.n_trees, k_splits=self.regressor.k_splits,
                                   n_min=n_min, seed=seed)

    def fqi_estimator(self, mode: str | None = None) -> FittedQIteration:
        return FittedQIteration(regressor=self.regressor_for(mode), gamma=self.fqi.gamma,
                                n_iterations=self.fqi.n_iterations, weights=self.weights(),
                                epsilon_disc=self.fqi.epsilon_disc)

    def online_config(self, seed: int) -> OnlineConfig:
        o = self.online
        ramp = o.epsilon_ramp_steps if o.epsilon_ramp_steps is not None else max(1, -(-o.horizon // 2))
        schedule = EpsilonSchedule(o.epsilon_kind, o.epsilon_start, o.epsilon_end, ramp)
        return OnlineConfig(n_inner=o.n_inner, batch_size=o.batch_size, epsilon=schedule, horizon=o.horizon,
                            seed=seed)

    def initial_state(self, control: ToggleParams | None = None) -> tuple[float, float]:
        if self.control.initial_state != "auto":
            return _parse_state(self.control.initial_state)
        return default_initial_state(control or self.control_params(), self.train_params())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, annotation):
    raw = raw.strip()
    ann = str(annotation)
    optional = "None" in ann
    if optional and raw == "auto":
        return None
    if ann.startswith("int"):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer{' or auto' if optional else ''}, got {raw!r}") from None
    if ann.startswith("float"):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"expected a number{' or auto' if optional else ''}, got {raw!r}") from None
    return raw


def _parse_state(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'n1, n2', got {text!r}")
    vals = tuple(float(p) for p in parts)
    if any(v < 0 for v in vals):
        raise ValueError("state components must be nonnegative")
    return vals


def default_initial_state(*candidates: ToggleParams) -> tuple[float, float]:
    """Rounded n2-high stable fixed point of the first bistable parameter set."""
    for params in candidates:
        fps = fixed_points(params)
        if len(fps) > 1:
            low = fps[0]
            return (float(round(low[0])), float(round(low[1])))
    raise ValueError("none of the parameter sets is bistable; set [control] initial_state explicitly")


# stages ----------------------------------------------------------------------

def _out(cfg: ExperimentConfig, sub: str | None = None) -> Path:
    path = Path(cfg.experiment.output_dir)
    if sub:
        path = path / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_dataset(cfg: ExperimentConfig, params: ToggleParams | None = None, mode: str | None = None):
    params = params or cfg.train_params()
    mode = mode or cfg.experiment.mode
    d = cfg.dataset
    return ds.generate(params, d.n_trajectories, d.samples_per_trajectory, mode=mode,
                       action_sampler=ds.bernoulli_action_sampler(d.p_on),
                       seed=derive_seed(cfg.experiment.master_seed, "dataset"), n_traj=d.n_traj, dt=d.dt)


def train_policy(cfg: ExperimentConfig, data, mode: str | None = None) -> Policy:
    policy = cfg.fqi_estimator(mode).fit(data).policy_
    policy.meta.update(training_set=data.metadata)
    return policy


def stage_gen_dataset(cfg: ExperimentConfig) -> dict:
    """Generate the training transition set."""
    data = build_dataset(cfg)
    path = _out(cfg) / DATASET_FILE
    ds.save(data, path)
    return {"command": "gen-dataset", "success": True, "n_triplets": len(data), "path": str(path)}


def stage_train(cfg: ExperimentConfig) -> dict:
    """Run batch Fitted Q Iteration on the saved transition set."""
    path = Path(cfg.experiment.output_dir) / DATASET_FILE
    if not path.exists():
        raise MissingPrerequisite(f"dataset file not found: {path} (run gen-dataset first)")
    data = ds.load(path)
    policy = train_policy(cfg, data)
    out = _out(cfg) / POLICY_FILE
    policy.save(out)
    return {"command": "train", "success": True, "n_iterations": policy.meta.get("n_iterations"),
            "path": str(out)}


def _load_policy(cfg: ExperimentConfig) -> Policy:
    path = Path(cfg.experiment.output_dir) / POLICY_FILE
    if not path.exists():
        raise MissingPrerequisite(f"policy file not found: {path} (run train first)")
    return Policy.load(path)


def _episode_summary(command: str, episode: EpisodeLog, region) -> dict:
    steps = episode.steps_to_target(region)
    return {"command": command, "success": steps is not None, "steps_to_target": steps,
            "cumulative_cost": episode.cumulative_cost}


def stage_rollout(cfg: ExperimentConfig) -> dict:
    """Greedy closed-loop episode of the trained policy."""
    policy = _load_policy(cfg)
    control = cfg.control_params()
    start = cfg.initial_state(control)
    env = make_env(control, cfg.experiment.mode, cfg.dataset.n_traj, cfg.dataset.dt)
    episode = closed_loop_run(policy, env, cfg.weights(), cfg.online.horizon, start,
                              seed=derive_seed(cfg.experiment.master_seed, "rollout"), gamma=cfg.fqi.gamma)
    episode.save(_out(cfg) / "episode.csv")
    return _episode_summary("rollout", episode, target_region(control, start, cfg.reproduce.target_fraction))


def stage_online(cfg: ExperimentConfig) -> dict:
    """Online adaptation episode starting from the trained policy."""
    policy = _load_policy(cfg)
    path = Path(cfg.experiment.output_dir) / DATASET_FILE
    if not path.exists():
        raise MissingPrerequisite(f"dataset file not found: {path} (run gen-dataset first)")
    historical = ds.load(path)
    control = cfg.control_params()
    start = cfg.initial_state(control)
    env = make_env(control, cfg.experiment.mode, cfg.dataset.n_traj, cfg.dataset.dt)
    online_cfg = cfg.online_config(derive_seed(cfg.experiment.master_seed, "online-0"))
    new_policy, episode, _ = online_run(policy, historical, env, cfg.fqi_estimator(), online_cfg, start)
    out = _out(cfg)
    episode.save(out / "online_episode.csv")
    new_policy.save(out / "policy_online.json")
    return _episode_summary("online", episode, target_region(control, start, cfg.reproduce.target_fraction))


def policy_grid(policy: Policy, bounds, resolution: int):
    """Greedy actions on a regular grid.

    Returns ``(n1_values, n2_values, actions)`` with ``actions[j, i]`` the
    action at ``(n1_values[i], n2_values[j])``.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    (lo1, hi1), (lo2, hi2) = bounds
    if not (hi1 > lo1 and hi2 > lo2):
        raise ValueError(f"degenerate grid bounds {bounds}")
    n1 = np.linspace(lo1, hi1, resolution)
    n2 = np.linspace(lo2, hi2, resolution)
    g1, g2 = np.meshgrid(n1, n2)
    actions = policy.greedy_actions(np.column_stack([g1.ravel(), g2.ravel()])).reshape(resolution, resolution)
    return n1, n2, actions


def export_policy_grid(policy: Policy, bounds, resolution: int, path) -> int:
    """Write ``n1,n2,action`` rows (n2-major) and return the row count."""
    n1, n2, actions = policy_grid(policy, bounds, resolution)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("n1,n2,action\n")
        for j, y in enumerate(n2):
            for i, x in enumerate(n1):
                fh.write(f"{float(x)!r},{float(y)!r},{int(actions[j, i])}\n")
    return resolution * resolution


def load_policy_grid(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n1 = np.unique(rows[:, 0])
    n2 = np.unique(rows[:, 1])
    actions = rows[:, 2].astype(np.int64).reshape(len(n2), len(n1))
    return n1, n2, actions


@dataclass(frozen=True)
class ThresholdSummary:
    thresholds: np.ndarray
    monotone: np.ndarray

    @property
    def monotone_fraction(self) -> float:
        return float(np.mean(self.monotone))

    @property
    def mean_threshold(self) -> float:
        return float(np.mean(self.thresholds))


def threshold_summary(n1_values, actions) -> ThresholdSummary:
    """Per-``n2``-slice switch point of the best fitting ``1 ... 1 0 ... 0`` profile.

    A slice is monotone when the fit is exact. All-zero slices put the
    threshold at the lower ``n1`` bound, all-one slices at the upper bound;
    interior thresholds sit midway between the last 1 and the first 0.
    """
    n1_values = np.asarray(n1_values, dtype=float)
    actions = np.asarray(actions)
    r = len(n1_values)
    thresholds = []
    monotone = []
    for row in actions:
        # mismatches when ones occupy positions [0, k) and zeros [k, r)
        zeros_before = np.concatenate([[0], np.cumsum(row == 0)])
        ones_after = np.concatenate([[0], np.cumsum((row == 1)[::-1])])[::-1]
        mism = zeros_before + ones_after
        k = int(np.argmin(mism))
        monotone.append(mism[k] == 0)
        if k == 0:
            thresholds.append(n1_values[0])
        elif k == r:
            thresholds.append(n1_values[-1])
        else:
            thresholds.append(0.5 * (n1_values[k - 1] + n1_values[k]))
    return ThresholdSummary(np.asarray(thresholds), np.asarray(monotone, dtype=bool))


def grid_bounds(params: ToggleParams):
    return ds.default_state_box(params)


def stage_policy_grid(cfg: ExperimentConfig) -> dict:
    """Export greedy actions on a regular state grid."""
    policy = _load_policy(cfg)
    path = _out(cfg) / GRID_FILE
    rows = export_policy_grid(policy, grid_bounds(cfg.train_params()), cfg.reproduce.grid_resolution, path)
    n1, _, actions = load_policy_grid(path)
    summary = threshold_summary(n1, actions)
    return {"command": "policy-grid", "success": True, "rows": rows,
            "monotone_fraction": summary.monotone_fraction, "mean_threshold": summary.mean_threshold}


# reproduction targets ---------------------------------------------------------

def reproduce_fig2(cfg: ExperimentConfig) -> dict:
    """Deterministic: train on setting one, control settings one and two."""
    out = _out(cfg, "fig2")
    train = preset("setting-one")
    data = build_dataset(cfg, train, "deterministic")
    ds.save(data, out / DATASET_FILE)
    policy = train_policy(cfg, data, "deterministic")
    policy.save(out / POLICY_FILE)
    start = default_initial_state(train)
    results = {}
    for name in ("setting-one", "setting-two"):
        control = preset(name)
        episode = closed_loop_run(policy, make_env(control, "deterministic"), cfg.weights(), cfg.online.horizon,
                                  start, seed=derive_seed(cfg.experiment.master_seed, f"rollout-{name}"),
                                  gamma=cfg.fqi.gamma)
        episode.save(out / f"episode_{name}.csv")
        region = target_region(control, start, cfg.reproduce.target_fraction)
        results[name] = _episode_summary("rollout", episode, region)
    export_policy_grid(policy, grid_bounds(train), cfg.reproduce.grid_resolution, out / GRID_FILE)
    n1, _, actions = load_policy_grid(out / GRID_FILE)
    summary = threshold_summary(n1, actions)
    success = all(r["success"] for r in results.values()) and summary.monotone_fraction >= 0.9
    main = results["setting-one"]
    return {"command": "reproduce-fig2", "success": success, "steps_to_target": main["steps_to_target"],
            "cumulative_cost": main["cumulative_cost"],
            "steps_to_target_setting_two": results["setting-two"]["steps_to_target"],
            "monotone_fraction": summary.monotone_fraction, "mean_threshold": summary.mean_threshold}


def _reproduce_adaptation(cfg: ExperimentConfig, mode: str, command: str, required: int) -> dict:
    """Train on setting two, control setting one frozen and with online adaptation."""
    out = _out(cfg, command.removeprefix("reproduce-"))
    train, control = preset("setting-two"), preset("setting-one")
    data = build_dataset(cfg, train, mode)
    ds.save(data, out / DATASET_FILE)
    policy = train_policy(cfg, data, mode)
    policy.save(out / POLICY_FILE)
    start = default_initial_state(control)
    region = target_region(control, start, cfg.reproduce.target_fraction)
    env = make_env(control, mode, cfg.dataset.n_traj, cfg.dataset.dt)
    frozen = closed_loop_run(policy, env, cfg.weights(), cfg.online.horizon, start,
                             seed=derive_seed(cfg.experiment.master_seed, "rollout"), gamma=cfg.fqi.gamma)
    frozen.save(out / "episode_frozen.csv")
    frozen_summary = _episode_summary("rollout", frozen, region)
    fqi = cfg.fqi_estimator(mode)
    runs = []
    for i in range(cfg.reproduce.n_seeds):
        online_cfg = cfg.online_config(derive_seed(cfg.experiment.master_seed, f"online-{i}"))
        _, episode, _ = online_run(policy, data, env, fqi, online_cfg, start)
        episode.save(out / f"episode_online_{i}.csv")
        runs.append(_episode_summary("online", episode, region))
        log.info("%s online run %d: %s", command, i, runs[-1])
    successes = sum(r["success"] for r in runs)
    first = runs[0]
    return {
        "command": command,
        "success": (not frozen_summary["success"]) and successes >= required,
        "steps_to_target": first["steps_to_target"],
        "cumulative_cost": first["cumulative_cost"],
        "frozen_success": frozen_summary["success"],
        "online_successes": successes,
        "online_runs": len(runs),
        "online_steps_to_target": [r["steps_to_target"] for r in runs],
    }


def reproduce_fig3(cfg: ExperimentConfig) -> dict:
    """Deterministic: frozen vs online-adapted setting-two policy on setting one."""
    return _reproduce_adaptation(cfg, "deterministic", "reproduce-fig3", cfg.reproduce.fig3_required)


def reproduce_fig4(cfg: ExperimentConfig) -> dict:
    """Stochastic: frozen vs online-adapted setting-two policy on setting one."""
    return _reproduce_adaptation(cfg, "stochastic", "reproduce-fig4", cfg.reproduce.fig4_required)


COMMANDS = {
    "gen-dataset": stage_gen_dataset,
    "train": stage_train,
    "rollout": stage_rollout,
    "online": stage_online,
    "policy-grid": stage_policy_grid,
    "reproduce-fig2": reproduce_fig2,
    "reproduce-fig3": reproduce_fig3,
    "reproduce-fig4": reproduce_fig4,
}


def run_experiment(cfg: ExperimentConfig, command: str) -> dict:
    """Execute one pipeline stage and return its summary dictionary."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    summary = COMMANDS[command](cfg)
    (Path(cfg.experiment.output_dir) / "config.ini").write_text(cfg.render(), encoding="utf-8")
    return summary
