"""Acceptance suite: one test per criterion, tagged with ``criterion(n, title)``.

The terminal summary prints a PASS/FAIL line per criterion. Scenario criteria
(4-7) run at desk scale from ``configs/desk.ini``.
"""
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from toggle_fqi.cli import main
from toggle_fqi.dataset import TransitionSet
from toggle_fqi.experiments import (
    ExperimentConfig,
    build_dataset,
    grid_bounds,
    policy_grid,
    reproduce_fig2,
    reproduce_fig3,
    reproduce_fig4,
    threshold_summary,
    train_policy,
)
from toggle_fqi.fqi import CostWeights, FittedQIteration, cost_q_function
from toggle_fqi.model import ToggleParams, gillespie_run, preset
from toggle_fqi.regress import ExtraTreesRegressor

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.ini"


def desk_config(out, **overrides):
    cfg = ExperimentConfig.load(DESK).with_overrides(out=str(out))
    for section, values in overrides.items():
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
    return cfg


def report(criterion, **values):
    print(f"\ncriterion {criterion}: " + json.dumps(values, sort_keys=True, default=float))


# -- criteria 1 and 2: tabular oracle chain -----------------------------------

GAMMA = 0.75
WEIGHTS = CostWeights(w2=60, wu=1)
CHAIN = [(0.0, 3.0), (1.0, 2.0), (2.0, 1.0), (3.0, 0.0)]


def chain_next(i, u):
    return min(i + 1, 3) if u == 1 else max(i - 1, 0)


def chain_set():
    return TransitionSet.from_triplets(
        [(CHAIN[i], u, CHAIN[chain_next(i, u)]) for i in range(4) for u in (0, 1)], "simulated-deterministic")


def oracle_q(k):
    """k sweeps of value iteration from Q_0 = c, computed with plain dicts."""
    c = {(i, u): CHAIN[i][0] + 60.0 * CHAIN[i][1] + 1.0 * u for i in range(4) for u in (0, 1)}
    q = dict(c)
    for _ in range(k):
        q = {(i, u): c[i, u] + GAMMA * min(q[chain_next(i, u), 0], q[chain_next(i, u), 1]) for (i, u) in c}
    return q


def exact_fqi(k):
    reg = ExtraTreesRegressor(n_trees=1, n_min=2, seed=0)
    return FittedQIteration(reg, gamma=GAMMA, n_iterations=k, weights=WEIGHTS, record_targets=True).fit(chain_set())


@pytest.mark.criterion(1, "tabular oracle equivalence (k <= 20, abs err <= 1e-10, < 1 s)")
def test_tabular_oracle_equivalence():
    exact_fqi(1)  # warm the JIT cache outside the timed region
    start = time.perf_counter()
    worst = 0.0
    for k in range(1, 21):
        q = exact_fqi(k).q_values(CHAIN)
        oracle = oracle_q(k)
        worst = max(worst, max(abs(q[i, u] - oracle[i, u]) for i in range(4) for u in (0, 1)))
    elapsed = time.perf_counter() - start
    report(1, max_abs_error=worst, seconds=elapsed)
    assert worst <= 1e-10
    assert elapsed < 1.0


@pytest.mark.criterion(2, "Bellman contraction (ratio <= gamma + 1e-12, < 1 s)")
def test_bellman_contraction():
    start = time.perf_counter()
    est = exact_fqi(20)
    data = chain_set()
    q0 = cost_q_function(WEIGHTS)(data.states)[np.arange(len(data)), data.actions]
    history = [q0] + est.targets_history_
    change = [np.max(np.abs(b - a)) for a, b in zip(history, history[1:])]
    elapsed = time.perf_counter() - start
    ratios = [b / a for a, b in zip(change, change[1:]) if a > 0]
    report(2, worst_ratio=max(ratios), seconds=elapsed)
    assert all(b <= (GAMMA + 1e-12) * a for a, b in zip(change, change[1:]))
    assert elapsed < 1.0


# -- criterion 3: SSA statistics ------------------------------------------------

@pytest.mark.criterion(3, "SSA statistics (death-process mean, birth-process Poisson, < 30 s)")
def test_ssa_statistics():
    start = time.perf_counter()
    death = ToggleParams(c1=0, c2=0, alpha1=1, alpha2=1, d1=1, d2=1, b=0)
    times = (0.5, 1.0, 2.0)
    ends = np.array([[gillespie_run((100, 0), 0, death, t, seed=i).final[0] for t in times] for i in range(1000)])
    z = [(ends[:, j].mean() - 100 * math.exp(-t)) / (ends[:, j].std(ddof=1) / math.sqrt(1000))
         for j, t in enumerate(times)]

    lam, t_end = 5.0, 1.0
    birth = ToggleParams(c1=0, c2=0, alpha1=1, alpha2=1, d1=0, d2=0, b=lam)
    counts = np.array([gillespie_run((0, 0), 1, birth, t_end, seed=i).final[0] for i in range(10000)])
    mu = lam * t_end
    lo, hi = int(stats.poisson.ppf(1e-3, mu)), int(stats.poisson.isf(1e-3, mu))
    inner = range(lo + 1, hi)
    observed = [np.sum(counts <= lo)] + [np.sum(counts == k) for k in inner] + [np.sum(counts >= hi)]
    probs = [stats.poisson.cdf(lo, mu)] + [stats.poisson.pmf(k, mu) for k in inner] + [stats.poisson.sf(hi - 1, mu)]
    chi = stats.chisquare(observed, 10000 * np.asarray(probs))
    elapsed = time.perf_counter() - start
    report(3, death_z=z, poisson_pvalue=chi.pvalue, seconds=elapsed)
    assert all(abs(v) <= 3 for v in z)
    assert chi.pvalue > 0.01
    assert elapsed < 30


# -- criterion 4: deterministic control of both settings --------------------------

@pytest.mark.slow
@pytest.mark.criterion(4, "deterministic control: both settings toggled, >= 90% monotone slices (< 10 min)")
def test_deterministic_control(tmp_path):
    start = time.perf_counter()
    summary = reproduce_fig2(desk_config(tmp_path))
    elapsed = time.perf_counter() - start
    report(4, seconds=elapsed, **summary)
    assert summary["steps_to_target"] is not None and summary["steps_to_target"] <= 200
    assert summary["steps_to_target_setting_two"] is not None
    assert summary["monotone_fraction"] >= 0.9
    assert summary["success"]
    assert elapsed < 600


# -- criteria 5 and 6: failure of the transferred policy, recovery online -----------

@pytest.mark.slow
@pytest.mark.criterion(5, "transfer: frozen policy fails, online adaptation succeeds in >= 7/10 seeds (< 20 min)")
def test_transfer_adaptation(tmp_path):
    start = time.perf_counter()
    summary = reproduce_fig3(desk_config(tmp_path))
    elapsed = time.perf_counter() - start
    report(5, seconds=elapsed, **summary)
    assert not summary["frozen_success"]
    assert summary["online_runs"] == 10
    assert summary["online_successes"] >= 7
    assert elapsed < 20 * 60


@pytest.mark.slow
@pytest.mark.criterion(6, "stochastic transfer: online adaptation succeeds in >= 5/10 seeds (< 45 min)")
def test_stochastic_transfer_adaptation(tmp_path):
    cfg = desk_config(tmp_path)
    assert cfg.dataset.n_traj == 100
    start = time.perf_counter()
    summary = reproduce_fig4(cfg)
    elapsed = time.perf_counter() - start
    report(6, seconds=elapsed, **summary)
    assert summary["online_runs"] == 10
    assert summary["online_successes"] >= 5
    assert elapsed < 45 * 60


# -- criterion 7: action-cost weight moves the threshold ---------------------------

@pytest.mark.slow
@pytest.mark.criterion(7, "threshold shift: wu x2 moves left, wu x0.5 moves right (tol 0.5, < 20 min)")
def test_threshold_shift(tmp_path):
    start = time.perf_counter()
    cfg = desk_config(tmp_path)
    train = preset("setting-one")
    data = build_dataset(cfg, train, "deterministic")
    means = {}
    for wu in (1.0, 2.0, 0.5):
        run = replace(cfg, cost=replace(cfg.cost, wu=wu))
        policy = train_policy(run, data, "deterministic")
        n1, _, actions = policy_grid(policy, grid_bounds(train), cfg.reproduce.grid_resolution)
        means[wu] = threshold_summary(n1, actions).mean_threshold
    elapsed = time.perf_counter() - start
    report(7, mean_threshold=means, seconds=elapsed)
    assert means[2.0] <= means[1.0] + 0.5
    assert means[0.5] >= means[1.0] - 0.5
    assert elapsed < 20 * 60


# -- criterion 8: determinism of every stage ---------------------------------------

TINY = """
[experiment]
master_seed = 11
output_dir = run
mode = {mode}
[dataset]
n_trajectories = 40
samples_per_trajectory = 10
n_traj = 20
[fqi]
n_iterations = 6
[regressor]
n_trees = 8
[online]
horizon = 30
batch_size = 5
[reproduce]
n_seeds = 2
grid_resolution = 10
"""

STAGES = ("gen-dataset", "train", "rollout", "online", "policy-grid",
          "reproduce-fig2", "reproduce-fig3", "reproduce-fig4")


def run_all_stages(workdir, mode, monkeypatch):
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    Path("exp.ini").write_text(TINY.format(mode=mode))
    runner = CliRunner()
    outputs = []
    for stage in STAGES:
        result = runner.invoke(main, [stage, "--config", "exp.ini"], catch_exceptions=False)
        assert result.exit_code in (0, 3), result.output
        outputs.append(result.output)
    files = {p.relative_to(workdir).as_posix(): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}
    return outputs, files


@pytest.mark.criterion(8, "determinism: every stage byte-identical on rerun (< 5 min)")
@pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
def test_determinism(tmp_path, monkeypatch, mode):
    start = time.perf_counter()
    out_a, files_a = run_all_stages(tmp_path / "a", mode, monkeypatch)
    out_b, files_b = run_all_stages(tmp_path / "b", mode, monkeypatch)
    elapsed = time.perf_counter() - start
    report(8, mode=mode, n_files=len(files_a), seconds=elapsed)
    assert out_a == out_b
    assert files_a.keys() == files_b.keys()
    differing = [name for name in files_a if files_a[name] != files_b[name]]
    assert not differing
    assert {"run/dataset.csv", "run/policy.json", "run/episode.csv", "run/online_episode.csv",
            "run/policy_grid.csv", "run/fig2/policy_grid.csv", "run/fig4/episode_online_1.csv"} <= files_a.keys()
    assert elapsed < 5 * 60 / 2


# -- criterion 9: regressor properties ---------------------------------------------

values = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@st.composite
def fits(draw):
    m = draw(st.integers(1, 80))
    X = draw(hnp.arrays(np.float64, (m, 3), elements=values))
    y = draw(hnp.arrays(np.float64, m, elements=values))
    cfg = {"n_trees": draw(st.integers(1, 6)), "k_splits": draw(st.integers(1, 3)),
           "n_min": draw(st.integers(2, 8)), "seed": draw(st.integers(0, 2**32 - 1))}
    return X, y, cfg


def probes(X, seed=0):
    rng = np.random.default_rng(seed)
    return np.vstack([X, rng.uniform(X.min(axis=0) - 10, X.max(axis=0) + 10, (50, 3))])


@settings(max_examples=150, deadline=None)
@given(fits())
def check_regressor_properties(case):
    X, y, cfg = case
    model = ExtraTreesRegressor(**cfg).fit(X, y)
    pred = model.predict(probes(X))
    # range boundedness
    span = 1e-12 * max(1.0, np.abs(y).max())
    assert pred.min() >= y.min() - span and pred.max() <= y.max() + span
    # seed reproducibility
    twin = ExtraTreesRegressor(**cfg).fit(X, y)
    assert twin.dumps() == model.dumps() and np.array_equal(twin.predict(probes(X)), pred)
    # constant-target exactness
    const = ExtraTreesRegressor(**cfg).fit(X, np.full(len(y), y[0]))
    assert np.all(const.predict(probes(X)) == y[0])
    # single-sample exactness
    single = ExtraTreesRegressor(**cfg).fit(X[:1], y[:1])
    assert np.all(single.predict(probes(X)) == y[0])
    # leaf count non-increasing in n_min
    leaves = [ExtraTreesRegressor(**{**cfg, "n_min": n}).fit(X, y).n_leaves_ for n in range(2, 10)]
    assert all(a >= b for a, b in zip(leaves, leaves[1:]))


@pytest.mark.criterion(9, "regressor properties: bounded, exact, pruning, reproducible (< 1 min)")
def test_regressor_properties():
    start = time.perf_counter()
    check_regressor_properties()
    rng = np.random.default_rng(0)
    X = rng.random((2000, 3))
    y = np.sin(5 * X[:, 0]) * X[:, 1] + 0.05 * rng.normal(size=2000)
    leaves = [ExtraTreesRegressor(n_trees=10, n_min=n, seed=3).fit(X, y).n_leaves_ for n in (2, 3, 5, 10, 40, 2001)]
    elapsed = time.perf_counter() - start
    report(9, leaves_by_n_min=leaves, seconds=elapsed)
    assert all(a >= b for a, b in zip(leaves, leaves[1:])) and leaves[-1] == 10
    assert elapsed < 60
