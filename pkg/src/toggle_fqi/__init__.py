"""Learning feedback policies for the genetic toggle switch with Fitted Q Iteration."""
from .dataset import TransitionSet, generate, load, merge, save
from .fqi import CostWeights, FittedQIteration, Policy, cost, default_n_iterations, fqi_train
from .model import (
    PRESETS,
    ToggleParams,
    averaged_transition,
    deterministic_step,
    fixed_points,
    gillespie_run,
    preset,
    propensities,
    target_region,
)
from .online import EpisodeLog, EpsilonSchedule, OnlineConfig, closed_loop_run, epsilon_greedy_action, online_run
from .regress import ExtraTreesRegressor

__version__ = "0.1.0"
