"""Temporal-difference solver for PIDEs driven by Lévy-type forward processes."""

from .estimator import LevyTDSolver
from .network import NetConfig, ResidualNet, load_checkpoint, save_checkpoint
from .problems import PROBLEMS, ProblemSpec, highdim, make_problem, pure_jump_1d, robustness_1d
from .stochastic import PathBatch, law_from_name, simulate_batch
from .trainer import LossBreakdown, MetricsRecord, TrainConfig, TrainingDiverged, TrainResult, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "LevyTDSolver",
    "LossBreakdown",
    "MetricsRecord",
    "NetConfig",
    "PROBLEMS",
    "PathBatch",
    "ProblemSpec",
    "ResidualNet",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TrainingDiverged",
    "highdim",
    "law_from_name",
    "load_checkpoint",
    "make_problem",
    "pure_jump_1d",
    "robustness_1d",
    "save_checkpoint",
    "simulate_batch",
    "train",
]
