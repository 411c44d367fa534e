"""Uncertainty-aware CTR prediction and ad ranking.

A sparse variational Gaussian process over a learned embedding mapping gives
calibrated logit posteriors; greedy, UCB and Thompson-sampling rankers turn
them into display decisions. A bandit simulator and a replay evaluator
measure the result.
"""
from .mapping import FieldSpec, SparseBatch, SparseFeature
from .svgp import DualConfig, DualModel, VariationalState
from .dnn import DnnConfig, LogitModel
from .strategies import make_strategy, rank
from .environment import Schedule, run_loop
from .replay import ReplayReport, replay

__version__ = "0.1.0"

__all__ = ["FieldSpec", "SparseBatch", "SparseFeature", "DualConfig", "DualModel", "VariationalState",
           "DnnConfig", "LogitModel", "make_strategy", "rank", "Schedule", "run_loop", "ReplayReport",
           "replay"]
