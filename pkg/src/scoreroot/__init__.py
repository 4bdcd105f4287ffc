"""Likelihood-free inference via learned likelihood scores.

Pipeline: simulate reference tables, fit a per-datum score network with an
implicit score-matching objective plus structural penalties, debias it with a
mean network, solve the aggregated score for a point estimate, and attach
Fisher, sandwich, and multiplier-bootstrap confidence sets.
"""

from . import (baseline_sl, bench, diffcore, errors, estimator, scorenet,
               simulators, training, uncertainty)
from .bench import ExperimentConfig, fit_csv, preset, run_benchmark
from .estimator import compare_dynamics, find_root
from .scorenet import DebiasedScore, MlpSpec, ScoreNetwork
from .simulators import make_model, stream
from .training import RunSettings, TrainConfig, build_tables, two_round
from .uncertainty import (bootstrap_sets, confidence_sets, fisher_curv,
                          fisher_ss, multiplier_bootstrap, sandwich)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "DebiasedScore", "MlpSpec", "RunSettings",
    "ScoreNetwork", "TrainConfig", "baseline_sl", "bench", "bootstrap_sets",
    "build_tables", "compare_dynamics", "confidence_sets", "diffcore",
    "errors", "estimator", "find_root", "fisher_curv", "fisher_ss", "fit_csv",
    "make_model", "multiplier_bootstrap", "preset", "run_benchmark",
    "sandwich", "scorenet", "simulators", "stream", "training", "two_round",
    "uncertainty",
]
