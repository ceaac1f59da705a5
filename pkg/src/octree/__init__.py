"""Optimized feature generation for tabular prediction.

A rule generator proposes expressions that derive a new column; each rule
is scored by retraining a predictor, and the score-ordered history, with
decision-tree reasoning rendered as if-else text, is fed back for the next
proposal.
"""

from .data import Dataset, SplitSpec, load_csv, split
from .dsl import Rule, evaluate, parse, render
from .optimizer import LoopConfig, Splits, generate_features, run_optimization, transfer
from .predictor import PredictorConfig

__all__ = [
    "Dataset",
    "LoopConfig",
    "PredictorConfig",
    "Rule",
    "SplitSpec",
    "Splits",
    "evaluate",
    "generate_features",
    "load_csv",
    "parse",
    "render",
    "run_optimization",
    "split",
    "transfer",
]
