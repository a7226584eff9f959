"""Attention-masked value-based agents."""
from .agent import (
    VARIANTS,
    FeatureMasker,
    RlConfig,
    beta_is,
    double_dqn_target,
    dueling_q,
    epsilon,
    evaluate_policy,
    mask_features,
    q_policy,
    rolling_mean,
    train_rl,
)
from .buffer import PrioritizedBuffer, SumTree, per_sample
from .report import aggregate_scores, relative_score, render_report

__all__ = [
    "VARIANTS",
    "FeatureMasker",
    "PrioritizedBuffer",
    "RlConfig",
    "SumTree",
    "aggregate_scores",
    "beta_is",
    "double_dqn_target",
    "dueling_q",
    "epsilon",
    "evaluate_policy",
    "mask_features",
    "per_sample",
    "q_policy",
    "relative_score",
    "render_report",
    "rolling_mean",
    "train_rl",
]
