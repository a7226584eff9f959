"""Relative episodic scores across games and the summary table renderer."""
from __future__ import annotations

import math
import warnings

import numpy as np

RANDOM_SCORES = {
    "Enduro": 0.0,
    "Freeway": 0.0,
    "MsPacman": 307.3,
    "Seaquest": 68.4,
    "SpaceInvaders": 148.0,
    "Riverraid": 1338.5,
}
# averaged relative scores reported for the Atari agents, kept for regression of the renderer
REFERENCE_RELATIVE = {"ctr": 1.10, "inverted": 0.68, "tioa": 0.52}


def relative_score(scores: dict[str, float], plain: dict[str, float], random: dict[str, float]) -> float:
    """Mean over games of (S - S_rand) / (S_plain - S_rand).

    Games whose plain and random scores coincide are skipped with a warning.
    """
    terms = []
    for g, s in scores.items():
        denom = plain[g] - random[g]
        if denom == 0:
            warnings.warn(f"plain equals random score for {g}; game excluded", stacklevel=2)
            continue
        terms.append((s - random[g]) / denom)
    if not terms:
        raise ZeroDivisionError("no game with plain != random")
    return math.fsum(terms) / len(terms)


def aggregate_scores(per_seed: list[list[float]]) -> float:
    """Pooled mean over all seeds' evaluation episodes."""
    return float(np.mean(np.concatenate([np.asarray(s, dtype=np.float64) for s in per_seed])))


def render_report(relative: dict[str, float]) -> str:
    """Plain-text table of averaged relative scores, two decimals."""
    lines = ["variant,relative_score"]
    for k in ("plain", "ctr", "tioa", "inverted"):
        if k in relative:
            lines.append(f"{k},{relative[k]:.2f}")
    return "\n".join(lines) + "\n"
