"""Masked-prediction accuracy, sparsity calibration, alignment and significance helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .nets import ActionPredictor, Arch

RATES = (0.02, 0.04, 0.08, 0.16, 1.0)
SMOOTH_LEVELS = (0.01, 0.02, 0.04, 0.08)
RENDER_THRESHOLD = 0.5

# reference values for the Atari games, consumed as fixtures only
ACTIVATION_RATES = {
    "Enduro": {"agent": 0.065, "human": 0.078},
    "Freeway": {"agent": 0.04, "human": 0.04},
    "MsPacman": {"agent": 0.112, "human": 0.066},
    "Seaquest": {"agent": 0.054, "human": 0.04},
    "SpaceInvaders": {"agent": 0.059, "human": 0.04},
    "Riverraid": {"agent": 0.064, "human": 0.048},
}
ALIGNMENT_MEANS = {"human": 3.26, "agent": 2.49}
ALIGNMENT_P = 0.00031
CTR_VS_TIOA_P = 0.0093


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    lam: float
    rate: float
    iterations: int


def calibrate_lambda(
    rate_fn: Callable[[float], float],
    target: float,
    tol: float = 0.002,
    max_iter: int = 30,
    slack: float = 0.1,
) -> Calibration:
    """Bisect lambda in [0, 1] so that ``rate_fn(lambda)`` hits ``target``.

    ``rate_fn`` must be non-decreasing. Targets outside the reachable range
    by more than ``slack * target`` raise :class:`CalibrationError`; closer
    ones resolve to the nearest endpoint.
    """
    if not 0.0 < target <= 1.0:
        raise ValueError("target activation rate must lie in (0, 1]")
    r_lo, r_hi = float(rate_fn(0.0)), float(rate_fn(1.0))
    if target > r_hi + tol or target < r_lo - tol:
        edge_lam, edge_rate = (1.0, r_hi) if target > r_hi else (0.0, r_lo)
        if abs(edge_rate - target) > slack * target:
            raise CalibrationError(f"rate {target} unreachable; achievable range [{r_lo:.4f}, {r_hi:.4f}]")
        return Calibration(edge_lam, edge_rate, 0)
    lo, hi = 0.0, 1.0
    best = (abs(r_lo - target), 0.0, r_lo)
    best = min(best, (abs(r_hi - target), 1.0, r_hi))
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        r = float(rate_fn(mid))
        best = min(best, (abs(r - target), mid, r))
        if abs(r - target) <= tol:
            return Calibration(mid, r, it)
        if r < target:
            lo = mid
        else:
            hi = mid
    return Calibration(best[1], best[2], max_iter)


def accuracy(scores, actions) -> float:
    """Fraction of rows whose argmax (first index on ties) equals the action."""
    s = np.asarray(scores.detach() if torch.is_tensor(scores) else scores)
    a = np.asarray(actions)
    if len(a) == 0:
        raise ValueError("empty validation set")
    return float(np.mean(np.argmax(s, axis=1) == a))


@dataclass
class PredictorConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def train_predictor(features, actions, cfg: PredictorConfig = PredictorConfig(), arch: Arch = Arch()) -> ActionPredictor:
    x = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(np.asarray(actions), dtype=torch.long)
    torch.manual_seed(cfg.seed)
    model = ActionPredictor(arch)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(y), generator=gen)
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def predictor_accuracy(model: ActionPredictor, features, actions, batch_size: int = 256) -> float:
    f = torch.as_tensor(features, dtype=torch.float32)
    with torch.no_grad():
        logits = torch.cat([model(f[i : i + batch_size]) for i in range(0, len(f), batch_size)]) if len(f) else None
    if logits is None:
        raise ValueError("empty validation set")
    return accuracy(logits, actions)


@dataclass
class AccuracyCurve:
    kind: str
    rates: tuple[float, ...]
    accuracy: tuple[float, ...]
    n_samples: int

    def at(self, rate: float) -> float:
        return self.accuracy[self.rates.index(rate)]


def masked_accuracy(
    kind: str,
    mask: Callable[[float, torch.Tensor], torch.Tensor],
    train_features,
    train_actions,
    val_features,
    val_actions,
    rates: Sequence[float] = RATES,
    cfg: PredictorConfig = PredictorConfig(),
    arch: Arch = Arch(),
) -> AccuracyCurve:
    """Train one predictor per rate on masked training features; score on masked validation features.

    ``mask(rate, features)`` returns masked features; rate 1.0 means unmasked.
    """
    if len(val_actions) == 0:
        raise ValueError("empty validation set")
    rates = tuple(sorted(rates))
    ft = torch.as_tensor(train_features, dtype=torch.float32)
    fv = torch.as_tensor(val_features, dtype=torch.float32)
    accs = []
    for r in rates:
        mt, mv = (ft, fv) if r >= 1.0 else (mask(r, ft), mask(r, fv))
        model = train_predictor(mt, train_actions, cfg, arch)
        accs.append(predictor_accuracy(model, mv, val_actions))
    return AccuracyCurve(kind, rates, tuple(accs), len(val_actions))


def threshold_97(rates: Sequence[float], accs: Sequence[float], frac: float = 0.97) -> float:
    """Smallest evaluated rate whose accuracy reaches ``frac`` of the best."""
    if len(rates) == 0:
        raise ValueError("empty curve")
    order = np.argsort(rates, kind="stable")
    r = np.asarray(rates, dtype=np.float64)[order]
    a = np.asarray(accs, dtype=np.float64)[order]
    return float(r[np.argmax(a >= frac * a.max())])


def relative_decrease(accs: Sequence[float]) -> np.ndarray:
    a = np.asarray(accs, dtype=np.float64)
    m = a.max()
    if m <= 0:
        raise ValueError("curve maximum is zero")
    return 100.0 * (m - a) / m


def t_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """(mean, low, high) Student-t interval with n-1 degrees of freedom."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    mean = float(v.mean())
    if n < 2:
        return mean, mean, mean
    half = stats.t.ppf(0.5 + level / 2.0, n - 1) * v.std(ddof=1) / math.sqrt(n)
    return mean, mean - half, mean + half


def relative_decrease_report(curves: dict[str, Sequence[float]], rates: Sequence[float] = RATES) -> list[dict]:
    """Per-rate mean and 95% interval of the relative decrease across games."""
    dec = np.stack([relative_decrease(c) for c in curves.values()])
    rows = []
    for j, r in enumerate(rates):
        mean, lo, hi = t_interval(dec[:, j])
        rows.append({"rate": r, "mean": mean, "ci_low": lo, "ci_high": hi})
    return rows


def _as_array(x) -> np.ndarray:
    return np.asarray(x.detach().cpu() if torch.is_tensor(x) else x, dtype=np.float64)


def alignment_score(psi, gamma):
    """Gaze mass captured per unit of attention; 1 means chance-level coverage.

    Accepts single maps (H, W) or batches (N, H, W); returns float or array.
    """
    p = _as_array(psi)
    g = _as_array(gamma)
    single = p.ndim == 2
    p = p.reshape(-1, p.shape[-2] * p.shape[-1])
    g = np.broadcast_to(g.reshape(-1, g.shape[-2] * g.shape[-1]), p.shape)
    ref = p[:, :1]
    mean = ref[:, 0] + (p - ref).mean(axis=1)  # exact for constant maps
    if np.any(mean <= 0):
        raise ValueError("attention map is identically zero")
    rel = p / mean[:, None]
    score = (g * rel).sum(axis=1) / g.sum(axis=1)
    return float(score[0]) if single else score


def heatmap_aggregate(maps) -> np.ndarray:
    m = _as_array(maps)
    if len(m) == 0:
        raise ValueError("need at least one map")
    return m.mean(axis=0)


def histogram(values, bins: int = 20, range_: tuple[float, float] | None = None):
    return np.histogram(_as_array(values), bins=bins, range=range_)


def binned_mean(x, y, edges) -> np.ndarray:
    """Mean of ``y`` within each bin of ``x`` (NaN where empty)."""
    x, y = _as_array(x), _as_array(y)
    idx = np.clip(np.digitize(x, edges) - 1, 0, len(edges) - 2)
    sums = np.bincount(idx, weights=y, minlength=len(edges) - 1)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def one_sided_t_test(a, b) -> float:
    """Paired test of mean(a - b) > 0."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape or len(a) < 2:
        raise ValueError("need equal-length samples with n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        m = d.mean()
        return 0.5 if m == 0 else (0.0 if m > 0 else 1.0)
    t = d.mean() / (sd / math.sqrt(len(d)))
    return float(stats.t.sf(t, len(d) - 1))
