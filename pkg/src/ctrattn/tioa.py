"""Recency-weighted gaze targets and the gaze-prediction network trained on them."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .autoencoder import TrainingError
from .data import FRAME_SIZE, MAX_TRAIL, ReplayMemory
from .nets import Arch, Encoder, TIOANet, encode

C = -2.95
MAX_AGE = 2.95
MERGE_PX = 6.0
TARGET_FLOOR = 1e-8
CACHE_FORMAT = "ctrattn-gaze-targets/1"


class GazeError(ValueError):
    pass


def weight(tau):
    """Recency weight: 1 for the newest sample, 0.1 at the oldest kept lag."""
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t > 0):
        raise ValueError("time lag must be <= 0")
    if np.any(t < -MAX_AGE):
        raise ValueError(f"time lag older than {MAX_AGE} s")
    w = 1.1 - np.power(10.0, t / C - 1.0)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class GazeGeometry:
    source_size: tuple[int, int]  # (width, height) of gaze coordinates
    px_per_degree: tuple[float, float]  # source px per visual degree, (x, y)
    merge_px: float = MERGE_PX
    frame_size: int = FRAME_SIZE

    def key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_target(trail, geom: GazeGeometry, backend=kernels) -> np.ndarray:
    """21x21 target map from a chronological (k, 3) trail of (x, y, t).

    Keeps the newest 60 samples younger than the age limit, merges nearby
    samples onto their newest member, weights by recency, blurs by one
    degree, then sums down with the encoder's window layout.
    """
    tr = np.asarray(trail, dtype=np.float64).reshape(-1, 3)[-MAX_TRAIL:]
    if len(tr) == 0:
        raise GazeError("empty gaze trail")
    tau = tr[:, 2] - tr[-1, 2]
    tr = tr[tau >= -MAX_AGE]
    cx, cy, ct = backend.cluster_gaze(
        np.ascontiguousarray(tr[:, 0]), np.ascontiguousarray(tr[:, 1]), np.ascontiguousarray(tr[:, 2]), geom.merge_px
    )
    w = weight(np.minimum(ct - tr[-1, 2], 0.0))
    sx = geom.frame_size / geom.source_size[0]
    sy = geom.frame_size / geom.source_size[1]
    m = backend.gaze_target(
        np.ascontiguousarray(cx * sx),
        np.ascontiguousarray(cy * sy),
        np.ascontiguousarray(w, dtype=np.float64),
        geom.px_per_degree[0] * sx,
        geom.px_per_degree[1] * sy,
        geom.frame_size,
    )
    m = np.asarray(m)
    return m / m.sum()


def build_targets(memory: ReplayMemory, geom: GazeGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Targets for every transition; returns (maps, has_gaze mask)."""
    side = geom.frame_size // 4
    maps = np.zeros((len(memory), side, side))
    valid = np.zeros(len(memory), dtype=bool)
    for i in range(len(memory)):
        tr = memory.trail(i)
        if len(tr):
            maps[i] = build_target(tr, geom)
            valid[i] = True
    return maps, valid


def _cache_key(memory: ReplayMemory, geom: GazeGeometry) -> str:
    h = hashlib.sha256(geom.key().encode())
    h.update(np.ascontiguousarray(memory.trail_data).tobytes())
    h.update(np.ascontiguousarray(memory.trail_offsets).tobytes())
    return h.hexdigest()


def cached_targets(memory: ReplayMemory, geom: GazeGeometry, path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load targets from ``path`` if it matches this memory and geometry, else build and store."""
    path = Path(path)
    key = _cache_key(memory, geom)
    if path.exists():
        with np.load(path) as z:
            if str(z["format"]) == CACHE_FORMAT and str(z["key"]) == key:
                return z["maps"], z["valid"]
    maps, valid = build_targets(memory, geom)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, format=CACHE_FORMAT, key=key, maps=maps, valid=valid)
    return maps, valid


def floor_target(target):
    t = torch.clamp(torch.as_tensor(target), min=TARGET_FLOOR)
    return t / t.sum(dim=(-2, -1), keepdim=True)


def kl_loss(log_pred, target, direction: str = "prediction"):
    """Batch-mean KL divergence between predicted and target maps.

    ``direction="prediction"`` sums pred*log(pred/target); ``"target"`` is
    the conventional target*log(target/pred).
    """
    tgt = floor_target(target).to(log_pred.dtype)
    if direction == "prediction":
        terms = log_pred.exp() * (log_pred - tgt.log())
    elif direction == "target":
        terms = tgt * (tgt.log() - log_pred)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return terms.sum(dim=(-2, -1)).mean()


@dataclass
class TioaConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 5e-4
    direction: str = "prediction"
    finetune_encoder: bool = True
    seed: int = 0


@dataclass
class TioaResult:
    model: TIOANet
    history: list[tuple[int, float]] = field(default_factory=list)


def train_tioa(
    states,
    targets,
    encoder: Encoder,
    cfg: TioaConfig = TioaConfig(),
    arch: Arch = Arch(),
    features=None,
    log_path: str | Path | None = None,
) -> TioaResult:
    """Fit the gaze predictor to target maps. Inputs must already exclude gaze-less transitions."""
    tg = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    if len(tg) == 0:
        raise TrainingError("no transitions with gaze to train on")
    torch.manual_seed(cfg.seed)
    model = TIOANet(arch)
    model.encoder.load_state_dict(encoder.state_dict())
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.finetune_encoder:
        x = torch.as_tensor(np.asarray(states), dtype=torch.float32)
        params = list(model.parameters())
        fwd = lambda xb: model.log_probs_from_features(model.encoder(xb))  # noqa: E731
    else:
        x = features if features is not None else encode(states, model.encoder)
        x = torch.as_tensor(x, dtype=torch.float32)
        for p in model.encoder.parameters():
            p.requires_grad_(False)
        params = list(model.head.parameters())
        fwd = model.log_probs_from_features
    opt = torch.optim.Adam(params, lr=cfg.lr)
    res = TioaResult(model)
    rows = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(tg), generator=gen)
        total = 0.0
        for i in range(0, len(tg), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = kl_loss(fwd(x[idx]), tg[idx], cfg.direction)
            if not torch.isfinite(loss):
                raise TrainingError(f"gaze model diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        res.history.append((epoch, total / len(tg)))
        rows.append((epoch, f"{total / len(tg):.10g}"))
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "kl"))
            w.writerows(rows)
    return res


def predict_maps(model: TIOANet, features, batch_size: int = 256) -> torch.Tensor:
    f = torch.as_tensor(features, dtype=torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(f), batch_size):
            out.append(model.predict_from_features(f[i : i + batch_size]))
    return torch.cat(out)


def uniform_baseline(targets, direction: str = "prediction") -> float:
    t = torch.as_tensor(np.asarray(targets), dtype=torch.float64)
    n = t.shape[-1] * t.shape[-2]
    log_u = torch.full_like(t, -math.log(n))
    return float(kl_loss(log_u, t, direction))


def binarize_gaze(gamma, rate: float) -> np.ndarray:
    """Mark the round(rate*cells) largest cells; ties go to the lower row-major index."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    g = np.asarray(gamma.detach().cpu() if torch.is_tensor(gamma) else gamma, dtype=np.float64)
    lead, cells = g.shape[:-2], g.shape[-2] * g.shape[-1]
    flat = g.reshape(-1, cells)
    k = int(math.floor(rate * cells + 0.5))
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(flat)
    np.put_along_axis(out, order, 1.0, axis=1)
    return out.reshape(*lead, g.shape[-2], g.shape[-1])


def warn_missing(valid: np.ndarray) -> None:
    missing = int((~valid).sum())
    if missing:
        warnings.warn(f"{missing} transitions without gaze excluded from gaze-model training", stacklevel=2)
