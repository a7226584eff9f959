"""Reconstruction pre-training of the shared encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .nets import Arch, Autoencoder, NumericError


class TrainingError(RuntimeError):
    pass


@dataclass
class AeConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class AeResult:
    model: Autoencoder
    initial_val_mse: float
    final_val_mse: float
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)


def mse(model: Autoencoder, states: torch.Tensor, batch_size: int = 256) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(states), batch_size):
            x = states[i : i + batch_size]
            total += F.mse_loss(model(x), x, reduction="sum").item()
            n += x.numel()
    return total / max(n, 1)


def train_autoencoder(
    train_states,
    val_states=None,
    cfg: AeConfig = AeConfig(),
    arch: Arch = Arch(),
    log=None,
) -> AeResult:
    """Fit encoder+decoder to reconstruct states with MSE.

    ``train_states`` is an (N, 4, 84, 84) array. ``log`` receives
    ``(epoch, train_mse, val_mse)`` once per epoch.
    """
    x = torch.as_tensor(np.asarray(train_states), dtype=torch.float32)
    if len(x) == 0:
        raise TrainingError("empty training set")
    v = x if val_states is None else torch.as_tensor(np.asarray(val_states), dtype=torch.float32)
    torch.manual_seed(cfg.seed)
    model = Autoencoder(arch)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    initial = mse(model, v)
    res = AeResult(model, initial, initial)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(x), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(x), cfg.batch_size):
            xb = x[perm[i : i + cfg.batch_size]]
            loss = F.mse_loss(model(xb), xb)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
            count += len(xb)
        val = mse(model, v)
        if not math.isfinite(val):
            raise TrainingError(f"autoencoder diverged at epoch {epoch}")
        res.history.append((epoch, total / count, val))
        if log is not None:
            log(epoch, total / count, val)
    res.final_val_mse = res.history[-1][2] if res.history else initial
    return res


def reconstruct(model: Autoencoder, states) -> np.ndarray:
    x = torch.as_tensor(np.asarray(states), dtype=torch.float32)
    single = x.dim() == 3
    if single:
        x = x[None]
    with torch.no_grad():
        y = model(x)
    if not torch.isfinite(y).all():
        raise NumericError("non-finite reconstruction")
    y = y.numpy()
    return y[0] if single else y
