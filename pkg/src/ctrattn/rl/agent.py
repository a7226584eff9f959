"""Dueling double DQN over frozen, optionally attention-masked encoder features."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..data import ConfigError
from ..nets import Arch, CTRNet, DuelingQNet, Encoder, NumericError, TIOANet, dueling_combine, param_checksum
from ..tioa import binarize_gaze
from .buffer import PrioritizedBuffer

VARIANTS = ("plain", "ctr", "tioa", "inverted")
MASK_FLOOR = 0.1
MASK_RATE = 0.16
CURVE_COLUMNS = ("step", "episode", "reward", "epsilon", "loss")


@dataclass
class RlConfig:
    steps: int = 2_500_000
    buffer_size: int = 500_000
    batch_size: int = 32
    lr: float = 2.5e-4
    gamma: float = 0.99
    learning_starts: int = 25_000
    train_freq: int = 4
    target_update: int = 10_000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.1
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    huber_delta: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0

    @classmethod
    def toy(cls, **overrides) -> "RlConfig":
        base = cls(steps=50_000, buffer_size=10_000, learning_starts=1_000, target_update=1_000)
        return replace(base, **overrides)


def epsilon(step: int, total: int, start: float = 1.0, end: float = 0.1, fraction: float = 0.1) -> float:
    span = fraction * total
    if span <= 0:
        return end
    return start + (end - start) * min(1.0, step / span)


def beta_is(step: int, total: int, start: float = 0.4, end: float = 1.0) -> float:
    return start + (end - start) * min(1.0, step / max(total, 1))


def mask_features(features, kind: str, psi=None, gamma=None, rate: float = MASK_RATE, floor: float = MASK_FLOOR):
    """Apply one of the four feature masks.

    ``psi``: (B, 1, H, W) attention; ``gamma``: (B, H, W) gaze prediction.
    """
    if kind == "plain":
        return features
    if kind in ("ctr", "inverted"):
        if psi is None:
            raise ConfigError(f"{kind} masking needs an attention map")
        if kind == "ctr":
            return features * torch.where(psi < floor, torch.zeros_like(psi), psi)
        return features * (1.0 - psi)
    if kind == "tioa":
        if gamma is None:
            raise ConfigError("tioa masking needs a gaze prediction")
        m = torch.as_tensor(binarize_gaze(gamma, rate), dtype=features.dtype)
        return features * m[:, None]
    raise ConfigError(f"unknown mask variant {kind!r}")


class FeatureMasker:
    """Frozen state -> masked-feature pipeline for one variant."""

    def __init__(self, kind: str, encoder: Encoder, ctr: CTRNet | None = None, lam: float | None = None,
                 tioa: TIOANet | None = None, rate: float = MASK_RATE):
        if kind not in VARIANTS:
            raise ConfigError(f"unknown mask variant {kind!r}")
        if kind in ("ctr", "inverted") and (ctr is None or lam is None):
            raise ConfigError(f"{kind} variant requires CTR parameters and a calibrated lambda")
        if kind == "tioa" and tioa is None:
            raise ConfigError("tioa variant requires gaze-model parameters")
        self.kind, self.encoder, self.ctr, self.lam, self.tioa, self.rate = kind, encoder, ctr, lam, tioa, rate
        for m in self.modules().values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        self._share_ctr = ctr is not None and param_checksum(ctr.encoder) == param_checksum(encoder)
        self._share_tioa = tioa is not None and param_checksum(tioa.encoder) == param_checksum(encoder)

    def modules(self) -> dict[str, torch.nn.Module]:
        out = {"encoder": self.encoder}
        if self.ctr is not None:
            out["ctr"] = self.ctr
        if self.tioa is not None:
            out["tioa"] = self.tioa
        return out

    def checksums(self) -> dict[str, str]:
        return {k: param_checksum(m) for k, m in self.modules().items()}

    def __call__(self, states) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(states), dtype=torch.float32)
        with torch.no_grad():
            f = self.encoder(x)
            psi = gamma = None
            if self.kind in ("ctr", "inverted"):
                fc = f if self._share_ctr else self.ctr.encoder(x)
                psi = self.ctr.attend(fc, torch.full((len(x),), float(self.lam)))
            elif self.kind == "tioa":
                ft = f if self._share_tioa else self.tioa.encoder(x)
                gamma = self.tioa.predict_from_features(ft)
            return mask_features(f, self.kind, psi, gamma, self.rate)


def dueling_q(value, advantage):
    return dueling_combine(torch.as_tensor(value), torch.as_tensor(advantage))


def double_dqn_target(rewards, next_obs, dones, online, target, gamma: float = 0.99):
    """r + gamma * (1 - done) * Q_target(s', argmax_a Q_online(s', a))."""
    with torch.no_grad():
        a_star = online(next_obs).argmax(dim=1, keepdim=True)
        q_next = target(next_obs).gather(1, a_star).squeeze(1)
    return rewards + gamma * (1.0 - dones) * q_next


@dataclass
class RlResult:
    qnet: DuelingQNet
    episode_rewards: list[float] = field(default_factory=list)
    first_actions: list[int] = field(default_factory=list)
    checksums_before: dict[str, str] = field(default_factory=dict)
    checksums_after: dict[str, str] = field(default_factory=dict)
    updates: int = 0


def _greedy(qnet: DuelingQNet, feat: torch.Tensor) -> int:
    with torch.no_grad():
        return int(qnet(feat[None]).argmax(dim=1).item())


def train_rl(env, masker: FeatureMasker, cfg: RlConfig = RlConfig(), arch: Arch = Arch(),
             log_path: str | Path | None = None, record_actions: int = 1000) -> RlResult:
    """Run masked dueling double DQN with prioritized replay on ``env``.

    ``env`` follows the reset()/step(a) protocol of the toy environment; its
    own RNG should be seeded by the caller.
    """
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    qnet = DuelingQNet(arch)
    target = copy.deepcopy(qnet)
    for p in target.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(qnet.parameters(), lr=cfg.lr)
    shape = (arch.feature_channels, arch.feature_size, arch.feature_size)
    buf = PrioritizedBuffer(cfg.buffer_size, shape, alpha=cfg.alpha)
    res = RlResult(qnet, checksums_before=masker.checksums())

    rows = []
    feat = masker(env.reset()[None])[0]
    ep_reward, episode, losses = 0.0, 0, []
    for step in range(cfg.steps):
        eps = epsilon(step, cfg.steps, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
        if rng.random() < eps:
            action = int(rng.integers(arch.n_actions))
        else:
            action = _greedy(qnet, feat)
        if step < record_actions:
            res.first_actions.append(action)
        obs, reward, done, info = env.step(action)
        next_feat = masker(obs[None])[0]
        terminal = done and not info.get("truncated", False)
        buf.add(feat.numpy(), action, reward, next_feat.numpy(), terminal)
        ep_reward += reward

        if step >= cfg.learning_starts and step % cfg.train_freq == 0:
            batch, w, idx = buf.sample(cfg.batch_size, beta_is(step, cfg.steps, cfg.beta_start, cfg.beta_end), rng)
            obs_b = torch.from_numpy(batch["obs"].astype(np.float32))
            nxt_b = torch.from_numpy(batch["next_obs"].astype(np.float32))
            y = double_dqn_target(torch.from_numpy(batch["rewards"]), nxt_b, torch.from_numpy(batch["dones"]),
                                  qnet, target, cfg.gamma)
            q = qnet(obs_b).gather(1, torch.from_numpy(batch["actions"])[:, None]).squeeze(1)
            td = q - y
            loss = (torch.from_numpy(w).float() * F.huber_loss(q, y, reduction="none", delta=cfg.huber_delta)).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite TD loss at step {step} (episode {episode}, epsilon {eps:.3f})")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(qnet.parameters(), cfg.grad_clip)
            opt.step()
            buf.update_priorities(idx, td.detach().numpy())
            losses.append(loss.item())
            res.updates += 1
        if step % cfg.target_update == 0:
            target.load_state_dict(qnet.state_dict())

        if done:
            res.episode_rewards.append(ep_reward)
            mean_loss = float(np.mean(losses)) if losses else math.nan
            rows.append((step + 1, episode, f"{ep_reward:.10g}", f"{eps:.10g}", f"{mean_loss:.10g}"))
            episode += 1
            ep_reward, losses = 0.0, []
            feat = masker(env.reset()[None])[0]
        else:
            feat = next_feat

    res.checksums_after = masker.checksums()
    if res.checksums_after != res.checksums_before:
        raise RuntimeError("frozen feature modules changed during RL training")
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CURVE_COLUMNS)
            wr.writerows(rows)
    return res


def evaluate_policy(policy: Callable[[np.ndarray], int], env, episodes: int, eps: float = 0.01,
                    seed: int = 0, n_actions: int | None = None) -> list[float]:
    """Episodic scores of ``policy`` with an ``eps`` chance of a uniform random action."""
    rng = np.random.default_rng(seed)
    n_actions = n_actions or env.n_actions
    scores = []
    for _ in range(episodes):
        obs, done, total = env.reset(), False, 0.0
        while not done:
            a = int(rng.integers(n_actions)) if rng.random() < eps else int(policy(obs))
            obs, r, done, _ = env.step(a)
            total += r
        scores.append(total)
    return scores


def q_policy(qnet: DuelingQNet, masker: FeatureMasker) -> Callable[[np.ndarray], int]:
    qnet.eval()

    def act(obs):
        return _greedy(qnet, masker(obs[None])[0])

    return act


def rolling_mean(values, window: int = 200) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty(len(v))
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def config_dict(cfg: RlConfig) -> dict:
    return asdict(cfg)
