"""Joint training of the CTR attention network and its action predictor.

Each batch pairs target states with independently drawn source states.
Target attention keeps target features; whatever it leaves unattended is
filled with source features scaled by how little *both* maps attend there.
An action predictor must then recover the target's action from the blend,
which pushes attention towards hard 0/1 decisions. Sparsity inputs are
drawn log-uniformly, tiled across the batch, and their groups are held to
the requested mean activation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import TrainingError
from .nets import ActionPredictor, Arch, CTRNet, Encoder, encode

EPS = 1e-6
N_LAMBDA = 6
REPORT_COLUMNS = ("epoch", "total", "ap_blend", "ap", "lambda1", "lambda2", "beta")


@dataclass
class CtrConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_predictor: float = 1e-3
    lr_ctr: float = 5e-4
    n_lambda: int = N_LAMBDA
    lambda_range: tuple[float, float] = (0.01, 1.0)
    blend: bool = True
    finetune_encoder: bool = True
    seed: int = 0


@dataclass(frozen=True)
class CtrLossReport:
    total: float
    ap_blend: float
    ap: float
    lambda1: float
    lambda2: float
    beta: float
    epoch: int

    def row(self) -> list:
        return [self.epoch, self.total, self.ap_blend, self.ap, self.lambda1, self.lambda2, self.beta]


def _safe_sqrt(x):
    # zero value and zero gradient where the radicand vanishes
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def blend(f_t, psi_t, f_s, psi_s):
    """F_T*Psi_T + F_S*sqrt((1-Psi_T)(1-Psi_S)); maps broadcast over channels."""
    out = f_t * psi_t + f_s * _safe_sqrt((1.0 - psi_t) * (1.0 - psi_s))
    if torch.isnan(out).any():
        raise FloatingPointError("NaN in blended features")
    return out


def beta(epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(0.0, 1.0 - epoch / 100.0)


def lambda_groups(batch_size: int, n_lambda: int) -> torch.Tensor:
    return torch.arange(batch_size) % n_lambda


def sparsity_losses(psi, lams, groups=None, eps: float = EPS):
    """Relative deviation of each group's mean activation from its lambda.

    ``psi``: (B, ...) maps; ``lams``: (n,) per-group targets; ``groups``:
    (B,) group index per sample (defaults to one sample per group).
    Returns ``(L1, L2)`` where L2 only counts groups above their target.
    """
    psi = torch.as_tensor(psi)
    lams = torch.as_tensor(lams, dtype=psi.dtype)
    n = lams.numel()
    if groups is None:
        groups = torch.arange(psi.shape[0])
    per_sample = psi.reshape(psi.shape[0], -1).mean(dim=1)
    sums = torch.zeros(n, dtype=psi.dtype).index_add(0, groups, per_sample)
    counts = torch.zeros(n, dtype=psi.dtype).index_add(0, groups, torch.ones_like(per_sample))
    present = counts > 0  # a short final batch may not cover every group
    means = sums[present] / counts[present]
    lams = lams[present]
    terms = (means - lams).abs() / (lams.abs() + eps)
    l1 = terms.mean()
    l2 = (terms * (means > lams).to(psi.dtype)).mean()
    return l1, l2


def sample_lambdas(gen: torch.Generator, n: int, lo: float, hi: float) -> torch.Tensor:
    u = torch.rand(n, generator=gen, dtype=torch.float64)
    return torch.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))).float()


def sample_sources(gen: torch.Generator, targets: torch.Tensor, n: int) -> torch.Tensor:
    """Uniform over the other n-1 indices, independently per target."""
    s = torch.randint(0, n - 1, targets.shape, generator=gen)
    return s + (s >= targets).long()


def total_loss(ctr: CTRNet, predictor: ActionPredictor, f_t, f_s, actions, lams, epoch: int, use_blend: bool = True):
    """Returns (loss tensor, CtrLossReport) for one batch of features."""
    b = f_t.shape[0]
    groups = lambda_groups(b, lams.numel())
    lam_b = lams[groups]
    psi_t = ctr.attend(f_t, lam_b)
    if use_blend:
        psi_s = ctr.attend(f_s, lam_b)
        mixed = blend(f_t, psi_t, f_s, psi_s)
    else:
        mixed = f_t * psi_t
    l_apb = F.cross_entropy(predictor(mixed), actions)
    l_ap = F.cross_entropy(predictor(f_t), actions)
    l1, l2 = sparsity_losses(psi_t, lams, groups)
    bt = beta(epoch)
    loss = l_apb + l_ap + bt * l1 + (1.0 - bt) * l2
    rep = CtrLossReport(loss.item(), l_apb.item(), l_ap.item(), l1.item(), l2.item(), bt, epoch)
    return loss, rep


@dataclass
class CtrResult:
    ctr: CTRNet
    predictor: ActionPredictor
    reports: list[CtrLossReport] = field(default_factory=list)


def _mean_report(reps: list[CtrLossReport], weights: list[int], epoch: int) -> CtrLossReport:
    w = np.asarray(weights, dtype=np.float64)
    vals = np.array([[r.total, r.ap_blend, r.ap, r.lambda1, r.lambda2] for r in reps])
    m = (vals * w[:, None]).sum(0) / w.sum()
    return CtrLossReport(*map(float, m), beta=reps[0].beta, epoch=epoch)


def train_ctr(
    states,
    actions,
    encoder: Encoder,
    cfg: CtrConfig = CtrConfig(),
    arch: Arch = Arch(),
    features=None,
    log_path: str | Path | None = None,
) -> CtrResult:
    """Train CTR + action predictor on one player's training split.

    With ``finetune_encoder`` off, features are encoded once (or taken from
    ``features``) and the copied encoder stays frozen.
    """
    acts = torch.as_tensor(np.asarray(actions), dtype=torch.long)
    n = len(acts)
    if n < 2:
        raise TrainingError("need at least two transitions for source sampling")
    torch.manual_seed(cfg.seed)
    ctr = CTRNet(arch)
    ctr.encoder.load_state_dict(encoder.state_dict())
    predictor = ActionPredictor(arch)
    gen = torch.Generator().manual_seed(cfg.seed)

    if cfg.finetune_encoder:
        x = torch.as_tensor(np.asarray(states), dtype=torch.float32)
        ctr_params = list(ctr.parameters())
    else:
        x = features if features is not None else encode(states, ctr.encoder)
        x = torch.as_tensor(x, dtype=torch.float32)
        for p in ctr.encoder.parameters():
            p.requires_grad_(False)
        ctr_params = list(ctr.head.parameters())
    opt = torch.optim.Adam(
        [{"params": ctr_params, "lr": cfg.lr_ctr}, {"params": predictor.parameters(), "lr": cfg.lr_predictor}]
    )
    featurize = ctr.encoder if cfg.finetune_encoder else (lambda t: t)

    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
    result = CtrResult(ctr, predictor)
    try:
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            reps, sizes = [], []
            for i in range(0, n, cfg.batch_size):
                t_idx = perm[i : i + cfg.batch_size]
                s_idx = sample_sources(gen, t_idx, n)
                lams = sample_lambdas(gen, cfg.n_lambda, *cfg.lambda_range)
                last = result.reports[-1] if result.reports else None
                try:
                    loss, rep = total_loss(
                        ctr, predictor, featurize(x[t_idx]), featurize(x[s_idx]), acts[t_idx], lams, epoch, cfg.blend
                    )
                except FloatingPointError as exc:
                    raise TrainingError(f"CTR training diverged at epoch {epoch}; last report {last}") from exc
                if not math.isfinite(rep.total):
                    raise TrainingError(f"CTR training diverged at epoch {epoch}; last report {last}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                reps.append(rep)
                sizes.append(len(t_idx))
            summary = _mean_report(reps, sizes, epoch)
            result.reports.append(summary)
            if writer is not None:
                writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in summary.row()])
    finally:
        if fh is not None:
            fh.close()
    return result


def attention_maps(ctr: CTRNet, features, lam, batch_size: int = 256) -> torch.Tensor:
    """(N, 21, 21) attention maps for precomputed features at one lambda."""
    f = torch.as_tensor(features, dtype=torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(f), batch_size):
            fb = f[i : i + batch_size]
            out.append(ctr.attend(fb, torch.full((len(fb),), float(lam)))[:, 0])
    return torch.cat(out) if out else torch.zeros(0, f.shape[-2], f.shape[-1])


def config_dict(cfg: CtrConfig) -> dict:
    return asdict(cfg)
