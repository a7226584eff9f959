"""Stage runners shared by the command line and the acceptance suite.

Every stage reads the artifacts of the stages it depends on from a run
directory and writes its own subdirectory with checkpoints, CSV metrics
and a ``manifest.json`` describing the configuration that produced it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .autoencoder import AeConfig, TrainingError, train_autoencoder
from .ctr import CtrConfig, attention_maps, train_ctr
from .data import ConfigError, ReplayMeta, ingest_external, load_replay, save_replay, split
from .metrics import (
    ACTIVATION_RATES,
    RATES,
    SMOOTH_LEVELS,
    Calibration,
    PredictorConfig,
    alignment_score,
    calibrate_lambda,
    heatmap_aggregate,
    masked_accuracy,
    threshold_97,
)
from .nets import Arch, Autoencoder, CTRNet, DuelingQNet, NumericError, TIOANet, encode, load_checkpoint, save_checkpoint
from .rl import FeatureMasker, RlConfig, evaluate_policy, q_policy, relative_score, render_report, train_rl
from .rl.agent import VARIANTS, mask_features
from .tioa import (
    GazeGeometry,
    TioaConfig,
    binarize_gaze,
    cached_targets,
    kl_loss,
    predict_maps,
    train_tioa,
    uniform_baseline,
)
from .toy import LaneCrossingEnv, RelevanceOracle, ToyConfig, generate_toy_replay

log = logging.getLogger(__name__)

STAGES = ("gen", "ingest", "train-ae", "train-ctr", "train-tioa", "eval", "rl-train", "rl-eval", "render")
PLAYERS = ("human", "agent")
MANIFEST = "manifest.json"


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, stage: str):
        super().__init__(f"missing artifact: {what} (run the '{stage}' stage first)")
        self.stage = stage


class StageExists(FileExistsError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class DataSection:
    source: str = "toy"  # "toy" or "external"
    n_human: int = 1400
    n_agent: int = 1400
    human_log: str | None = None
    agent_log: str | None = None
    game: str = "external"
    source_size: tuple[int, int] = (84, 84)
    px_per_degree: tuple[float, float] = (4.0, 4.0)
    frame_skip_align: int = 4


@dataclass
class EvalSection:
    rates: tuple[float, ...] = RATES
    reference_game: str = "Freeway"  # activation-rate fixture used for alignment and rendering
    n_align: int = 1024
    predictor_epochs: int = 30
    predictor_lr: float = 1e-3
    predictor_batch: int = 32
    calibration_tol: float = 0.002


@dataclass
class RlSection:
    variants: tuple[str, ...] = ("plain", "ctr")
    seeds: tuple[int, ...] = (0, 1, 2)
    mask_rate: float = 0.16
    eval_episodes: int = 50
    eval_epsilon: float = 0.01
    steps: int = 50_000
    buffer_size: int = 10_000
    batch_size: int = 32
    lr: float = 2.5e-4
    gamma: float = 0.99
    learning_starts: int = 1_000
    train_freq: int = 4
    target_update: int = 1_000
    eps_fraction: float = 0.1
    spawn_row: int | None = 8  # RL episodes start nearer the goal; see ToyConfig.spawn_row


@dataclass
class RenderSection:
    n_states: int = 10
    player: str = "human"
    levels: tuple[float, ...] = SMOOTH_LEVELS
    sequence_frames: int = 0


@dataclass
class ExperimentConfig:
    stage: str | None = None
    seed: int = 0
    players: tuple[str, ...] = PLAYERS
    toy: ToyConfig = field(default_factory=ToyConfig)
    data: DataSection = field(default_factory=DataSection)
    arch: Arch = field(default_factory=Arch.toy)
    ae: AeConfig = field(default_factory=lambda: AeConfig(epochs=4))
    ctr: CtrConfig = field(default_factory=lambda: CtrConfig(epochs=100, finetune_encoder=False))
    tioa: TioaConfig = field(default_factory=lambda: TioaConfig(epochs=40, finetune_encoder=False, lr=2e-3))
    eval: EvalSection = field(default_factory=EvalSection)
    rl: RlSection = field(default_factory=RlSection)
    render: RenderSection = field(default_factory=RenderSection)

    def to_dict(self) -> dict:
        d = _jsonable(dataclasses.asdict(self))
        for k in _SEEDED:
            d[k].pop("seed")  # always taken from the top-level seed
        return d

    def hash(self, stage: str | None = None) -> str:
        d = self.to_dict()
        d["stage"] = stage or self.stage
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def rl_config(self, seed: int) -> RlConfig:
        r = self.rl
        return RlConfig(
            steps=r.steps, buffer_size=r.buffer_size, batch_size=r.batch_size, lr=r.lr, gamma=r.gamma,
            learning_starts=r.learning_starts, train_freq=r.train_freq, target_update=r.target_update,
            eps_fraction=r.eps_fraction, seed=seed,
        )


_SEEDED = ("ae", "ctr", "tioa")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if where in _SEEDED and "seed" in data:
        unknown.append("seed (use the top-level seed)")
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    base = cls.toy() if cls is Arch else cls()
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    sections = {
        "toy": ToyConfig, "data": DataSection, "arch": Arch, "ae": AeConfig, "ctr": CtrConfig,
        "tioa": TioaConfig, "eval": EvalSection, "rl": RlSection, "render": RenderSection,
    }
    top = {"stage", "seed", "players"}
    unknown = sorted(set(d) - top - set(sections))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig()
    kw: dict[str, Any] = {}
    for name, cls in sections.items():
        if name in d:
            kw[name] = _build(cls, d[name], name)
    if "players" in d:
        kw["players"] = tuple(d["players"])
    for k in ("stage", "seed"):
        if k in d:
            kw[k] = d[k]
    cfg = replace(cfg, **kw)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.stage is not None and cfg.stage not in STAGES:
        raise ConfigError(f"unknown stage {cfg.stage!r}; choose from {', '.join(STAGES)}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not cfg.players or any(p not in PLAYERS for p in cfg.players):
        raise ConfigError(f"players must be a subset of {PLAYERS}")
    bad = [v for v in cfg.rl.variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown mask variant(s) {bad}")
    if cfg.eval.reference_game not in ACTIVATION_RATES:
        raise ConfigError(f"reference_game must be one of {sorted(ACTIVATION_RATES)}")
    if cfg.data.source not in ("toy", "external"):
        raise ConfigError("data.source must be 'toy' or 'external'")
    if cfg.render.player not in cfg.players:
        raise ConfigError("render.player must be one of the configured players")
    replace(cfg.toy, spawn_row=cfg.rl.spawn_row)  # ToyConfig checks the range


def load_config(path: str | Path | None) -> ExperimentConfig:
    """YAML/JSON config file, or a stage manifest (its ``config`` entry is used)."""
    if path is None:
        return config_from_dict({})
    import yaml

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if "config_hash" in raw and "config" in raw:
        raw = dict(raw["config"], stage=raw.get("stage"))
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# run directory bookkeeping


class Run:
    """Paths and manifests for one run directory."""

    def __init__(self, root: str | Path, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def require(self, stage: str, *names: str) -> Path:
        d = self.dir(stage)
        if not (d / MANIFEST).exists():
            raise MissingArtifact(f"{d}", stage)
        for n in names:
            if not (d / n).exists():
                raise MissingArtifact(f"{d / n}", stage)
        return d

    def begin(self, stage: str, force: bool = False) -> Path:
        d = self.dir(stage)
        m = d / MANIFEST
        if m.exists() and not force:
            old = json.loads(m.read_text()).get("config_hash")
            same = old == self.cfg.hash(stage)
            why = "identical configuration" if same else "a different configuration"
            raise StageExists(f"{d} already holds a '{stage}' run with {why}; pass --force to overwrite")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def finish(self, stage: str, inputs: tuple[str, ...] = (), outputs: dict | None = None) -> Path:
        d = self.dir(stage)
        deps = {}
        for s in inputs:
            mp = self.dir(s) / MANIFEST
            if mp.exists():
                deps[s] = json.loads(mp.read_text())["config_hash"]
        manifest = {
            "stage": stage,
            "config_hash": self.cfg.hash(stage),
            "package_version": __version__,
            "seed": self.cfg.seed,
            "inputs": deps,
            "outputs": outputs or {},
            "config": self.cfg.to_dict(),
        }
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return d


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return v


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# data


def player_seed(cfg: ExperimentConfig, player: str) -> int:
    return cfg.seed * 2 + PLAYERS.index(player)


def generate(cfg: ExperimentConfig, player: str):
    n = cfg.data.n_human if player == "human" else cfg.data.n_agent
    return generate_toy_replay(cfg.toy, n, player_seed(cfg, player), player)


def save_oracle(oracle: RelevanceOracle, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, masks=oracle.masks, decoy=oracle.decoy)


def load_oracle(path: Path) -> RelevanceOracle | None:
    if not path.exists():
        return None
    with np.load(path) as z:
        return RelevanceOracle(masks=z["masks"], decoy=z["decoy"])


def stage_gen(run: Run) -> dict:
    cfg = run.cfg
    d = run.dir("gen")
    rows = []
    for player in cfg.players:
        mem, oracle = generate(cfg, player)
        save_replay(mem, d / player)
        save_oracle(oracle, d / f"{player}_oracle.npz")
        frac = np.bincount(mem.actions, minlength=mem.meta.n_actions) / len(mem)
        rows.append([player, len(mem), *frac, float(oracle.decoy.mean()), int(mem.has_gaze().sum())])
    write_csv(d / "summary.csv", ["player", "n", "p_up", "p_stay", "p_down", "decoy_fraction", "with_gaze"], rows)
    return {"players": list(cfg.players)}


def stage_ingest(run: Run) -> dict:
    cfg = run.cfg
    d = run.dir("gen")
    rows = []
    for player in cfg.players:
        src = cfg.data.human_log if player == "human" else cfg.data.agent_log
        if not src:
            raise ConfigError(f"data.{player}_log is required for ingestion")
        meta = ReplayMeta(cfg.data.game, player, cfg.data.frame_skip_align, cfg.arch.n_actions, cfg.data.source_size)
        mem = ingest_external(src, meta, cfg.data.frame_skip_align)
        save_replay(mem, d / player)
        rows.append([player, len(mem), int(mem.has_gaze().sum())])
    write_csv(d / "summary.csv", ["player", "n", "with_gaze"], rows)
    return {"players": list(cfg.players)}


def load_data(run: Run, player: str):
    d = run.require("gen", player)
    return load_replay(d / player), load_oracle(d / f"{player}_oracle.npz")


def gaze_geometry(cfg: ExperimentConfig, memory) -> GazeGeometry:
    ppd = cfg.toy.px_per_degree if cfg.data.source == "toy" else cfg.data.px_per_degree
    return GazeGeometry(source_size=tuple(memory.meta.source_size), px_per_degree=tuple(ppd))


# --------------------------------------------------------------------------
# training stages


def stage_train_ae(run: Run) -> dict:
    cfg = run.cfg
    tr_states, va_states = [], []
    for player in cfg.players:
        mem, _ = load_data(run, player)
        tr, va = split(mem, cfg.seed)
        tr_states.append(mem.states(tr))
        va_states.append(mem.states(va))
    res = train_autoencoder(
        np.concatenate(tr_states), np.concatenate(va_states), replace(cfg.ae, seed=cfg.seed), cfg.arch
    )
    d = run.dir("train-ae")
    save_checkpoint(d / "ae.npz", {"autoencoder": res.model}, {"arch": cfg.arch.to_dict()})
    write_csv(d / "history.csv", ["epoch", "train_mse", "val_mse"], res.history)
    return {"initial_val_mse": res.initial_val_mse, "final_val_mse": res.final_val_mse}


def load_ae(run: Run) -> Autoencoder:
    d = run.require("train-ae", "ae.npz")
    states, _ = load_checkpoint(d / "ae.npz")
    model = Autoencoder(run.cfg.arch)
    model.load_state_dict(states["autoencoder"])
    model.eval()
    return model


def features_for(run: Run, player: str, encoder) -> tuple[Any, torch.Tensor, np.ndarray, np.ndarray]:
    mem, oracle = load_data(run, player)
    return mem, encode(mem.states(), encoder), *split(mem, run.cfg.seed)


def stage_train_ctr(run: Run) -> dict:
    cfg = run.cfg
    ae = load_ae(run)
    d = run.dir("train-ctr")
    out = {}
    for player in cfg.players:
        mem, feats, tr, _ = features_for(run, player, ae.encoder)
        res = train_ctr(
            mem.states(tr) if cfg.ctr.finetune_encoder else None,
            mem.actions[tr],
            ae.encoder,
            replace(cfg.ctr, seed=cfg.seed),
            cfg.arch,
            features=None if cfg.ctr.finetune_encoder else feats[tr],
            log_path=d / f"{player}_history.csv",
        )
        save_checkpoint(d / f"{player}.npz", {"ctr": res.ctr, "predictor": res.predictor}, {"player": player})
        out[player] = res.reports[-1].total if res.reports else math.nan
    return {"final_total_loss": out}


def load_ctr(run: Run, player: str) -> CTRNet:
    d = run.require("train-ctr", f"{player}.npz")
    states, _ = load_checkpoint(d / f"{player}.npz")
    net = CTRNet(run.cfg.arch)
    net.load_state_dict(states["ctr"])
    net.eval()
    return net


def stage_train_tioa(run: Run) -> dict:
    cfg = run.cfg
    if "human" not in cfg.players:
        raise ConfigError("the gaze model needs the human player's data")
    ae = load_ae(run)
    mem, feats, tr, va = features_for(run, "human", ae.encoder)
    d = run.dir("train-tioa")
    maps, valid = cached_targets(mem, gaze_geometry(cfg, mem), d / "targets.npz")
    tr = tr[valid[tr]]
    va = va[valid[va]]
    res = train_tioa(
        mem.states(tr) if cfg.tioa.finetune_encoder else None,
        maps[tr],
        ae.encoder,
        replace(cfg.tioa, seed=cfg.seed),
        cfg.arch,
        features=None if cfg.tioa.finetune_encoder else feats[tr],
        log_path=d / "history.csv",
    )
    save_checkpoint(d / "human.npz", {"tioa": res.model}, {"player": "human"})
    with torch.no_grad():
        f_va = feats[va] if not cfg.tioa.finetune_encoder else encode(mem.states(va), res.model.encoder)
        val_kl = float(kl_loss(res.model.log_probs_from_features(f_va), torch.as_tensor(maps[va]), cfg.tioa.direction))
    base = uniform_baseline(maps[va], cfg.tioa.direction)
    write_csv(d / "validation.csv", ["val_kl", "uniform_kl"], [[val_kl, base]])
    return {"val_kl": val_kl, "uniform_kl": base}


def load_tioa(run: Run) -> TIOANet:
    d = run.require("train-tioa", "human.npz")
    states, _ = load_checkpoint(d / "human.npz")
    net = TIOANet(run.cfg.arch)
    net.load_state_dict(states["tioa"])
    net.eval()
    return net


# --------------------------------------------------------------------------
# evaluation


def mean_rate(ctr: CTRNet, features, lam: float) -> float:
    return float(attention_maps(ctr, features, lam).double().mean())


def calibrate(ctr: CTRNet, features, target: float, tol: float = 0.002) -> Calibration:
    return calibrate_lambda(lambda lam: mean_rate(ctr, features, lam), target, tol=tol)


def ctr_mask(ctr: CTRNet, lams: dict[float, float]):
    def mask(rate, feats):
        psi = ctr.attend(feats, torch.full((len(feats),), lams[rate])).detach()
        return feats * psi

    return mask


def tioa_mask(tioa: TIOANet):
    def mask(rate, feats):
        gamma = predict_maps(tioa, feats)
        return mask_features(feats, "tioa", gamma=gamma.numpy(), rate=rate)

    return mask


def predictor_config(cfg: ExperimentConfig) -> PredictorConfig:
    e = cfg.eval
    return PredictorConfig(epochs=e.predictor_epochs, batch_size=e.predictor_batch, lr=e.predictor_lr, seed=cfg.seed)


def alignment_sample(cfg: ExperimentConfig, sizes: dict[str, int]) -> dict[str, np.ndarray]:
    """Half of ``n_align`` validation states from each player (fewer if unavailable)."""
    rng = np.random.default_rng(cfg.seed)
    per = cfg.eval.n_align // len(sizes)
    return {p: np.sort(rng.choice(n, size=min(per, n), replace=False)) for p, n in sizes.items()}


def stage_eval(run: Run) -> dict:
    cfg = run.cfg
    d = run.dir("eval")
    ae = load_ae(run)
    tioa = load_tioa(run) if "human" in cfg.players else None
    rates = tuple(r for r in cfg.eval.rates if r < 1.0)
    fixture = ACTIVATION_RATES[cfg.eval.reference_game]
    cal_rows, acc_rows, summary = [], [], {"threshold_97": {}, "alignment": {}}
    val_feats, ctrs, val_mems = {}, {}, {}
    for player in cfg.players:
        mem, feats, tr, va = features_for(run, player, ae.encoder)
        ctr = load_ctr(run, player)
        ctrs[player], val_feats[player], val_mems[player] = ctr, feats[va], (mem, va)
        lams = {}
        for r in sorted(set(rates) | {fixture[player]}):
            c = calibrate(ctr, feats[tr], r, cfg.eval.calibration_tol)
            lams[r] = c.lam
            cal_rows.append([player, r, c.lam, c.rate, mean_rate(ctr, feats[va], c.lam), c.iterations])
        summary.setdefault("lambda", {})[player] = lams
        curves = [masked_accuracy("ctr", ctr_mask(ctr, lams), feats[tr], mem.actions[tr], feats[va],
                                  mem.actions[va], cfg.eval.rates, predictor_config(cfg), cfg.arch)]
        if tioa is not None:
            curves.append(masked_accuracy("tioa", tioa_mask(tioa), feats[tr], mem.actions[tr], feats[va],
                                          mem.actions[va], cfg.eval.rates, predictor_config(cfg), cfg.arch))
        for c in curves:
            acc_rows += [[player, c.kind, r, a, c.n_samples] for r, a in zip(c.rates, c.accuracy)]
            summary["threshold_97"][f"{player}/{c.kind}"] = threshold_97(c.rates, c.accuracy)
    write_csv(d / "calibration.csv", ["player", "target", "lambda", "train_rate", "val_rate", "iterations"], cal_rows)
    write_csv(d / "accuracy.csv", ["player", "mask", "rate", "accuracy", "n_val"], acc_rows)

    if tioa is not None:
        from .render import save_heatmap, save_histogram  # matplotlib loads lazily

        align_rows = []
        picks = alignment_sample(cfg, {p: len(val_feats[p]) for p in cfg.players})
        scores = {}
        for player in cfg.players:
            idx = picks[player]
            f = val_feats[player][idx]
            gamma = predict_maps(tioa, f).numpy()
            lam = summary["lambda"][player][fixture[player]]
            psi = attention_maps(ctrs[player], f, lam).numpy()
            s = alignment_score(psi, gamma)
            scores[player] = s
            align_rows += [[player, int(val_mems[player][1][i]), v] for i, v in zip(idx, s)]
            summary["alignment"][player] = {"mean": float(np.mean(s)), "std": float(np.std(s)), "n": len(s)}
            save_heatmap(heatmap_aggregate(psi), d / f"heatmap_{player}.png", f"{player} mean attention")
        save_histogram(scores, d / "alignment_hist.png")
        write_csv(d / "alignment.csv", ["player", "transition", "alignment"], align_rows)
    write_json(d / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# reinforcement learning


def make_masker(run: Run, variant: str, encoder) -> tuple[FeatureMasker, float | None]:
    cfg = run.cfg
    if variant == "plain":
        return FeatureMasker("plain", encoder), None
    if variant in ("ctr", "inverted"):
        ctr = load_ctr(run, "human")
        mem, feats, tr, _ = features_for(run, "human", encoder)
        lam = calibrate(ctr, feats[tr], cfg.rl.mask_rate, cfg.eval.calibration_tol).lam
        return FeatureMasker(variant, encoder, ctr=ctr, lam=lam), lam
    return FeatureMasker("tioa", encoder, tioa=load_tioa(run), rate=cfg.rl.mask_rate), None


def rl_env(cfg: ExperimentConfig, seed: int, evaluation: bool = False) -> LaneCrossingEnv:
    toy = replace(cfg.toy, spawn_row=cfg.rl.spawn_row)
    return LaneCrossingEnv(toy, seed=10_000 * (1 + int(evaluation)) + 100 * cfg.seed + seed)


def stage_rl_train(run: Run) -> dict:
    cfg = run.cfg
    ae = load_ae(run)
    d = run.dir("rl-train")
    out = {}
    for variant in cfg.rl.variants:
        masker, lam = make_masker(run, variant, ae.encoder)
        for s in cfg.rl.seeds:
            res = train_rl(rl_env(cfg, s), masker, cfg.rl_config(s), cfg.arch, log_path=d / variant / f"seed{s}.csv")
            save_checkpoint(d / variant / f"seed{s}.npz", {"qnet": res.qnet}, {"variant": variant, "lambda": lam})
            out[f"{variant}/seed{s}"] = float(np.mean(res.episode_rewards[-50:])) if res.episode_rewards else math.nan
    write_json(d / "train_summary.json", out)
    return out


def stage_rl_eval(run: Run) -> dict:
    cfg = run.cfg
    ae = load_ae(run)
    d_in = run.require("rl-train")
    d = run.dir("rl-eval")
    rows, means = [], {}
    rng_policy = np.random.default_rng(cfg.seed)
    random_scores = []
    for s in cfg.rl.seeds:
        random_scores += evaluate_policy(lambda obs: int(rng_policy.integers(cfg.arch.n_actions)),
                                         rl_env(cfg, s, True), cfg.rl.eval_episodes, eps=1.0, seed=s)
    rows += [["random", -1, i, v] for i, v in enumerate(random_scores)]
    means["random"] = float(np.mean(random_scores))
    for variant in cfg.rl.variants:
        masker, _ = make_masker(run, variant, ae.encoder)
        pooled = []
        for s in cfg.rl.seeds:
            ck = d_in / variant / f"seed{s}.npz"
            if not ck.exists():
                raise MissingArtifact(str(ck), "rl-train")
            q = DuelingQNet(cfg.arch)
            q.load_state_dict(load_checkpoint(ck)[0]["qnet"])
            sc = evaluate_policy(q_policy(q, masker), rl_env(cfg, s, True), cfg.rl.eval_episodes,
                                 eps=cfg.rl.eval_epsilon, seed=s)
            rows += [[variant, s, i, v] for i, v in enumerate(sc)]
            pooled += sc
        means[variant] = float(np.mean(pooled))
    write_csv(d / "scores.csv", ["variant", "seed", "episode", "score"], rows)
    rel = {}
    if "plain" in means and means["plain"] != means["random"]:
        game = cfg.toy.game
        for v in cfg.rl.variants:
            rel[v] = relative_score({game: means[v]}, {game: means["plain"]}, {game: means["random"]})
        (d / "relative.csv").write_text(render_report(rel))
    write_json(d / "summary.json", {"mean_score": means, "relative": rel})
    return {"mean_score": means, "relative": rel}


# --------------------------------------------------------------------------
# rendering


def stage_render(run: Run) -> dict:
    from .render import render_smoothed, save_heatmap, write_overlays, write_sequence

    cfg = run.cfg
    player = cfg.render.player
    ae = load_ae(run)
    mem, feats, tr, va = features_for(run, player, ae.encoder)
    ctr = load_ctr(run, player)
    d = run.dir("render")
    fixture = ACTIVATION_RATES[cfg.eval.reference_game][player]
    lam = calibrate(ctr, feats[tr], fixture, cfg.eval.calibration_tol).lam
    idx = va[: cfg.render.n_states]
    frames = mem.states(idx)[:, -1]
    psi = attention_maps(ctr, feats[idx], lam).numpy()
    write_overlays(frames, psi, d / "overlays")
    save_heatmap(heatmap_aggregate(attention_maps(ctr, feats[va], lam).numpy()), d / "heatmap.png", f"{player}")
    level_lams = [calibrate(ctr, feats[tr], r, cfg.eval.calibration_tol).lam for r in cfg.render.levels]
    out = {"lambda": lam, "level_lambdas": level_lams, "overlays": len(idx)}
    if cfg.render.sequence_frames > 0:
        seq = np.arange(min(cfg.render.sequence_frames, len(mem)))
        maps = np.stack([attention_maps(ctr, feats[seq], lv).numpy() for lv in level_lams])
        write_sequence(mem.states(seq)[:, -1], render_smoothed(maps), d / "sequence")
        out["sequence_frames"] = len(seq)
    write_csv(d / "levels.csv", ["level", "lambda"], list(zip(cfg.render.levels, level_lams)))
    return out


# --------------------------------------------------------------------------

RUNNERS = {
    "gen": (stage_gen, ()),
    "ingest": (stage_ingest, ()),
    "train-ae": (stage_train_ae, ("gen",)),
    "train-ctr": (stage_train_ctr, ("gen", "train-ae")),
    "train-tioa": (stage_train_tioa, ("gen", "train-ae")),
    "eval": (stage_eval, ("gen", "train-ae", "train-ctr", "train-tioa")),
    "rl-train": (stage_rl_train, ("gen", "train-ae", "train-ctr", "train-tioa")),
    "rl-eval": (stage_rl_eval, ("rl-train",)),
    "render": (stage_render, ("gen", "train-ae", "train-ctr")),
}
# ingest writes where gen would, so downstream stages look in one place
OUTPUT_DIR = {"ingest": "gen"}


def run_stage(root: str | Path, cfg: ExperimentConfig, stage: str, force: bool = False) -> dict:
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    cfg = replace(cfg, stage=stage)
    run = Run(root, cfg)
    fn, deps = RUNNERS[stage]
    for dep in deps:
        if stage in ("rl-train",) and dep == "train-tioa" and "tioa" not in cfg.rl.variants:
            continue
        if stage == "eval" and dep == "train-tioa" and "human" not in cfg.players:
            continue
        run.require(dep)
    target = OUTPUT_DIR.get(stage, stage)
    run.begin(target, force)
    try:
        outputs = fn(run)
    except (FloatingPointError, TrainingError) as exc:
        raise NumericError(str(exc)) from exc
    run.finish(target, deps, outputs)
    log.info("stage %s done -> %s", stage, run.dir(target))
    return outputs
