"""Replay memories with gaze trails.

A :class:`ReplayMemory` stores every kept frame once; transitions reference
the index of the newest frame of their state, so a state is the 4 frames
ending at that index and the next state is shifted by one frame.

Two on-disk layouts are supported:

* the *archive* (``save_replay``/``load_replay``): lossless, used between
  pipeline stages;
* the *log* (``export_log``/``ingest_external``): an index CSV plus a frame
  directory of images, the intermediate format for external recordings.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FRAME_SIZE = 84
STACK = 4
MAX_TRAIL = 60
ARCHIVE_FORMAT = "ctrattn-replay/1"
LOG_COLUMNS = ("frame_id", "episode_id", "action", "reward", "gaze_x", "gaze_y", "gaze_t")
LUMA = (0.299, 0.587, 0.114)


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    source_size: tuple[int, int] = (FRAME_SIZE, FRAME_SIZE)

    def __post_init__(self):
        p = self.pixels
        if p.shape != (FRAME_SIZE, FRAME_SIZE):
            raise ValueError(f"frame must be {FRAME_SIZE}x{FRAME_SIZE}, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("frame pixels must lie in [0, 1]")


@dataclass(frozen=True)
class State:
    """Four most recent frames, oldest first."""

    frames: tuple[Frame, ...]

    def __post_init__(self):
        if len(self.frames) != STACK:
            raise ValueError(f"a state holds exactly {STACK} frames")

    def to_array(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames]).astype(np.float32)


@dataclass(frozen=True)
class GazeSample:
    x: float
    y: float
    t: float


@dataclass(frozen=True)
class Transition:
    state: State
    action: int
    reward: float
    next_state: State
    done: bool
    gaze_trail: tuple[GazeSample, ...] = ()


@dataclass
class ReplayMeta:
    game: str
    player: str  # "human" or "agent"
    frame_skip: int = 4
    n_actions: int = 3
    source_size: tuple[int, int] = (FRAME_SIZE, FRAME_SIZE)

    def __post_init__(self):
        if self.player not in ("human", "agent"):
            raise ConfigError(f"player must be 'human' or 'agent', got {self.player!r}")
        self.source_size = tuple(int(v) for v in self.source_size)

    def to_dict(self) -> dict:
        return {
            "game": self.game,
            "player": self.player,
            "frame_skip": self.frame_skip,
            "n_actions": self.n_actions,
            "source_size": list(self.source_size),
        }


@dataclass(eq=False)
class ReplayMemory:
    frames: np.ndarray  # (n_frames, 84, 84) float32 in [0, 1]
    episode: np.ndarray  # (n_frames,) episode id of each frame
    newest: np.ndarray  # (n,) frame index of the newest frame of each state
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)
    dones: np.ndarray  # (n,) bool
    trail_data: np.ndarray  # (total_samples, 3) x, y, t
    trail_offsets: np.ndarray  # (n + 1,)
    meta: ReplayMeta
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.newest = np.asarray(self.newest, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.episode = np.asarray(self.episode, dtype=np.int64)
        self.trail_data = np.asarray(self.trail_data, dtype=np.float64).reshape(-1, 3)
        self.trail_offsets = np.asarray(self.trail_offsets, dtype=np.int64)
        n = len(self.newest)
        if not (len(self.actions) == len(self.rewards) == len(self.dones) == n):
            raise ValueError("per-transition arrays disagree in length")
        if len(self.trail_offsets) != n + 1:
            raise ValueError("trail_offsets must have n + 1 entries")
        if n and (self.actions.min() < 0 or self.actions.max() >= self.meta.n_actions):
            raise ValueError("action out of range")
        if n and (self.newest.min() < STACK - 1 or self.newest.max() + 1 >= len(self.frames)):
            raise ValueError("transition frame index out of range")

    def __len__(self) -> int:
        return len(self.newest)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayMemory):
            return NotImplemented
        arrays = ("frames", "episode", "newest", "actions", "rewards", "dones", "trail_data", "trail_offsets")
        return (
            self.meta.to_dict() == other.meta.to_dict()
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.extras.keys() == other.extras.keys()
            and all(_same(self.extras[k], other.extras[k]) for k in self.extras)
        )

    def states(self, idx: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
        """Stacked states (n, 4, 84, 84) for the given transition indices."""
        newest = self.newest if idx is None else self.newest[np.asarray(idx)]
        return self.frames[newest[:, None] + np.arange(-STACK + 1, 1)[None, :]]

    def next_states(self, idx: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
        newest = self.newest if idx is None else self.newest[np.asarray(idx)]
        return self.frames[newest[:, None] + np.arange(-STACK + 2, 2)[None, :]]

    def trail(self, i: int) -> np.ndarray:
        return self.trail_data[self.trail_offsets[i] : self.trail_offsets[i + 1]]

    def has_gaze(self) -> np.ndarray:
        return np.diff(self.trail_offsets) > 0

    def __getitem__(self, i: int) -> Transition:
        src = self.meta.source_size

        def state(arr):
            return State(tuple(Frame(f, src) for f in arr))

        return Transition(
            state=state(self.states([i])[0]),
            action=int(self.actions[i]),
            reward=float(self.rewards[i]),
            next_state=state(self.next_states([i])[0]),
            done=bool(self.dones[i]),
            gaze_trail=tuple(GazeSample(*map(float, s)) for s in self.trail(i)),
        )


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    if np.issubdtype(a.dtype, np.floating) and np.issubdtype(b.dtype, np.floating):
        return np.array_equal(a, b, equal_nan=True)
    return np.array_equal(a, b)


def split(memory: ReplayMemory | int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Random 80/20 split of transition indices; both halves sorted."""
    n = memory if isinstance(memory, int) else len(memory)
    if n < 5:
        raise ConfigError(f"need at least 5 transitions to split, got {n}")
    n_train = int(math.floor(train_fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def build_memory(
    episodes: Iterable[dict],
    meta: ReplayMeta,
    extras: dict[str, list[np.ndarray]] | None = None,
) -> ReplayMemory:
    """Assemble a memory from per-episode kept frames.

    Each episode dict holds ``frames`` (m, 84, 84), ``actions`` (m,),
    ``rewards`` (m,) and ``trails`` (list of m arrays (k, 3)). Transitions
    are formed for frames 3..m-2 so that states never cross an episode
    boundary; ``extras`` are per-frame arrays indexed the same way.
    """
    frames, episode, newest, actions, rewards, dones, trails = [], [], [], [], [], [], []
    extra_out: dict[str, list] = {k: [] for k in (extras or {})}
    base = 0
    for e, ep in enumerate(episodes):
        m = len(ep["frames"])
        frames.append(np.asarray(ep["frames"], dtype=np.float32))
        episode.append(np.full(m, ep.get("episode_id", e), dtype=np.int64))
        for i in range(STACK - 1, m - 1):
            newest.append(base + i)
            actions.append(int(ep["actions"][i]))
            rewards.append(float(ep["rewards"][i]))
            dones.append(i + 1 == m - 1)
            trails.append(np.asarray(ep["trails"][i], dtype=np.float64).reshape(-1, 3)[-MAX_TRAIL:])
            for k in extra_out:
                extra_out[k].append(extras[k][e][i])
        base += m
    offsets = np.concatenate([[0], np.cumsum([len(t) for t in trails])]).astype(np.int64)
    return ReplayMemory(
        frames=np.concatenate(frames) if frames else np.zeros((0, FRAME_SIZE, FRAME_SIZE), np.float32),
        episode=np.concatenate(episode) if episode else np.zeros(0, np.int64),
        newest=np.asarray(newest, dtype=np.int64),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards),
        dones=np.asarray(dones, dtype=bool),
        trail_data=np.concatenate(trails) if trails else np.zeros((0, 3)),
        trail_offsets=offsets,
        meta=meta,
        extras={k: np.stack(v) for k, v in extra_out.items() if v},
    )


def stack_states(frames: np.ndarray) -> np.ndarray:
    """All complete 4-stacks of one episode's kept frames."""
    m = len(frames)
    if m < STACK:
        return np.zeros((0, STACK) + frames.shape[1:], dtype=frames.dtype)
    return np.stack([frames[i - STACK + 1 : i + 1] for i in range(STACK - 1, m)])


# --------------------------------------------------------------------------
# archive


def save_replay(memory: ReplayMemory, path: str | Path) -> Path:
    """Write the lossless archive: ``meta.json``, ``index.csv``, ``frames.bin``.

    ``frames.bin`` is raw float32, little-endian, C order, shape given in
    ``meta.json``. ``trails.bin`` holds the concatenated gaze samples as
    float64 little-endian (x, y, t) rows; ``extras.npz`` optional arrays.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": ARCHIVE_FORMAT,
        "byte_order": "little",
        "frames_dtype": "float32",
        "frames_shape": list(memory.frames.shape),
        "trail_dtype": "float64",
        "n_transitions": len(memory),
        **memory.meta.to_dict(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    memory.frames.astype("<f4").tofile(path / "frames.bin")
    memory.trail_data.astype("<f8").tofile(path / "trails.bin")
    np.asarray(memory.episode, "<i8").tofile(path / "episodes.bin")
    with open(path / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["newest_frame", "action", "reward", "done", "trail_start", "trail_end"])
        for i in range(len(memory)):
            w.writerow(
                [
                    int(memory.newest[i]),
                    int(memory.actions[i]),
                    repr(float(memory.rewards[i])),
                    int(memory.dones[i]),
                    int(memory.trail_offsets[i]),
                    int(memory.trail_offsets[i + 1]),
                ]
            )
    if memory.extras:
        with open(path / "extras.npz", "wb") as fh:
            np.savez(fh, **memory.extras)
    return path


def load_replay(path: str | Path) -> ReplayMemory:
    path = Path(path)
    if not (path / "meta.json").exists():
        raise FileNotFoundError(f"no replay archive at {path}")
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("format") != ARCHIVE_FORMAT:
        raise ConfigError(f"unsupported replay format {meta.get('format')!r}")
    frames = np.fromfile(path / "frames.bin", dtype="<f4").reshape(meta["frames_shape"])
    trails = np.fromfile(path / "trails.bin", dtype="<f8").reshape(-1, 3)
    episode = np.fromfile(path / "episodes.bin", dtype="<i8")
    rows = list(csv.DictReader(open(path / "index.csv", newline="")))
    offsets = [0] + [int(r["trail_end"]) for r in rows]
    extras = {}
    if (path / "extras.npz").exists():
        with np.load(path / "extras.npz") as z:
            extras = {k: z[k] for k in z.files}
    return ReplayMemory(
        frames=frames.astype(np.float32),
        episode=episode,
        newest=[int(r["newest_frame"]) for r in rows],
        actions=[int(r["action"]) for r in rows],
        rewards=[float(r["reward"]) for r in rows],
        dones=[bool(int(r["done"])) for r in rows],
        trail_data=trails,
        trail_offsets=offsets,
        meta=ReplayMeta(
            game=meta["game"],
            player=meta["player"],
            frame_skip=meta["frame_skip"],
            n_actions=meta["n_actions"],
            source_size=tuple(meta["source_size"]),
        ),
        extras=extras,
    )


# --------------------------------------------------------------------------
# external logs


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """uint8 or float image (H, W[, 3|4]) -> float64 luminance in [0, 1]."""
    arr = np.asarray(image)
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]
    return arr


def load_frame_image(path: Path) -> tuple[np.ndarray, tuple[int, int]]:
    """Read one frame image and return (84x84 float32 in [0,1], (width, height))."""
    from PIL import Image

    with Image.open(path) as im:
        size = im.size
        if im.mode == "L":
            gray = np.asarray(im, dtype=np.uint8).astype(np.float64) / 255.0
        else:
            gray = to_grayscale(np.asarray(im.convert("RGB")))
    if gray.shape != (FRAME_SIZE, FRAME_SIZE):
        img = Image.fromarray(gray.astype(np.float32), mode="F")
        gray = np.asarray(img.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR), dtype=np.float64)
    return np.clip(gray, 0.0, 1.0).astype(np.float32), size


def export_log(memory: ReplayMemory, path: str | Path, frame_ids: np.ndarray | None = None) -> Path:
    """Write a memory as an ingestion log (index.csv + frames/*.png + meta.json).

    Only lossless for frames whose pixels are multiples of 1/255 (true of the
    toy environment). Per-frame gaze is taken from the newest sample of each
    trail; actions/rewards of frames that start no transition are written
    from ``memory.extras`` when available, else as 0.
    """
    from PIL import Image

    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    n_frames = len(memory.frames)
    f_action = memory.extras.get("frame_action", np.zeros(n_frames, np.int64))
    f_reward = memory.extras.get("frame_reward", np.zeros(n_frames))
    f_gaze = memory.extras.get("frame_gaze", np.full((n_frames, 3), np.nan))
    with open(path / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for k in range(n_frames):
            fid = f"{k:07d}"
            Image.fromarray(np.round(memory.frames[k] * 255.0).astype(np.uint8), mode="L").save(
                path / "frames" / f"{fid}.png"
            )
            gx, gy, gt = f_gaze[k]
            gaze = ["", "", ""] if np.isnan(gx) else [repr(float(gx)), repr(float(gy)), repr(float(gt))]
            w.writerow([fid, int(memory.episode[k]), int(f_action[k]), repr(float(f_reward[k])), *gaze])
    meta = {"format": "ctrattn-log/1", **memory.meta.to_dict()}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def ingest_external(
    log_dir: str | Path,
    meta: ReplayMeta,
    frame_skip_align: int = 4,
    index_name: str = "index.csv",
) -> ReplayMemory:
    """Ingest an index CSV plus a frame directory into a :class:`ReplayMemory`.

    Columns: ``frame_id, episode_id, action, reward, gaze_x, gaze_y, gaze_t``;
    frame ``<frame_id>`` is read from ``frames/<frame_id>.png`` (or any file
    with that stem). Every ``frame_skip_align``-th frame of an episode is
    kept; its reward is the sum over the skipped window and its gaze trail
    collects all per-frame gaze samples up to it (at most 60).
    """
    log_dir = Path(log_dir)
    rows = list(csv.DictReader(open(log_dir / index_name, newline="")))
    missing_cols = set(LOG_COLUMNS) - set(rows[0].keys() if rows else LOG_COLUMNS)
    if missing_cols:
        raise IngestError(f"index is missing columns {sorted(missing_cols)}")
    if frame_skip_align < 1:
        raise ConfigError("frame_skip_align must be >= 1")

    frame_dir = log_dir / "frames"
    by_episode: dict[int, list[dict]] = {}
    for r in rows:
        by_episode.setdefault(int(r["episode_id"]), []).append(r)

    episodes, f_actions, f_rewards, f_gazes = [], [], [], []
    source_size = None
    n_missing_gaze = 0
    for eid, ep_rows in by_episode.items():
        kept_frames, actions, rewards, trails, gazes = [], [], [], [], []
        history: list[tuple[float, float, float]] = []
        for j, r in enumerate(ep_rows):
            if r["gaze_x"] not in ("", None) and r["gaze_y"] not in ("", None):
                history.append((float(r["gaze_x"]), float(r["gaze_y"]), float(r["gaze_t"])))
                gaze_now = history[-1]
            else:
                gaze_now = (np.nan, np.nan, np.nan)
            if j % frame_skip_align:
                continue
            fpath = _frame_path(frame_dir, r["frame_id"])
            pixels, size = load_frame_image(fpath)
            source_size = source_size or size
            kept_frames.append(pixels)
            actions.append(int(r["action"]))
            rewards.append(sum(float(q["reward"]) for q in ep_rows[j : j + frame_skip_align]))
            trail = np.asarray(history[-MAX_TRAIL:], dtype=np.float64).reshape(-1, 3)
            n_missing_gaze += len(trail) == 0
            trails.append(trail)
            gazes.append(gaze_now)
        episodes.append(
            {"frames": np.stack(kept_frames), "actions": actions, "rewards": rewards, "trails": trails, "episode_id": eid}
        )
        f_actions.append(np.asarray(actions, np.int64))
        f_rewards.append(np.asarray(rewards))
        f_gazes.append(np.asarray(gazes, np.float64))
    if n_missing_gaze and meta.player == "human":
        log.warning("%d kept frames have no gaze samples; their trails are empty", n_missing_gaze)
    if source_size is not None and tuple(meta.source_size) != tuple(source_size):
        meta = ReplayMeta(meta.game, meta.player, meta.frame_skip, meta.n_actions, source_size)
    memory = build_memory(episodes, meta)
    memory.extras = {
        "frame_action": np.concatenate(f_actions),
        "frame_reward": np.concatenate(f_rewards),
        "frame_gaze": np.concatenate(f_gazes),
    }
    return memory


def _frame_path(frame_dir: Path, frame_id: str) -> Path:
    direct = frame_dir / f"{frame_id}.png"
    if direct.exists():
        return direct
    matches = sorted(frame_dir.glob(f"{frame_id}.*"))
    if not matches:
        raise IngestError(f"missing frame {frame_id!r} in {frame_dir}")
    return matches[0]
