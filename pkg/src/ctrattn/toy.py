"""Lane-crossing toy world (a Freeway analogue) with scripted players.

The screen is a 21x21 grid of 4x4 px cells rendered straight to 84x84. The
avatar lives in a fixed column and moves up/down; every row between the
start row (bottom) and the goal row (top) is a lane with hazards moving
horizontally with wrap-around. Stepping into a cell a hazard occupies after
the move is a collision (-1, back to start); reaching the goal row is a
crossing (+1, back to start).

Actions: 0 wait, 1 up, 2 down.

Scripted players read only a cell grid, so their relevance is explicit:

* ``human``: up unless a hazard occupies the lookahead window (the
  ``2w+1`` cells of the row above, centred on the avatar column); else wait.
  Gaze sits on the window centre, except in decoy episodes where a panel is
  drawn at the side of the screen and gaze wanders over it.
* ``agent``: waits whenever a large fixed block of lanes at the side of the
  screen is crowded, otherwise moves up unless the cell directly above is
  taken. Its cues are spread over the screen rather than around the avatar.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FRAME_SIZE, STACK, ConfigError, ReplayMemory, ReplayMeta, build_memory

WAIT, UP, DOWN = 0, 1, 2
N_ACTIONS = 3

AVATAR = 255
HAZARD = 160
PANEL = 48


@dataclass(frozen=True)
class ToyConfig:
    game: str = "lanes"
    layout_seed: int = 0
    grid: int = 21
    cell_px: int = 4
    avatar_col: int = 10
    hazards_per_lane: int = 2
    hazard_len: tuple[int, int] = (1, 3)
    max_speed: int = 2
    window_halfwidth: int = 2
    episode_len: int = 100
    decoy_prob: float = 0.5
    decoy_cols: tuple[int, int] = (0, 7)
    gaze_jitter_px: float = 0.75
    gaze_dt: float = 0.05
    px_per_degree: tuple[float, float] = (4.0, 4.0)
    agent_scan_cols: tuple[int, int] = (14, 21)  # spans every lane
    agent_crowd_threshold: int = 24  # hazard cells in the scan block
    agent_window_halfwidth: int = 0  # the agent's own safety check directly above it
    spawn_row: int | None = None  # avatar start row; None means the bottom row

    def __post_init__(self):
        g, w = self.grid, self.window_halfwidth
        if g * self.cell_px != FRAME_SIZE:
            raise ConfigError(f"grid * cell_px must equal {FRAME_SIZE}")
        if g < 5:
            raise ConfigError("grid too small")
        if not (w <= self.avatar_col < g - w):
            raise ConfigError("lookahead window does not fit in the grid")
        if self.max_speed > w:
            raise ConfigError("window half-width must cover the hazard speed")
        lo, hi = self.hazard_len
        if not (1 <= lo <= hi < g):
            raise ConfigError("invalid hazard length range")
        d0, d1 = self.decoy_cols
        if not (0 <= d0 < d1 <= g) or (d0 <= self.avatar_col + w and self.avatar_col - w < d1):
            raise ConfigError("decoy panel must lie beside the lookahead window")
        s0, s1 = self.agent_scan_cols
        if not (0 <= s0 < s1 <= g) or (s0 <= self.avatar_col + w and self.avatar_col - w < s1) or (s0 < d1 and d0 < s1):
            raise ConfigError("agent scan block must avoid the lookahead window and the decoy panel")
        if not 0 <= self.agent_window_halfwidth <= w:
            raise ConfigError("agent window must fit inside the lookahead window")
        if self.spawn_row is not None and not 1 <= self.spawn_row <= g - 1:
            raise ConfigError("spawn_row must lie in [1, grid - 1]")
        if self.episode_len < STACK + 1:
            raise ConfigError("episode_len must be at least 5 frames")
        if not 0.0 <= self.decoy_prob <= 1.0:
            raise ConfigError("decoy_prob must lie in [0, 1]")

    @property
    def start_row(self) -> int:
        return self.grid - 1 if self.spawn_row is None else self.spawn_row

    @property
    def window_area(self) -> int:
        return 2 * self.window_halfwidth + 1


@dataclass
class RelevanceOracle:
    """Per-transition 21x21 masks of the cells the scripted policy reads."""

    masks: np.ndarray  # (n, grid, grid) bool
    decoy: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))  # (n,) decoy-episode flag


class LaneWorld:
    """Simulation state of one episode; independent of any player."""

    def __init__(self, config: ToyConfig):
        self.cfg = config
        g = config.grid
        lr = np.random.default_rng(config.layout_seed)
        self.lanes = np.arange(1, g - 1)
        speeds = lr.integers(1, config.max_speed + 1, size=len(self.lanes))
        self.speed = speeds * lr.choice([-1, 1], size=len(self.lanes))
        lo, hi = config.hazard_len
        self.length = lr.integers(lo, hi + 1, size=(len(self.lanes), config.hazards_per_lane))
        self.offset = np.zeros_like(self.length)
        self.t = 0
        self.row = config.start_row
        self.decoy = False

    def reset(self, rng: np.random.Generator, decoy: bool | None = None) -> None:
        self.offset = rng.integers(0, self.cfg.grid, size=self.length.shape)
        self.t = 0
        self.row = self.cfg.start_row
        self.decoy = bool(rng.random() < self.cfg.decoy_prob) if decoy is None else bool(decoy)

    def hazards(self, t: int | None = None) -> np.ndarray:
        """Boolean (grid, grid) hazard occupancy at time ``t``."""
        t = self.t if t is None else t
        g = self.cfg.grid
        occ = np.zeros((g, g), dtype=bool)
        if self.length.size == 0:
            return occ
        max_len = self.length.max()
        k = np.arange(max_len)
        heads = self.offset + (self.speed * t)[:, None]
        cols = (heads[..., None] + k) % g  # (lanes, hazards, max_len)
        valid = k[None, None, :] < self.length[..., None]
        rows = np.broadcast_to(self.lanes[:, None, None], cols.shape)
        occ[rows[valid], cols[valid]] = True
        return occ

    def cells(self) -> np.ndarray:
        """uint8 cell grid as rendered (avatar drawn last)."""
        cfg = self.cfg
        grid = np.zeros((cfg.grid, cfg.grid), dtype=np.uint8)
        if self.decoy:
            d0, d1 = cfg.decoy_cols
            grid[1 : cfg.grid - 1, d0:d1] = PANEL
        grid[self.hazards()] = HAZARD
        grid[self.row, cfg.avatar_col] = AVATAR
        return grid

    def render(self) -> np.ndarray:
        c = self.cfg.cell_px
        return np.repeat(np.repeat(self.cells(), c, axis=0), c, axis=1)

    def step(self, action: int) -> float:
        cfg = self.cfg
        target = self.row
        if action == UP:
            target = self.row - 1
        elif action == DOWN:
            target = min(self.row + 1, cfg.start_row)
        self.t += 1
        moved = target != self.row
        if moved and self.hazards()[target, cfg.avatar_col]:
            self.row = cfg.start_row
            return -1.0
        if target == 0:
            self.row = cfg.start_row
            return 1.0
        self.row = target
        return 0.0


# --------------------------------------------------------------------------
# scripted players (read cell grids only)


def _avatar_row(cells: np.ndarray, col: int) -> int:
    rows = np.flatnonzero(cells[:, col] == AVATAR)
    if len(rows) != 1:
        raise ValueError("avatar not found in cell grid")
    return int(rows[0])


def _window(cfg: ToyConfig, row: int, halfwidth: int) -> tuple[slice, slice] | None:
    if not 0 <= row < cfg.grid:
        return None
    c = cfg.avatar_col
    return row, slice(max(c - halfwidth, 0), min(c + halfwidth + 1, cfg.grid))


def _blocked(cells: np.ndarray, win) -> bool:
    return win is not None and bool(np.any(cells[win] == HAZARD))


def _count(cells: np.ndarray, win) -> int:
    return 0 if win is None else int(np.sum(cells[win] == HAZARD))


def human_policy(cells: np.ndarray, cfg: ToyConfig) -> int:
    r = _avatar_row(cells, cfg.avatar_col)
    return WAIT if _blocked(cells, _window(cfg, r - 1, cfg.window_halfwidth)) else UP


def _scan_block(cfg: ToyConfig) -> tuple[slice, slice]:
    return slice(1, cfg.grid - 1), slice(*cfg.agent_scan_cols)


def agent_policy(cells: np.ndarray, cfg: ToyConfig) -> int:
    if _count(cells, _scan_block(cfg)) >= cfg.agent_crowd_threshold:
        return WAIT
    r = _avatar_row(cells, cfg.avatar_col)
    return WAIT if _blocked(cells, _window(cfg, r - 1, cfg.agent_window_halfwidth)) else UP


def relevance_mask(cells: np.ndarray, cfg: ToyConfig, player: str) -> np.ndarray:
    """Cells the given scripted player reads in this cell grid."""
    r = _avatar_row(cells, cfg.avatar_col)
    mask = np.zeros_like(cells, dtype=bool)
    mask[r, cfg.avatar_col] = True
    if player == "agent":
        windows = [_window(cfg, r - 1, cfg.agent_window_halfwidth), _scan_block(cfg)]
    else:
        windows = [_window(cfg, r - 1, cfg.window_halfwidth)]
    for win in windows:
        if win is not None:
            mask[win] = True
    return mask


POLICIES = {"human": human_policy, "agent": agent_policy}


def human_gaze(world: LaneWorld, rng: np.random.Generator) -> tuple[float, float]:
    """Synthetic gaze in screen px for the current frame."""
    cfg = world.cfg
    c = cfg.cell_px
    if world.decoy:
        d0, d1 = cfg.decoy_cols
        x = rng.uniform(d0 * c, d1 * c)
        y = rng.uniform(1 * c, (cfg.grid - 1) * c)
    else:
        x = (cfg.avatar_col + 0.5) * c + rng.normal(0.0, cfg.gaze_jitter_px)
        y = (world.row - 1 + 0.5) * c + rng.normal(0.0, cfg.gaze_jitter_px)
    hi = np.nextafter(float(FRAME_SIZE), 0.0)
    return float(np.clip(x, 0.0, hi)), float(np.clip(y, 0.0, hi))


def generate_toy_replay(
    config: ToyConfig, n: int, seed: int, player: str = "human"
) -> tuple[ReplayMemory, RelevanceOracle]:
    """Roll out a scripted player for exactly ``n`` transitions."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if player not in POLICIES:
        raise ConfigError(f"unknown player {player!r}")
    policy = POLICIES[player]
    rng = np.random.default_rng(seed)
    per_episode = config.episode_len - STACK
    n_episodes = math.ceil(n / per_episode)
    n_decoy = int(math.floor(config.decoy_prob * n_episodes + 0.5))
    decoys = rng.permutation(np.arange(n_episodes) < n_decoy)

    world = LaneWorld(config)
    episodes, masks, decoy_flags = [], [], []
    f_action, f_reward, f_gaze = [], [], []
    remaining = n
    for e in range(n_episodes):
        m = min(per_episode, remaining) + STACK
        remaining -= m - STACK
        world.reset(rng, decoy=bool(decoys[e]))
        frames, actions, rewards, trails, gazes, ep_masks = [], [], [], [], [], []
        history: list[tuple[float, float, float]] = []
        for k in range(m):
            cells = world.cells()
            frames.append(np.repeat(np.repeat(cells, config.cell_px, 0), config.cell_px, 1))
            if player == "human":
                gx, gy = human_gaze(world, rng)
                history.append((gx, gy, k * config.gaze_dt))
                gazes.append(history[-1])
            else:
                gazes.append((np.nan, np.nan, np.nan))
            a = policy(cells, config)
            ep_masks.append(relevance_mask(cells, config, player))
            actions.append(a)
            trails.append(np.asarray(history[-60:], dtype=np.float64).reshape(-1, 3))
            rewards.append(world.step(a) if k < m - 1 else 0.0)
        episodes.append(
            {
                "frames": np.stack(frames).astype(np.float32) / np.float32(255.0),
                "actions": actions,
                "rewards": rewards,
                "trails": trails,
                "episode_id": e,
            }
        )
        masks.append(np.stack(ep_masks))
        decoy_flags.append(np.full(m, world.decoy))
        f_action.append(np.asarray(actions, np.int64))
        f_reward.append(np.asarray(rewards, np.float64))
        f_gaze.append(np.asarray(gazes, np.float64))

    meta = ReplayMeta(game=f"{config.game}-{config.layout_seed}", player=player, frame_skip=1, n_actions=N_ACTIONS)
    memory = build_memory(episodes, meta, extras={"mask": masks, "decoy": decoy_flags})
    oracle = RelevanceOracle(masks=memory.extras.pop("mask"), decoy=memory.extras.pop("decoy"))
    memory.extras = {
        "frame_action": np.concatenate(f_action),
        "frame_reward": np.concatenate(f_reward),
        "frame_gaze": np.concatenate(f_gaze),
    }
    return memory, oracle


def cell_grid(frame: np.ndarray, cell_px: int = 4) -> np.ndarray:
    """Recover the uint8 cell grid from an 84x84 [0,1] frame."""
    g = frame.shape[0] // cell_px
    cells = frame.reshape(g, cell_px, g, cell_px).max(axis=(1, 3))
    return np.round(cells * 255.0).astype(np.uint8)


class LaneCrossingEnv:
    """Gym-style episodic environment returning stacked 4x84x84 states.

    One step is one decision (the frame-skip is folded into the hazard
    dynamics). Episodes last ``episode_len - 1`` steps.
    """

    n_actions = N_ACTIONS

    def __init__(self, config: ToyConfig, seed: int = 0):
        self.cfg = config
        self.world = LaneWorld(config)
        self.rng = np.random.default_rng(seed)
        self._frames: list[np.ndarray] = []
        self.steps = 0

    def _frame(self) -> np.ndarray:
        return self.world.render().astype(np.float32) / np.float32(255.0)

    def reset(self) -> np.ndarray:
        self.world.reset(self.rng)
        f = self._frame()
        self._frames = [f] * STACK
        self.steps = 0
        return np.stack(self._frames)

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        reward = self.world.step(int(action))
        self.steps += 1
        self._frames = self._frames[1:] + [self._frame()]
        done = self.steps >= self.cfg.episode_len - 1
        # episodes only end on the time limit
        return np.stack(self._frames), reward, done, {"row": self.world.row, "truncated": done}

    def sample_action(self) -> int:
        return int(self.rng.integers(self.n_actions))


def toy_suite(n_configs: int = 6, base: ToyConfig | None = None) -> list[ToyConfig]:
    """Distinct lane layouts standing in for separate games."""
    base = base or ToyConfig()
    return [replace(base, layout_seed=base.layout_seed + k, game=f"lanes{k}") for k in range(n_configs)]
