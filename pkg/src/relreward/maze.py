"""2-D pointmass maze: layouts, dynamics, scripted data collection, normalization.

World coordinates put ``x`` along grid columns and ``y`` along grid rows
(row 0 at the top), with cell ``(r, c)`` covering
``[c, c+1) x [r, r+1)`` times ``cell_size``.  States are
``(px, py, vx, vy)``, actions are accelerations ``(ax, ay)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, GenerationError, ShapeError

DT = 0.1
A_MAX = 1.0
V_MAX = 2.0
CELL_SIZE = 1.0
GOAL_RADIUS = 0.25
KP = 1.0
KD = 0.5
ADVANCE_RADIUS = 0.3
HORIZON = 64
REWARD_WINDOW = 4
WALL_MARGIN = 1e-3
STATE_DIM = 4
ACTION_DIM = 2

LAYOUTS = {
    "open": """
#######
#.....#
#.....#
#.....#
#######
""",
    "umaze": """
#####
#...#
###.#
#...#
#####
""",
}

# goal cells (row, col) used by the experiment protocol
GOAL_CELLS = {
    "open": [(1, 1), (1, 5), (3, 1), (3, 5)],
    "umaze": [(1, 1), (3, 1), (1, 3), (3, 3)],
}


@dataclass
class MazeSpec:
    """Wall grid (``True`` = wall, indexed ``[row, col]``) plus an optional goal."""

    grid: np.ndarray
    cell_size: float = CELL_SIZE
    goal: np.ndarray | None = None
    goal_radius: float = GOAL_RADIUS
    name: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2 or min(self.grid.shape) < 3:
            raise ConfigurationError("maze grid must be 2-D with at least 3x3 cells", key="layout")
        g = self.grid
        if not (g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()):
            raise ConfigurationError("maze border cells must all be walls", key="layout")
        if not (~g).any():
            raise ConfigurationError("maze has no free cells", key="layout")
        if self.goal is not None:
            self.goal = np.asarray(self.goal, dtype=np.float64)
            if self.goal.shape != (2,) or not self.is_free_point(self.goal):
                raise ConfigurationError(f"goal {self.goal} is not inside a free cell", key="goal")

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        """World width and height."""
        return self.cols * self.cell_size, self.rows * self.cell_size

    def cell_of(self, pos) -> tuple[np.ndarray, np.ndarray]:
        """``(rows, cols)`` of the cells containing each position."""
        pos = np.asarray(pos, dtype=np.float64)
        c = np.clip(np.floor(pos[..., 0] / self.cell_size).astype(int), 0, self.cols - 1)
        r = np.clip(np.floor(pos[..., 1] / self.cell_size).astype(int), 0, self.rows - 1)
        return r, c

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return np.stack([(np.asarray(c) + 0.5) * self.cell_size,
                         (np.asarray(r) + 0.5) * self.cell_size], axis=-1)

    def is_free_point(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64)
        w, h = self.extent
        inside = (pos[..., 0] >= 0) & (pos[..., 0] < w) & (pos[..., 1] >= 0) & (pos[..., 1] < h)
        r, c = self.cell_of(pos)
        return inside & ~self.grid[r, c]

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(~self.grid)]

    def with_goal(self, goal) -> "MazeSpec":
        return MazeSpec(self.grid.copy(), self.cell_size, goal, self.goal_radius, self.name)

    def goal_cell(self) -> tuple[int, int]:
        if self.goal is None:
            raise ContractError("maze has no goal")
        r, c = self.cell_of(self.goal)
        return int(r), int(c)


def parse_layout(text: str, cell_size: float = CELL_SIZE, goal_radius: float = GOAL_RADIUS,
                 name: str = "") -> MazeSpec:
    """Build a maze from ASCII rows of ``#`` (wall), ``.`` (free) and ``G`` (goal)."""
    lines = [ln.rstrip() for ln in text.strip("\n").splitlines() if ln.strip()]
    if not lines or len({len(ln) for ln in lines}) != 1:
        raise ConfigurationError("layout rows must be non-empty and of equal length", key="layout")
    bad = set("".join(lines)) - set("#.G")
    if bad:
        raise ConfigurationError(f"unknown layout characters {sorted(bad)}", key="layout")
    grid = np.array([[ch == "#" for ch in ln] for ln in lines])
    goals = [(r, c) for r, ln in enumerate(lines) for c, ch in enumerate(ln) if ch == "G"]
    if len(goals) > 1:
        raise ConfigurationError("layout marks more than one goal cell", key="layout")
    maze = MazeSpec(grid, cell_size, None, goal_radius, name)
    if goals:
        maze.goal = maze.cell_center(goals[0])
    return maze


def load_layout(name_or_path: str, **kw) -> MazeSpec:
    """A shipped layout by name, or a layout file path."""
    if name_or_path in LAYOUTS:
        return parse_layout(LAYOUTS[name_or_path], name=name_or_path, **kw)
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigurationError(f"no layout named or stored at {name_or_path!r}", key="layout")
    return parse_layout(path.read_text(), name=path.stem, **kw)


# ---------------------------------------------------------------- dynamics

@dataclass
class PointmassState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def _clip_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > limit, v * (limit / np.maximum(n, 1e-300)), v)


def clip_action(a) -> np.ndarray:
    return _clip_norm(np.asarray(a, dtype=np.float64), A_MAX)


def step_batch(pos, vel, act, maze: MazeSpec):
    """Advance ``(B, 2)`` positions and velocities one tick; returns new copies.

    Semi-implicit Euler with norm clipping of action and velocity.  Motion is
    resolved one axis at a time; a move that would enter a wall cell stops at
    the wall face (minus a small margin) and zeroes that velocity component.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    vel = _clip_norm(vel + clip_action(act) * DT, V_MAX)
    cs = maze.cell_size
    for axis in (0, 1):
        old = pos[:, axis].copy()
        pos[:, axis] = old + vel[:, axis] * DT
        r, c = maze.cell_of(pos)
        hit = maze.grid[r, c]
        if hit.any():
            old_idx = np.floor(old / cs)
            face = np.where(vel[:, axis] > 0, (old_idx + 1) * cs - WALL_MARGIN, old_idx * cs + WALL_MARGIN)
            pos[:, axis] = np.where(hit, face, pos[:, axis])
            vel = vel.copy()
            vel[:, axis] = np.where(hit, 0.0, vel[:, axis])
    return pos, vel


def simulate_step(s: PointmassState, a, maze: MazeSpec) -> PointmassState:
    """One tick of the pointmass dynamics for a single state."""
    p, v = step_batch(s.position[None], s.velocity[None], np.asarray(a, dtype=np.float64)[None], maze)
    return PointmassState(p[0], v[0])


def true_reward(s, maze: MazeSpec):
    """1 inside the goal disk, else 0.  Accepts a state or an array of positions."""
    if maze.goal is None:
        raise ContractError("true_reward needs a maze with a goal")
    pos = s.position if isinstance(s, PointmassState) else np.asarray(s, dtype=np.float64)[..., :2]
    inside = np.linalg.norm(pos - maze.goal, axis=-1) <= maze.goal_radius
    return inside.astype(np.float64) if inside.ndim else float(inside)


# -------------------------------------------------------------- controller

def next_hop_table(maze: MazeSpec, goal_cell) -> np.ndarray:
    """BFS from ``goal_cell``; entry ``[r, c]`` is the flat index of the next cell toward it.

    The goal cell points to itself; unreachable or wall cells hold -1.
    """
    rows, cols = maze.grid.shape
    nxt = np.full((rows, cols), -1, dtype=np.int64)
    gr, gc = goal_cell
    if maze.grid[gr, gc]:
        raise GenerationError(f"goal cell {goal_cell} is a wall")
    nxt[gr, gc] = gr * cols + gc
    queue = deque([(gr, gc)])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if not maze.grid[rr, cc] and nxt[rr, cc] < 0:
                nxt[rr, cc] = r * cols + c
                queue.append((rr, cc))
    return nxt


class WaypointController:
    """PD tracking of BFS waypoints (cell centres, then the exact goal) for a batch.

    Each episode keeps its own waypoint; reaching it within the advance
    radius moves on to the next cell of the shortest path.
    """

    def __init__(self, maze: MazeSpec):
        self.maze = maze
        self._tables: dict[tuple[int, int], np.ndarray] = {}
        self.goals = np.zeros((0, 2))
        self.goal_flat = np.zeros(0, dtype=np.int64)
        self.wp_flat = np.zeros(0, dtype=np.int64)

    def _table(self, cell):
        cell = (int(cell[0]), int(cell[1]))
        if cell not in self._tables:
            self._tables[cell] = next_hop_table(self.maze, cell)
        return self._tables[cell]

    def _hop(self, goal_flat, from_flat):
        cols = self.maze.cols
        out = np.empty_like(from_flat)
        for i, (g, f) in enumerate(zip(goal_flat, from_flat)):
            out[i] = self._table(divmod(int(g), cols))[divmod(int(f), cols)]
        if np.any(out < 0):
            raise GenerationError("goal is unreachable from the current cell")
        return out

    def reset(self, pos, goals, which=None):
        """Set goals for all episodes, or only for the boolean mask ``which``."""
        goals = np.asarray(goals, dtype=np.float64)
        r, c = self.maze.cell_of(goals)
        gflat = r * self.maze.cols + c
        pr, pc = self.maze.cell_of(pos)
        start = pr * self.maze.cols + pc
        if which is None:
            self.goals = goals.copy()
            self.goal_flat = gflat
            self.wp_flat = self._hop(gflat, start)
        else:
            self.goals[which] = goals[which]
            self.goal_flat[which] = gflat[which]
            self.wp_flat[which] = self._hop(gflat[which], start[which])

    def waypoints(self) -> np.ndarray:
        cols = self.maze.cols
        centers = self.maze.cell_center((self.wp_flat // cols, self.wp_flat % cols))
        at_goal_cell = (self.wp_flat == self.goal_flat)[:, None]
        return np.where(at_goal_cell, self.goals, centers)

    def act(self, pos, vel) -> np.ndarray:
        wp = self.waypoints()
        reached = (np.linalg.norm(pos - wp, axis=1) <= ADVANCE_RADIUS) & (self.wp_flat != self.goal_flat)
        if reached.any():
            self.wp_flat[reached] = self._hop(self.goal_flat[reached], self.wp_flat[reached])
            wp = self.waypoints()
        return clip_action(KP * (wp - pos) - KD * vel)


def sample_free_positions(maze: MazeSpec, rng: np.random.Generator, n: int, margin: float = 0.2):
    """Uniform over free cells, then uniform inside the cell away from its edges."""
    cells = np.array(maze.free_cells())
    pick = cells[rng.integers(0, len(cells), size=n)]
    off = rng.uniform(margin, 1.0 - margin, size=(n, 2))
    return np.stack([pick[:, 1] + off[:, 0], pick[:, 0] + off[:, 1]], axis=1) * maze.cell_size


# ------------------------------------------------------------ normalization

@dataclass
class NormStats:
    """Per-coordinate minima and maxima over state and action dimensions."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != self.max.shape:
            raise ShapeError("min and max vectors differ in shape")
        if not (np.all(np.isfinite(self.min)) and np.all(np.isfinite(self.max))):
            raise ContractError("normalization statistics must be finite")
        if np.any(self.min > self.max):
            raise ContractError("normalization min exceeds max")

    @classmethod
    def from_data(cls, x) -> "NormStats":
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    def merge(self, other: "NormStats") -> "NormStats":
        return NormStats(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


def normalize(x, stats: NormStats) -> np.ndarray:
    """Map each coordinate of ``[min, max]`` onto ``[-1, 1]``; constant coordinates become 0."""
    x = np.asarray(x, dtype=np.float64)
    span = stats.max - stats.min
    live = span > 0
    out = np.zeros(np.broadcast_shapes(x.shape, span.shape))
    safe = np.where(live, span, 1.0)
    out[...] = np.where(live, 2.0 * (x - stats.min) / safe - 1.0, 0.0)
    return out


def denormalize(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = stats.max - stats.min
    return np.where(span > 0, (x + 1.0) * 0.5 * span + stats.min, stats.min)


def bounds_stats(maze: MazeSpec) -> NormStats:
    """Statistics from the physical limits: maze extent, speed cap, action cap.

    Unlike data-derived statistics these do not depend on which goal the
    data was collected for, so models trained on different datasets of the
    same maze share one coordinate system.
    """
    w, h = maze.extent
    return NormStats([0.0, 0.0, -V_MAX, -V_MAX, -A_MAX, -A_MAX], [w, h, V_MAX, V_MAX, A_MAX, A_MAX])


# ----------------------------------------------------------------- datasets

@dataclass
class TrajectoryDataset:
    """Fixed-horizon windows of ``(state, action)`` rows with their statistics.

    ``trajectories`` is float32 ``(N, H, 6)``; ``episode`` and ``start`` give
    each window's source episode and first tick.
    """

    trajectories: np.ndarray
    stats: NormStats
    episode: np.ndarray
    start: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.trajectories)
        if t.ndim != 3 or t.shape[2] != STATE_DIM + ACTION_DIM:
            raise ShapeError(f"trajectories must be (N, H, {STATE_DIM + ACTION_DIM}), got {t.shape}")
        self.trajectories = t.astype(np.float32, copy=False)
        self.episode = np.asarray(self.episode, dtype=np.int64)
        self.start = np.asarray(self.start, dtype=np.int64)

    def __len__(self) -> int:
        return self.trajectories.shape[0]

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[1]

    state_dim = STATE_DIM
    action_dim = ACTION_DIM

    @property
    def n_transitions(self) -> int:
        return int(self.meta.get("n_transitions", len(self) * self.horizon))

    def normalized(self, stats: NormStats | None = None) -> np.ndarray:
        return normalize(self.trajectories, stats or self.stats)

    def with_stats(self, stats: NormStats) -> "TrajectoryDataset":
        return TrajectoryDataset(self.trajectories, stats, self.episode, self.start, dict(self.meta))


def rollout_episodes(maze: MazeSpec, mode: str, n_episodes: int, episode_length: int, seed):
    """Run the scripted controller; returns states ``(E, L, 4)`` and actions ``(E, L, 2)``.

    Each episode draws from its own child of ``SeedSequence(seed)``.  Starts
    are uniform with zero velocity.  In expert mode every episode heads for
    (and then holds) ``maze.goal``; in base mode a fresh uniform goal is drawn
    whenever the current one is reached.
    """
    if mode not in ("base", "expert"):
        raise ConfigurationError(f"mode must be 'base' or 'expert', got {mode!r}", key="mode")
    if mode == "expert" and maze.goal is None:
        raise ContractError("expert data needs a maze with a goal")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_episodes)]
    pos = np.stack([sample_free_positions(maze, r, 1)[0] for r in rngs])
    vel = np.zeros_like(pos)
    if mode == "expert":
        goals = np.tile(maze.goal, (n_episodes, 1))
    else:
        goals = np.stack([sample_free_positions(maze, r, 1)[0] for r in rngs])
    ctrl = WaypointController(maze)
    ctrl.reset(pos, goals)
    states = np.empty((n_episodes, episode_length, STATE_DIM))
    actions = np.empty((n_episodes, episode_length, ACTION_DIM))
    for k in range(episode_length):
        if mode == "base":
            arrived = np.linalg.norm(pos - ctrl.goals, axis=1) <= maze.goal_radius
            if arrived.any():
                fresh = ctrl.goals.copy()
                for i in np.nonzero(arrived)[0]:
                    fresh[i] = sample_free_positions(maze, rngs[i], 1)[0]
                ctrl.reset(pos, fresh, which=arrived)
        a = ctrl.act(pos, vel)
        states[:, k, :2] = pos
        states[:, k, 2:] = vel
        actions[:, k] = a
        pos, vel = step_batch(pos, vel, a, maze)
    return states, actions


def chunk_windows(states, actions, horizon: int, stride: int):
    """Cut episodes into length-``horizon`` windows every ``stride`` ticks."""
    E, L, _ = states.shape
    if horizon > L:
        raise ConfigurationError(f"horizon {horizon} exceeds episode length {L}", key="horizon")
    starts = np.arange(0, L - horizon + 1, stride)
    rows = np.concatenate([states, actions], axis=2)
    windows = np.stack([rows[:, s:s + horizon] for s in starts], axis=1)
    episode = np.repeat(np.arange(E), len(starts))
    start = np.tile(starts, E)
    return windows.reshape(E * len(starts), horizon, rows.shape[2]), episode, start


def generate_dataset(maze: MazeSpec, mode: str, n_transitions: int, seed, horizon: int = HORIZON,
                     episode_length: int = 192, stride: int | None = None) -> TrajectoryDataset:
    """Scripted-controller dataset of ``horizon``-step windows.

    Enough fixed-length episodes are run to cover ``n_transitions`` ticks.
    Windows overlap with ``stride`` (default ``horizon // 4``).
    """
    if n_transitions <= 0:
        raise ConfigurationError("n_transitions must be positive", key="n_transitions")
    stride = stride or max(horizon // 4, 1)
    if mode == "expert" and maze.goal is not None:
        gr, gc = maze.goal_cell()
        table = next_hop_table(maze, (gr, gc))
        free = ~maze.grid
        if np.any(table[free] < 0):
            raise GenerationError(f"goal cell {(gr, gc)} is unreachable from part of the maze")
    n_episodes = -(-n_transitions // episode_length)
    states, actions = rollout_episodes(maze, mode, n_episodes, episode_length, seed)
    # float32 storage; statistics come from the stored values
    windows, episode, start = chunk_windows(states, actions, horizon, stride)
    windows = windows.astype(np.float32)
    stats = NormStats.from_data(windows)
    meta = {
        "layout": maze.name, "mode": mode, "seed": seed, "horizon": horizon, "stride": stride,
        "episode_length": episode_length, "n_episodes": n_episodes,
        "n_transitions": n_episodes * episode_length,
        "goal": None if maze.goal is None else [float(v) for v in maze.goal],
    }
    if maze.goal is not None:
        meta["terminal_reward"] = float(np.mean(true_reward(states[:, -1, :2], maze)))
    return TrajectoryDataset(windows, stats, episode, start, meta)
