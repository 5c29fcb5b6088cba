"""Evaluation of learned rewards: heatmaps, goal localization, discriminability, steering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import GuidanceConfig, ancestral_sample, guided_sample
from .errors import ConfigurationError, ContractError, EvaluationError
from .maze import (ACTION_DIM, STATE_DIM, MazeSpec, NormStats, denormalize, normalize,
                   sample_free_positions, step_batch, true_reward)


# ------------------------------------------------------------------ heatmap

@dataclass
class HeatmapGrid:
    """Per-cell running sums of window rewards; empty cells read as NaN."""

    sums: np.ndarray
    counts: np.ndarray
    cell_size: float = 1.0

    @property
    def height(self) -> int:
        return self.sums.shape[0]

    @property
    def width(self) -> int:
        return self.sums.shape[1]

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def values(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.empty, np.nan, self.sums / np.maximum(self.counts, 1))

    def merge(self, other: "HeatmapGrid") -> "HeatmapGrid":
        return HeatmapGrid(self.sums + other.sums, self.counts + other.counts, self.cell_size)


def window_rewards(r, windows, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Split trajectories into length-``r.window`` pieces; score each at diffusion time 0.

    Returns ``(rewards (M,), positions (M, window, 2))`` with positions in
    world units.
    """
    w = np.asarray(windows, dtype=np.float64)
    N, H, D = w.shape
    h = r.window
    if H % h:
        raise ConfigurationError(f"window {h} does not divide horizon {H}", key="reward_window")
    pieces = w.reshape(N * (H // h), h, D)
    g = r.step_values(normalize(pieces, stats).reshape(-1, D), 0)
    return g.reshape(-1, h).mean(axis=1), pieces[..., :2]


def accumulate_heatmap(rewards, positions, maze: MazeSpec) -> HeatmapGrid:
    """Add each window's reward once to every distinct cell its positions visit."""
    sums = np.zeros(maze.grid.shape)
    counts = np.zeros(maze.grid.shape, dtype=np.int64)
    r, c = maze.cell_of(positions)
    flat = r * maze.cols + c                                    # (M, h)
    flat = np.sort(flat, axis=1)
    first = np.ones_like(flat, dtype=bool)
    first[:, 1:] = flat[:, 1:] != flat[:, :-1]
    rows = np.broadcast_to(np.asarray(rewards)[:, None], flat.shape)
    np.add.at(sums.reshape(-1), flat[first], rows[first])
    np.add.at(counts.reshape(-1), flat[first], 1)
    return HeatmapGrid(sums, counts, maze.cell_size)


def reward_heatmap(r, dataset, maze: MazeSpec, stats: NormStats | None = None) -> HeatmapGrid:
    """Average reward of the sub-trajectories passing through each cell.

    Every trajectory is cut into non-overlapping windows of the reward's
    window length, each window is scored with ``g`` at diffusion time 0,
    and the score is credited to each cell the window touches.
    """
    trajs = dataset.trajectories if hasattr(dataset, "trajectories") else np.asarray(dataset)
    if len(trajs) == 0:
        raise ConfigurationError("cannot build a heatmap from an empty dataset", key="dataset")
    stats = stats or getattr(dataset, "stats", None)
    if stats is None:
        raise ConfigurationError("heatmap needs normalization statistics", key="norm")
    rewards, positions = window_rewards(r, trajs, stats)
    return accumulate_heatmap(rewards, positions, maze)


def smooth_heatmap(grid: HeatmapGrid) -> np.ndarray:
    """3x3 mean over the non-empty cells around each non-empty cell."""
    vals = grid.values
    filled = ~np.isnan(vals)
    v = np.where(filled, vals, 0.0)
    H, W = vals.shape
    pv = np.pad(v, 1)
    pf = np.pad(filled.astype(float), 1)
    tot = sum(pv[i:i + H, j:j + W] for i in range(3) for j in range(3))
    cnt = sum(pf[i:i + H, j:j + W] for i in range(3) for j in range(3))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(filled, tot / np.maximum(cnt, 1), np.nan)


def smooth_and_localize(grid: HeatmapGrid, maze: MazeSpec) -> tuple[tuple[int, int], bool]:
    """Argmax cell of the smoothed heatmap and whether it is within one cell of the goal."""
    if maze.goal is None:
        raise ContractError("localization needs a maze with a goal")
    smooth = smooth_heatmap(grid)
    if np.all(np.isnan(smooth)):
        raise EvaluationError("heatmap has no visited cells")
    idx = np.unravel_index(np.nanargmax(smooth), smooth.shape)
    cell = (int(idx[0]), int(idx[1]))
    gr, gc = maze.goal_cell()
    return cell, max(abs(cell[0] - gr), abs(cell[1] - gc)) <= 1


# ---------------------------------------------------------- discriminability

def logistic_accuracy(features, labels, seed, steps: int = 500, lr: float = 0.1,
                      train_fraction: float = 0.8) -> float:
    """Held-out accuracy of a 1-D logistic regression fitted by gradient descent."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(f.size)
    n_train = int(round(train_fraction * f.size))
    tr, te = order[:n_train], order[n_train:]
    if te.size == 0 or n_train == 0:
        raise EvaluationError("not enough samples for a train/test split")
    mu, sd = f[tr].mean(), f[tr].std()
    z = (f - mu) / sd if sd > 0 else np.zeros_like(f)
    w = b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(w * z[tr] + b)))
        err = p - y[tr]
        w -= lr * float(np.mean(err * z[tr]))
        b -= lr * float(np.mean(err))
    pred = (w * z[te] + b) > 0
    return float(np.mean(pred == (y[te] > 0.5)))


def discriminability(r, base_trajs, expert_trajs, seed, stats: NormStats | None = None,
                     shuffle_labels: bool = False) -> float:
    """How well the scalar reward alone separates base from expert trajectories.

    Trajectories are scored with ``rho`` at diffusion time 0; the labels
    can be permuted first as a chance-level control.
    """
    def flat(ts):
        if hasattr(ts, "trajectories"):
            return ts.normalized(stats).reshape(len(ts), -1)
        arr = np.asarray(ts, dtype=np.float64)
        if stats is not None:
            arr = normalize(arr, stats)
        return arr.reshape(arr.shape[0], -1)

    xb, xe = flat(base_trajs), flat(expert_trajs)
    if xb.shape[0] != xe.shape[0] or xb.shape[0] == 0:
        raise ConfigurationError(f"classes must be balanced and non-empty, got {xb.shape[0]} base "
                                 f"and {xe.shape[0]} expert trajectories", key="dataset")
    feats = np.concatenate([r.value(xb, 0), r.value(xe, 0)])
    labels = np.concatenate([np.zeros(xb.shape[0]), np.ones(xe.shape[0])])
    if shuffle_labels:
        labels = np.random.default_rng([seed, 1]).permutation(labels)
    return logistic_accuracy(feats, labels, seed)


# ----------------------------------------------------------------- steering

@dataclass
class SteeringReport:
    """Per-episode scores (summed true reward) for paired conditions."""

    steered: np.ndarray
    unsteered: np.ndarray | None
    omega: float
    t_stopgrad: int
    seed: int
    episode_starts: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def steered_reach(self) -> float:
        return float(np.mean(self.steered > 0))

    @property
    def unsteered_reach(self) -> float:
        return float(np.mean(self.unsteered > 0)) if self.unsteered is not None else float("nan")

    def records(self) -> list[dict]:
        out = []
        for i in range(len(self.steered)):
            rec = {"episode": i, "seed": self.seed, "omega": self.omega, "t_stopgrad": self.t_stopgrad,
                   "start": [float(v) for v in self.episode_starts[i]],
                   "steered_score": float(self.steered[i])}
            if self.unsteered is not None:
                rec["unsteered_score"] = float(self.unsteered[i])
            out.append(rec)
        return out


def episode_starts(maze: MazeSpec, episodes: int, seed) -> np.ndarray:
    rngs = np.random.SeedSequence([seed, 7]).spawn(episodes)
    return np.stack([sample_free_positions(maze, np.random.default_rng(s), 1)[0] for s in rngs])


def run_policy(maze: MazeSpec, base, reward, gc: GuidanceConfig | None, starts, seed,
               env_steps: int, return_paths: bool = False):
    """Receding-horizon control: plan from the current state, execute the first action.

    All episodes advance together; the sampler at environment step ``k``
    is seeded with ``(seed, k)``, so runs that differ only in guidance see
    the same noise.  Returns per-episode summed true reward (and the
    visited positions when ``return_paths``).
    """
    stats = base.norm
    if stats is None:
        raise ConfigurationError("the planning model carries no normalization statistics", key="norm")
    if maze.goal is None:
        raise ContractError("steering needs a maze with a goal")
    pos = np.array(starts, dtype=np.float64)
    vel = np.zeros_like(pos)
    n = pos.shape[0]
    score = np.zeros(n)
    paths = [pos.copy()]
    step_dim = STATE_DIM + ACTION_DIM
    for k in range(env_steps):
        state = normalize(np.concatenate([pos, vel], axis=1), NormStats(stats.min[:STATE_DIM],
                                                                        stats.max[:STATE_DIM]))
        cond = {j: state[:, j] for j in range(STATE_DIM)}
        rng = np.random.default_rng([seed, k])
        if reward is None or gc is None:
            plan = ancestral_sample(base, n, cond, rng, clip_denoised=gc.clip_denoised if gc else True)
        else:
            plan = guided_sample(base, reward, gc, n, cond, rng)
        first = plan[:, :step_dim]
        action = denormalize(first, stats)[:, STATE_DIM:]
        pos, vel = step_batch(pos, vel, action, maze)
        score += true_reward(pos, maze)
        if return_paths:
            paths.append(pos.copy())
    return (score, np.stack(paths, axis=1)) if return_paths else score


def steered_rollout(maze: MazeSpec, base, r, gc: GuidanceConfig, episodes: int, seed,
                    env_steps: int = 100, paired: bool = True) -> SteeringReport:
    """Steered episodes, plus unsteered ones from the same starts and noise when ``paired``."""
    if r is None and gc.omega > 0:
        raise ConfigurationError("a reward is required for guidance with omega > 0", key="omega")
    starts = episode_starts(maze, episodes, seed)
    steered = run_policy(maze, base, r, gc, starts, seed, env_steps)
    unsteered = None
    if paired:
        plain = GuidanceConfig(omega=0.0, t_stopgrad=gc.t_stopgrad, clip_denoised=gc.clip_denoised)
        unsteered = run_policy(maze, base, None, plain, starts, seed, env_steps)
    return SteeringReport(steered, unsteered, gc.omega, gc.t_stopgrad, seed, starts)


# --------------------------------------------------------------- statistics

def bootstrap_ci(scores_a, scores_b, resamples: int = 10_000, confidence: float = 0.95, seed=0):
    """Percentile bootstrap interval of the paired mean difference ``b - a``."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ContractError("bootstrap needs two equal-length, non-empty score vectors")
    if resamples < 1000:
        raise ContractError("use at least 1000 bootstrap resamples")
    if not 0 < confidence < 1:
        raise ContractError("confidence must lie in (0, 1)")
    d = b - a
    rng = np.random.default_rng(seed)
    means = d[rng.integers(0, d.size, size=(resamples, d.size))].mean(axis=1)
    tail = (1.0 - confidence) / 2
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(d.mean()), float(lo), float(hi)


def accuracy_ci(successes: int, n: int):
    """Normal-approximation interval ``p +- 1.96 sqrt(p (1 - p) / n)``."""
    if n < 1 or not 0 <= successes <= n:
        raise ContractError(f"need 0 <= successes <= n and n >= 1, got {successes}/{n}")
    p = successes / n
    half = 1.96 * math.sqrt(p * (1.0 - p) / n)
    return p, p - half, p + half


# ------------------------------------------------------------------ export

def heatmap_csv(grid: HeatmapGrid) -> str:
    lines = [f"# {grid.width},{grid.height},{grid.cell_size!r}"]
    for row in grid.values:
        lines.append(",".join("nan" if np.isnan(v) else repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def read_heatmap_csv(text: str) -> tuple[np.ndarray, float]:
    """Inverse of :func:`heatmap_csv`: ``(values, cell_size)``."""
    lines = text.strip("\n").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ConfigurationError("heatmap CSV lacks its header line", key="heatmap")
    w, h, cs = lines[0][1:].split(",")
    vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if vals.shape != (int(h), int(w)):
        raise ConfigurationError("heatmap CSV body does not match its header", key="heatmap")
    return vals, float(cs)


def _colormap(u):
    """Blue (low) to red (high) through white."""
    u = np.clip(u, 0.0, 1.0)[..., None]
    blue = np.array([40, 70, 200])
    white = np.array([245, 245, 245])
    red = np.array([200, 40, 40])
    low = blue + (white - blue) * (u / 0.5)
    high = white + (red - white) * ((u - 0.5) / 0.5)
    return np.where(u < 0.5, low, high)


def heatmap_ppm(grid: HeatmapGrid, maze: MazeSpec, pixels_per_cell: int = 16) -> bytes:
    """Binary PPM image: walls black, unvisited cells grey, goal marked with a white dot."""
    vals = grid.values
    finite = vals[~np.isnan(vals)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    u = (vals - lo) / (hi - lo) if hi > lo else np.full(vals.shape, 0.5)
    rgb = _colormap(np.nan_to_num(u))
    rgb[np.isnan(vals)] = (128, 128, 128)
    rgb[maze.grid] = (0, 0, 0)
    img = np.kron(rgb, np.ones((pixels_per_cell, pixels_per_cell, 1)))
    if maze.goal is not None:
        gy, gx = maze.goal[1] / maze.cell_size, maze.goal[0] / maze.cell_size
        yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]] / pixels_per_cell
        dot = (yy - gy) ** 2 + (xx - gx) ** 2 <= (maze.goal_radius / maze.cell_size) ** 2
        img[dot] = (255, 255, 255)
    img = img.astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    return header + img.tobytes()
