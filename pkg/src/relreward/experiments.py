"""Pipeline stages and the multi-run goal-localization protocol."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .diffusion import DenoiserConfig, GuidanceConfig, train_denoiser
from .errors import ConfigurationError
from .evaluation import accuracy_ci, discriminability, reward_heatmap, smooth_and_localize
from .maze import GOAL_CELLS, MazeSpec, bounds_stats, generate_dataset, load_layout
from .reward import (RewardConfig, generate_paired_dataset_alg2, train_reward_alg1,
                     train_reward_alg2)


def worker_count() -> int:
    """Worker processes allowed: ``RRF_THREADS`` if set, else one per logical core."""
    raw = os.environ.get("RRF_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"RRF_THREADS must be a positive integer, got {raw!r}",
                                 key="RRF_THREADS") from None
    if n < 1:
        raise ConfigurationError("RRF_THREADS must be a positive integer", key="RRF_THREADS")
    return n


def goal_maze(cfg: RunConfig) -> MazeSpec:
    maze = load_layout(cfg.layout)
    cell = cfg.goal
    if cell is None:
        if maze.goal is not None:
            return maze
        if maze.name not in GOAL_CELLS:
            raise ConfigurationError("layout has no goal; set goal_cell", key="goal_cell")
        cell = GOAL_CELLS[maze.name][0]
    if not (0 <= cell[0] < maze.rows and 0 <= cell[1] < maze.cols) or maze.grid[cell]:
        raise ConfigurationError(f"goal cell {cell} is not a free cell of {cfg.layout}", key="goal_cell")
    return maze.with_goal(maze.cell_center(cell))


def data_seed(cfg: RunConfig, role: str, maze: MazeSpec) -> list[int]:
    """Seed entropy per dataset; base data ignores the goal, expert data does not."""
    roles = {"base": 0, "expert": 1, "base_test": 2, "expert_test": 3}
    key = [cfg.seed, roles[role]]
    if role.startswith("expert"):
        key.extend(maze.goal_cell())
    return key


def make_dataset(cfg: RunConfig, maze: MazeSpec, role: str, n_transitions: int | None = None):
    mode = "base" if role.startswith("base") else "expert"
    n = n_transitions or (cfg.n_transitions if role in ("base", "expert") else cfg.test_transitions)
    ds = generate_dataset(maze, mode, n, data_seed(cfg, role, maze), horizon=cfg.horizon,
                          episode_length=cfg.episode_length)
    return ds.with_stats(bounds_stats(maze))


def denoiser_config(cfg: RunConfig, role: str) -> DenoiserConfig:
    return DenoiserConfig(hidden=cfg.diffusion_hidden, train_steps=cfg.diffusion_train_steps,
                          batch_size=cfg.diffusion_batch, lr=cfg.diffusion_lr,
                          lr_schedule=cfg.diffusion_lr_schedule, activation=cfg.activation,
                          diffusion_steps=cfg.diffusion_steps, gaussian_skip=cfg.gaussian_skip,
                          log_every=cfg.log_every, seed=cfg.seed * 2 + (role == "expert"))


def reward_config(cfg: RunConfig) -> RewardConfig:
    return RewardConfig(hidden=cfg.reward_hidden, activation=cfg.activation, lr=cfg.reward_lr,
                        lr_schedule=cfg.reward_lr_schedule, batch_size=cfg.reward_batch,
                        train_steps=cfg.reward_train_steps, window=cfg.reward_window,
                        target_mode=cfg.target_mode, log_every=cfg.log_every, seed=cfg.seed,
                        steps_per_sample=cfg.reward_steps_per_sample or None)


def train_reward(cfg: RunConfig, base, expert, base_ds, expert_ds, on_record=None):
    """alg1 trains on noised base and expert data; alg2 on pairs of sampled chain steps."""
    rc = reward_config(cfg)
    if cfg.algorithm == "alg1":
        return train_reward_alg1(base, expert, [base_ds, expert_ds], rc, on_record=on_record)
    paired = generate_paired_dataset_alg2(base, expert, cfg.paired_chains, seed=[cfg.seed, 5])
    return train_reward_alg2(paired, rc, on_record=on_record)


def balanced_test_sets(cfg: RunConfig, maze: MazeSpec):
    """Held-out base and expert trajectories, equal in number."""
    b = make_dataset(cfg, maze, "base_test").trajectories
    e = make_dataset(cfg, maze, "expert_test").trajectories
    n = min(len(b), len(e), cfg.discriminate_samples)
    rng = np.random.default_rng([cfg.seed, 9])
    return (b[np.sort(rng.choice(len(b), n, replace=False))],
            e[np.sort(rng.choice(len(e), n, replace=False))])


def evaluate_reward(cfg: RunConfig, maze: MazeSpec, r, base_ds) -> dict:
    grid = reward_heatmap(r, base_ds, maze)
    cell, ok = smooth_and_localize(grid, maze)
    tb, te = balanced_test_sets(cfg, maze)
    stats = bounds_stats(maze)
    return {
        "argmax_cell": list(cell), "localized": bool(ok),
        "accuracy": discriminability(r, tb, te, cfg.seed, stats=stats),
        "shuffled_accuracy": discriminability(r, tb, te, cfg.seed, stats=stats, shuffle_labels=True),
    }


# ------------------------------------------------------------------ protocol

@dataclass
class ProtocolSummary:
    records: list
    success_rate: float
    success_ci: tuple
    mean_accuracy: float
    mean_shuffled_accuracy: float


def layout_seed_runs(cfg: RunConfig, goals) -> list[dict]:
    """One base model per (layout, seed), reused for every goal.

    Base data never looks at the goal and normalization uses the maze's
    physical bounds, so the base model is identical across goals.
    """
    t0 = time.perf_counter()
    maze0 = goal_maze(cfg.replace(goal_cell="{},{}".format(*goals[0])))
    base_ds = make_dataset(cfg, maze0, "base")
    base, _ = train_denoiser(base_ds, denoiser_config(cfg, "base"))
    out = []
    for cell in goals:
        c = cfg.replace(goal_cell=f"{cell[0]},{cell[1]}")
        maze = goal_maze(c)
        expert_ds = make_dataset(c, maze, "expert")
        expert, _ = train_denoiser(expert_ds, denoiser_config(c, "expert"))
        r, _ = train_reward(c, base, expert, base_ds, expert_ds)
        rec = {"layout": cfg.layout, "goal_cell": list(cell), "seed": cfg.seed}
        rec.update(evaluate_reward(c, maze, r, base_ds))
        out.append(rec)
    for rec in out:
        rec["group_seconds"] = time.perf_counter() - t0
    return out


def _group(args):
    cfg, goals = args
    return layout_seed_runs(cfg, goals)


def run_localization_protocol(cfg: RunConfig, layouts=("open", "umaze"), seeds=(0, 1, 2),
                              goals=None, workers: int | None = None) -> ProtocolSummary:
    """Localization and discriminability over layouts x goals x seeds."""
    tasks = []
    for layout in layouts:
        cells = (goals or GOAL_CELLS)[layout]
        for s in seeds:
            tasks.append((cfg.replace(layout=layout, seed=s), list(cells)))
    workers = min(workers or worker_count(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(_group, tasks))
    else:
        groups = [_group(t) for t in tasks]
    records = [rec for g in groups for rec in g]
    hits = sum(rec["localized"] for rec in records)
    p, lo, hi = accuracy_ci(hits, len(records))
    return ProtocolSummary(records, p, (lo, hi),
                           float(np.mean([r["accuracy"] for r in records])),
                           float(np.mean([r["shuffled_accuracy"] for r in records])))


def steering_setup(cfg: RunConfig):
    """Guidance settings for a run."""
    return GuidanceConfig(omega=cfg.omega, t_stopgrad=cfg.t_stopgrad)
