"""``rrf`` command-line entry point.

Each subcommand runs one pipeline stage inside an output directory, reading
the artifacts of earlier stages from it::

    rrf gen-data --config run.conf --out runs/a
    rrf train-diffusion --config run.conf --out runs/a
    rrf train-reward --config run.conf --out runs/a
    rrf eval-heatmap --config run.conf --out runs/a
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import evaluation as ev
from .config import RunConfig, parse_config
from .diffusion import train_denoiser
from .errors import DependencyError, RRFError
from .experiments import (balanced_test_sets, denoiser_config, goal_maze, make_dataset,
                          steering_setup, train_reward, worker_count)
from .maze import bounds_stats
from .oracles import run_oracle_suite
from .serialization import deserialize_dataset, load_checkpoint, save_checkpoint, serialize_dataset

SUBCOMMANDS = ("gen-data", "train-diffusion", "train-reward", "eval-heatmap",
               "eval-discriminate", "eval-steer", "run-oracles")


class MetricsLog:
    """Append-only JSON-lines log of ``{run_id, phase, key, value, step, timestamp}``."""

    def __init__(self, path: Path, run_id: str, phase: str):
        self.path = path
        self.run_id = run_id
        self.phase = phase

    def log(self, key: str, value, step=None):
        rec = {"run_id": self.run_id, "phase": self.phase, "key": key, "value": value,
               "step": step, "timestamp": time.time()}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_id(cfg: RunConfig) -> str:
    """Stable id from every setting except the output location."""
    text = cfg.replace(out="").resolved_text()
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _require(out: Path, *names) -> list[Path]:
    paths = [out / n for n in names]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise DependencyError(missing)
    return paths


# ------------------------------------------------------------------ stages

def gen_data(cfg, out, log):
    maze = goal_maze(cfg)
    for role in ("base", "expert"):
        ds = make_dataset(cfg, maze, role)
        serialize_dataset(ds, out / f"{role}.rrf1")
        log.log(f"{role}_windows", len(ds))
        log.log(f"{role}_terminal_reward", ds.meta["terminal_reward"])


def train_diffusion(cfg, out, log):
    paths = _require(out, "base.rrf1", "expert.rrf1")
    for role, path in zip(("base", "expert"), paths):
        ds = deserialize_dataset(path)
        d, _ = train_denoiser(ds, denoiser_config(cfg, role),
                              on_record=lambda rec, role=role: log.log(f"{role}_loss", rec["loss"],
                                                                       rec["step"]))
        save_checkpoint(d, out / f"{role}.rrfc")


def train_reward_stage(cfg, out, log):
    names = ("base.rrfc", "expert.rrfc") + (("base.rrf1", "expert.rrf1") if cfg.algorithm == "alg1"
                                            else ())
    paths = _require(out, *names)
    base, expert = load_checkpoint(paths[0]), load_checkpoint(paths[1])
    data = [deserialize_dataset(p) for p in paths[2:]] or [None, None]
    r, _ = train_reward(cfg, base, expert, *data,
                        on_record=lambda rec: log.log("reward_loss", rec["loss"], rec["step"]))
    save_checkpoint(r, out / "reward.rrfc")


def eval_heatmap(cfg, out, log):
    r_path, ds_path = _require(out, "reward.rrfc", "base.rrf1")
    maze = goal_maze(cfg)
    grid = ev.reward_heatmap(load_checkpoint(r_path), deserialize_dataset(ds_path), maze)
    (out / "heatmap.csv").write_text(ev.heatmap_csv(grid), encoding="utf-8")
    (out / "heatmap.ppm").write_bytes(ev.heatmap_ppm(grid, maze))
    cell, ok = ev.smooth_and_localize(grid, maze)
    log.log("argmax_cell", list(cell))
    log.log("localized", ok)


def eval_discriminate(cfg, out, log):
    (r_path,) = _require(out, "reward.rrfc")
    r = load_checkpoint(r_path)
    maze = goal_maze(cfg)
    tb, te = balanced_test_sets(cfg, maze)
    stats = bounds_stats(maze)
    log.log("accuracy", ev.discriminability(r, tb, te, cfg.seed, stats=stats))
    log.log("shuffled_accuracy", ev.discriminability(r, tb, te, cfg.seed, stats=stats,
                                                     shuffle_labels=True))


def eval_steer(cfg, out, log):
    base_path, r_path = _require(out, "base.rrfc", "reward.rrfc")
    maze = goal_maze(cfg)
    rep = ev.steered_rollout(maze, load_checkpoint(base_path), load_checkpoint(r_path),
                             steering_setup(cfg), cfg.steer_episodes, cfg.seed,
                             env_steps=cfg.steer_env_steps)
    with (out / "steering_report.jsonl").open("w", encoding="utf-8") as fh:
        for rec in rep.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    reached_s = (rep.steered > 0).astype(float)
    reached_u = (rep.unsteered > 0).astype(float)
    mean, lo, hi = ev.bootstrap_ci(reached_u, reached_s, seed=cfg.seed)
    log.log("steered_reach", rep.steered_reach)
    log.log("unsteered_reach", rep.unsteered_reach)
    log.log("reach_gain", mean)
    log.log("reach_gain_ci", [lo, hi])


def run_oracles(cfg, out, log):
    records = run_oracle_suite(seed=cfg.seed)
    for rec in records:
        log.log(f"{rec['oracle']}.{rec['metric']}", rec["value"])
        print(json.dumps(rec, sort_keys=True))
    failed = [f"{r['oracle']}.{r['metric']}" for r in records if not r["pass"]]
    if failed:
        raise RRFError("oracle checks failed: " + ", ".join(failed))


STAGES = {
    "gen-data": gen_data,
    "train-diffusion": train_diffusion,
    "train-reward": train_reward_stage,
    "eval-heatmap": eval_heatmap,
    "eval-discriminate": eval_discriminate,
    "eval-steer": eval_steer,
    "run-oracles": run_oracles,
}


def run_subcommand(name: str, cfg: RunConfig) -> int:
    """Run one stage; writes ``config.resolved`` and appends to ``metrics.jsonl``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")
    STAGES[name](cfg, out, MetricsLog(out / "metrics.jsonl", run_id(cfg), name))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrf", description="Relative reward learning from diffusion models")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--t-stopgrad", type=int, dest="t_stopgrad")
    p.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        worker_count()
        cfg = parse_config(args.config, seed=args.seed, omega=args.omega,
                           t_stopgrad=args.t_stopgrad, out=args.out)
        return run_subcommand(args.subcommand, cfg)
    except DependencyError as exc:
        print(f"rrf {args.subcommand}: {exc}", file=sys.stderr)
        return 3
    except (RRFError, OSError) as exc:
        print(f"rrf {args.subcommand}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
