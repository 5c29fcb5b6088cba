"""Acceptance suite: each test measures one criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; one pass/fail line per
criterion is printed in the "acceptance criteria" section of the summary.
The maze criteria (6-9) train many models and take the better part of an
hour on one core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from relreward.cli import main
from relreward.config import parse_config
from relreward.diffusion import (N_TIME_FEATURES, GuidanceConfig, cosine_schedule, forward_noise,
                                 forward_step, train_denoiser)
from relreward.evaluation import bootstrap_ci, discriminability, episode_starts, run_policy
from relreward.experiments import (denoiser_config, goal_maze, make_dataset, run_localization_protocol,
                                   train_reward)
from relreward.gradcore import (SquaredError, finite_diff_gradient, init_mlp, loss_param_gradient,
                                mlp_forward, mlp_input_gradient)
from relreward.maze import bounds_stats
from relreward.oracles import (AnalyticGaussianModel, DriftField, PotentialGrid, gaussian_mean_difference,
                               grid_conservative_projection, rms, theorem1_check, theorem1_deviation)
from relreward.reward import (RewardConfig, RewardNet, generate_paired_dataset_alg2, mean_gradient_norm,
                              reward_trajectory_gradient, train_reward_alg1, train_reward_alg2)

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# ------------------------------------------------------------------ 1

def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_in = worst_traj = 0.0
    for trial in range(100):
        act = ("tanh", "softplus", "gelu")[trial % 3]
        p = init_mlp([5, 8, 8, 1], activation=act, seed=trial)
        x = rng.normal(size=5)
        fd = finite_diff_gradient(lambda v: mlp_forward(p, v)[0], x, eps=1e-5)
        worst_in = max(worst_in, rel_err(mlp_input_gradient(p, x), fd))
        r = RewardNet(init_mlp([3 + N_TIME_FEATURES, 8, 6, 1], activation=act, seed=1000 + trial),
                      8, 2, 1, 4, 20)
        tau = rng.normal(size=24)
        t = int(rng.integers(0, 21))
        fd = finite_diff_gradient(lambda v: r.value(v, t), tau, eps=1e-5)
        worst_traj = max(worst_traj, rel_err(reward_trajectory_gradient(r, tau, t), fd))
    worst_param = 0.0
    for act in ("tanh", "softplus", "gelu"):
        p = init_mlp([4, 7, 5, 1], activation=act, seed=9)
        for b in p.biases:
            b[:] = 0.3 * rng.normal(size=b.shape)
        x = rng.normal(size=(8, 4))
        loss = SquaredError(rng.normal(size=(8, 4)))          # the L_RRF form
        _, grads = loss_param_gradient(p, x, loss)
        fd = finite_diff_gradient(lambda v: loss_param_gradient(p.with_vector(v), x, loss)[0],
                                  p.to_vector(), 1e-6)
        worst_param = max(worst_param, rel_err(grads.to_vector(), fd))
    secs = time.perf_counter() - t0
    ok = worst_in <= 1e-6 and worst_traj <= 1e-6 and worst_param <= 1e-4 and secs < 60
    criterion(1, "gradient fidelity", ok,
              f"input {worst_in:.1e}, trajectory {worst_traj:.1e} (<= 1e-6 over 100); "
              f"parameter {worst_param:.1e} (<= 1e-4); {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_forward_process_consistency(criterion):
    t0 = time.perf_counter()
    s = cosine_schedule(100)
    rng = np.random.default_rng(2)
    worst_mean = worst_var = 0.0
    for t in (25, 50, 100):
        x0 = rng.uniform(0, 1, size=100_000)
        x = x0.copy()
        for k in range(1, t + 1):
            x = forward_step(x, k, rng.standard_normal(x.shape), s)
        direct = forward_noise(x0, t, rng.standard_normal(x0.shape), s)
        # the mean is near zero at t = T, so it is compared in units of the std
        worst_mean = max(worst_mean, abs(x.mean() - direct.mean()) / direct.std())
        worst_var = max(worst_var, abs(x.var() / direct.var() - 1))
    secs = time.perf_counter() - t0
    ok = worst_mean <= 0.02 and worst_var <= 0.02 and secs < 60
    criterion(2, "forward-process consistency", ok,
              f"mean gap {worst_mean:.4f} std, variance gap {worst_var:.4f} (<= 0.02); {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3

def test_drift_correction_oracle(criterion):
    t0 = time.perf_counter()
    f1 = DriftField(lambda x, t: -x, 1.0)
    f2 = DriftField(lambda x, t: -x + 1.0, 1.0)
    g = lambda t: 1.0
    exact = max(theorem1_check(f1, f2, g, np.zeros(3), 0.01, 100, seed) for seed in range(5))
    dev = theorem1_deviation(f1, f2, g, np.zeros(3), 0.01, 100, 0, h=lambda x, t: 0.0 * x)
    at_one = float(dev[-1])
    secs = time.perf_counter() - t0
    ok = exact <= 1e-12 and at_one > 0.1 and secs < 60
    criterion(3, "drift-correction oracle", ok,
              f"corrected {exact:.1e} (<= 1e-12), uncorrected at t=1 {at_one:.3f} (> 0.1); {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 4

def test_projection_oracle(criterion):
    t0 = time.perf_counter()
    xs = np.linspace(-1.0, 1.0, 64)
    X, Y = np.meshgrid(xs, xs)
    h = xs[1] - xs[0]
    # quadratic potential (the difference stencils are exact for it) and a random discrete one
    phi_grad = np.stack([2 * X - Y + 0.3, -X + 4 * Y], axis=-1)
    rough = PotentialGrid(np.random.default_rng(4).standard_normal((64, 64)), h).gradient()
    recovery = max(rms(grid_conservative_projection(f, h).gradient() - f) for f in (phi_grad, rough))
    decay = np.exp(-8.0 * (X ** 2 + Y ** 2))
    vortex = np.stack([-Y * decay, X * decay], axis=-1)
    vortex_ratio = rms(grid_conservative_projection(vortex, h).gradient()) / rms(vortex)
    plain = np.stack([-Y, X], axis=-1)
    plain_ratio = rms(grid_conservative_projection(plain, h).gradient()) / rms(plain)
    once = grid_conservative_projection(phi_grad + vortex, h).gradient()
    idem = rms(grid_conservative_projection(once, h).gradient() - once)
    secs = time.perf_counter() - t0
    ok = recovery <= 1e-8 and vortex_ratio <= 0.01 and idem <= 1e-10 and secs < 120
    criterion(4, "projection oracle", ok,
              f"potential {recovery:.1e} (<= 1e-8), rotational residual {vortex_ratio:.4f} "
              f"(<= 0.01; plain (-y, x) leaves {plain_ratio:.2f} through boundary flux), "
              f"idempotence {idem:.1e} (<= 1e-10); {secs:.1f}s")
    assert ok


# ------------------------------------------------------------------ 5 and 9 (Gaussian pair)

H, D, T = 4, 2, 100
SCHED = cosine_schedule(T)
BASE = AnalyticGaussianModel(np.tile([0.5, -0.3], H), 0.25, SCHED)
EXPERT = AnalyticGaussianModel(np.tile([-0.4, 0.6], H), 0.25, SCHED)


def gaussian_pools(seed=0):
    rng = np.random.default_rng(seed)
    return [BASE.mean + 0.5 * rng.standard_normal((5000, H * D)),
            EXPERT.mean + 0.5 * rng.standard_normal((5000, H * D))]


def gaussian_test_points():
    rng = np.random.default_rng(123)
    pools = gaussian_pools(seed=7)
    x0 = np.concatenate([pools[0][:500], pools[1][:500]])
    t = rng.integers(1, T + 1, 1000)
    return forward_noise(x0, t, rng.standard_normal(x0.shape), SCHED), t


def gaussian_reward_config(steps=2000):
    return RewardConfig(hidden=(64, 64), lr=1e-3, lr_schedule="cosine", batch_size=256,
                        train_steps=steps, layout=(H, D, 0), seed=0, log_every=500)


def alignment(r, x, t):
    target = gaussian_mean_difference(BASE, EXPERT, x, t)
    g = r.gradient(x, t)
    cos = np.sum(g * target, 1) / (np.linalg.norm(g, axis=1) * np.linalg.norm(target, axis=1))
    return float(cos.mean()), float(np.linalg.norm(g, axis=1).mean() / np.linalg.norm(target, axis=1).mean())


@pytest.fixture(scope="module")
def gaussian_alg1_reward():
    r, _ = train_reward_alg1(BASE, EXPERT, gaussian_pools(), gaussian_reward_config())
    return r


def test_gaussian_end_to_end(criterion, gaussian_alg1_reward):
    t0 = time.perf_counter()
    x, t = gaussian_test_points()
    cos1, mag1 = alignment(gaussian_alg1_reward, x, t)
    paired = generate_paired_dataset_alg2(BASE, EXPERT, 200, seed=0)
    r2, _ = train_reward_alg2(paired, gaussian_reward_config())
    cos2, mag2 = alignment(r2, x, t)
    secs = time.perf_counter() - t0
    ok = cos1 >= 0.99 and cos2 >= 0.98 and abs(mag1 - 1) <= 0.1 and abs(mag2 - 1) <= 0.1 and secs < 600
    criterion(5, "Gaussian end-to-end", ok,
              f"alg1 cos {cos1:.4f} (>= 0.99) norm ratio {mag1:.3f}; alg2 cos {cos2:.4f} (>= 0.98) "
              f"norm ratio {mag2:.3f} (within 10%); {secs:.0f}s")
    assert ok


# ------------------------------------------------------------------ 6 and 7

@pytest.fixture(scope="module")
def protocol():
    t0 = time.perf_counter()
    summary = run_localization_protocol(parse_config(DESK))
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_maze_goal_localization(criterion, protocol):
    summary, secs = protocol
    p, (lo, hi) = summary.success_rate, summary.success_ci
    hits = sum(r["localized"] for r in summary.records)
    ok = len(summary.records) == 24 and p >= 0.6 and secs <= 7200
    criterion(6, "maze goal localization", ok,
              f"{hits}/{len(summary.records)} = {p:.1%} (>= 60%), 95% CI [{lo:.3f}, {hi:.3f}]; {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_maze_discriminability(criterion, protocol):
    summary, _ = protocol
    acc, shuf = summary.mean_accuracy, summary.mean_shuffled_accuracy
    ok = acc >= 0.7 and abs(shuf - 0.5) <= 0.06
    criterion(7, "discriminability", ok,
              f"mean accuracy {acc:.3f} (>= 0.70), label-shuffled {shuf:.3f} (0.5 +- 0.06)")
    assert ok


# ------------------------------------------------------------------ 8 and 9 (maze)

@pytest.fixture(scope="module")
def open_maze():
    cfg = parse_config(DESK, goal_cell="1,5", seed=0)
    maze = goal_maze(cfg)
    base_ds = make_dataset(cfg, maze, "base")
    expert_ds = make_dataset(cfg, maze, "expert")
    t0 = time.perf_counter()
    base, _ = train_denoiser(base_ds, denoiser_config(cfg, "base"))
    expert, _ = train_denoiser(expert_ds, denoiser_config(cfg, "expert"))
    r, _ = train_reward(cfg, base, expert, base_ds, expert_ds)
    return cfg, maze, base, r, base_ds, expert_ds, time.perf_counter() - t0


@pytest.mark.slow
def test_steering_improvement(criterion, open_maze):
    cfg, maze, base, r, _, _, train_secs = open_maze
    t0 = time.perf_counter()
    starts = episode_starts(maze, cfg.steer_episodes, cfg.seed)
    gc = GuidanceConfig(omega=cfg.omega, t_stopgrad=cfg.t_stopgrad)
    steered = run_policy(maze, base, r, gc, starts, cfg.seed, cfg.steer_env_steps)
    plain, plain_paths = run_policy(maze, base, None, None, starts, cfg.seed, cfg.steer_env_steps,
                                    return_paths=True)
    zero, zero_paths = run_policy(maze, base, r, GuidanceConfig(omega=0.0, t_stopgrad=cfg.t_stopgrad),
                                  starts, cfg.seed, cfg.steer_env_steps, return_paths=True)
    secs = time.perf_counter() - t0 + train_secs
    reach_s, reach_u = (steered > 0).astype(float), (plain > 0).astype(float)
    gain, lo, hi = bootstrap_ci(reach_u, reach_s, seed=0)
    identical = np.array_equal(zero_paths, plain_paths) and np.array_equal(zero, plain)
    ok = gain >= 0.10 and lo > 0 and identical and secs <= 1800
    criterion(8, "steering improvement", ok,
              f"reach {reach_s.mean():.3f} steered vs {reach_u.mean():.3f} unsteered over "
              f"{len(starts)} paired episodes, gain {gain:+.3f} (>= 0.10) CI [{lo:.3f}, {hi:.3f}]; "
              f"omega=0 identical: {identical}; {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_null_case_stability(criterion, gaussian_alg1_reward, open_maze):
    # Gaussian: base = expert versus the distinct pair, same training settings
    x, t = gaussian_test_points()
    null_r, _ = train_reward_alg1(BASE, BASE, gaussian_pools(), gaussian_reward_config())
    g_null, g_pair = mean_gradient_norm(null_r, x, t), mean_gradient_norm(gaussian_alg1_reward, x, t)
    # maze: the base planner serves as both models
    cfg, maze, base, r_pair, base_ds, _, _ = open_maze
    r_null, _ = train_reward(cfg, base, base, base_ds, base_ds)
    xb = base_ds.normalized()[:500].reshape(500, -1)
    tb = np.random.default_rng(0).integers(1, cfg.diffusion_steps + 1, 500)
    xb = forward_noise(xb, tb, np.random.default_rng(1).standard_normal(xb.shape), base.schedule)
    m_null, m_pair = mean_gradient_norm(r_null, xb, tb), mean_gradient_norm(r_pair, xb, tb)
    # two independent base test sets, labelled as if one were expert
    sets = [make_dataset(cfg.replace(seed=s), maze, "base_test", 50_000).trajectories for s in (11, 12)]
    n = min(len(sets[0]), len(sets[1]))
    acc = discriminability(r_null, sets[0][:n], sets[1][:n], seed=0, stats=bounds_stats(maze))
    ok = g_null <= 0.05 * g_pair and m_null <= 0.05 * m_pair and acc <= 0.55
    criterion(9, "null-case stability", ok,
              f"Gaussian grad norm {g_null:.2e} vs pair {g_pair:.2e}; maze {m_null:.2e} vs "
              f"{m_pair:.2e} (<= 5%); null discriminability {acc:.3f} over {2 * n} (<= 0.55)")
    assert ok


# ------------------------------------------------------------------ 10

SMALL = """\
diffusion_steps = 10
n_transitions = 3000
test_transitions = 2000
diffusion_hidden = 32
reward_hidden = 16
diffusion_train_steps = 30
reward_train_steps = 30
reward_batch = 16
reward_steps_per_sample = 4
steer_episodes = 6
steer_env_steps = 4
discriminate_samples = 20
log_every = 10
omega = 0.5
"""

STAGES = ("gen-data", "train-diffusion", "train-reward", "eval-heatmap", "eval-discriminate",
          "eval-steer", "run-oracles")


def test_reproducibility(criterion, tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text(SMALL)
    first, second = tmp_path / "first", tmp_path / "second"
    codes = [main([s, "--config", str(conf), "--seed", "3", "--out", str(first)]) for s in STAGES]
    resolved = first / "config.resolved"
    codes += [main([s, "--config", str(resolved), "--out", str(second)]) for s in STAGES]
    capsys.readouterr()
    names = sorted(p.name for p in first.iterdir() if p.name not in ("metrics.jsonl", "config.resolved"))
    differing = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    ok = not any(codes) and not differing and len(names) == 8
    criterion(10, "reproducibility", ok,
              f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical after rerun "
              f"from config.resolved" + (f"; differing: {differing}" if differing else ""))
    assert ok
