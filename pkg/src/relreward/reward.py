"""Relative reward learned by matching its input-gradient to a model difference.

A :class:`RewardNet` scores a flattened trajectory as the mean, over
equal-length windows, of per-step values ``g(s, a, t)``.  Training pushes
``grad_x rho(x_t, t)`` toward either the difference of the two models'
scores or the difference of their reverse-step means, with ``x_t`` drawn
from noised data (:func:`train_reward_alg1`) or from stored sampling
chains (:func:`train_reward_alg2`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diffusion import N_TIME_FEATURES, forward_noise, posterior_mean, time_embedding
from .errors import ConfigurationError, ShapeError, TrainingError
from .gradcore import (MLPParams, SquaredError, adam_init, adam_step, cosine_decay, init_mlp,
                       loss_param_gradient, mlp_forward, mlp_value_and_input_gradient)

TARGET_MODES = ("score", "mean")


@dataclass
class RewardNet:
    """Per-step reward ``g`` plus the trajectory layout it is applied to."""

    net: MLPParams
    horizon: int
    state_dim: int
    action_dim: int
    window: int
    diffusion_steps: int
    target_mode: str = "mean"

    def __post_init__(self):
        if self.window < 1 or self.horizon % self.window:
            raise ConfigurationError(f"window {self.window} does not divide horizon {self.horizon}",
                                     key="reward_window")
        if self.net.input_dim != self.step_dim + N_TIME_FEATURES or self.net.output_dim != 1:
            raise ShapeError(f"reward net maps {self.net.input_dim}->{self.net.output_dim}, "
                             f"expected {self.step_dim + N_TIME_FEATURES}->1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigurationError(f"unknown target mode {self.target_mode!r}", key="target_mode")

    @property
    def step_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def traj_dim(self) -> int:
        return self.horizon * self.step_dim

    def _rows(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.traj_dim:
            raise ShapeError(f"trajectory vector of length {xb.shape[-1]}, expected {self.traj_dim}")
        B = xb.shape[0]
        t = np.asarray(t)
        steps = np.full(B, int(t)) if t.ndim == 0 else t.astype(np.int64)
        if steps.shape != (B,):
            raise ShapeError(f"expected {B} diffusion steps, got shape {steps.shape}")
        emb = np.repeat(time_embedding(steps, self.diffusion_steps), self.horizon, axis=0)
        rows = np.concatenate([xb.reshape(B * self.horizon, self.step_dim), emb], axis=1)
        return rows, B, single

    def step_values(self, steps, t=0) -> np.ndarray:
        """``g`` on an ``(M, step_dim)`` array of (state, action) rows at diffusion step ``t``."""
        steps = np.asarray(steps, dtype=np.float64)
        if steps.ndim != 2 or steps.shape[1] != self.step_dim:
            raise ShapeError(f"step rows must have {self.step_dim} columns")
        tt = np.broadcast_to(np.asarray(t), (steps.shape[0],))
        rows = np.concatenate([steps, time_embedding(tt, self.diffusion_steps)], axis=1)
        return mlp_forward(self.net, rows)[:, 0]

    def value(self, x, t):
        """Mean over windows of the per-window mean of ``g``."""
        rows, B, single = self._rows(x, t)
        g = mlp_forward(self.net, rows)[:, 0]
        n_win = self.horizon // self.window
        out = g.reshape(B, n_win, self.window).mean(axis=2).mean(axis=1)
        return float(out[0]) if single else out

    def gradient(self, x, t) -> np.ndarray:
        """Gradient of :meth:`value` with respect to every trajectory coordinate."""
        rows, B, single = self._rows(x, t)
        _, g = mlp_value_and_input_gradient(self.net, rows)
        grad = (g[:, : self.step_dim] / self.horizon).reshape(B, self.traj_dim)
        return grad[0] if single else grad


def reward_of_trajectory(r: RewardNet, tau, t):
    return r.value(tau, t)


def reward_trajectory_gradient(r: RewardNet, tau, t) -> np.ndarray:
    return r.gradient(tau, t)


@dataclass(frozen=True)
class ScoreDifferenceTarget:
    """Which model difference the reward gradient is fitted to.

    ``mode="score"`` uses ``s_expert - s_base``; ``mode="mean"`` uses the
    difference of reverse-step means.  ``sign=+1`` points from the base model
    toward the expert, which is the direction guidance must push.
    """

    mode: str = "mean"
    sign: int = 1

    def __post_init__(self):
        if self.mode not in TARGET_MODES:
            raise ConfigurationError(f"unknown target mode {self.mode!r}", key="target_mode")
        if self.sign not in (1, -1):
            raise ConfigurationError("target sign must be +1 or -1", key="target_sign")

    def __call__(self, base, expert, x, t) -> np.ndarray:
        _check_pair(base, expert)
        t = np.asarray(t)
        sched = base.schedule
        diff = expert.predict_noise(x, t) - base.predict_noise(x, t)
        ab = sched.alpha_bar[t]
        coef = -1.0 / np.sqrt(1.0 - ab)
        if self.mode == "mean":
            coef = coef * sched.beta[t - 1] / np.sqrt(sched.alpha[t - 1])
        return self.sign * coef[:, None] * diff


def _check_pair(base, expert):
    if not base.schedule.same_as(expert.schedule):
        raise ConfigurationError("base and expert models use different noise schedules",
                                 key="diffusion_steps")
    nb, ne = getattr(base, "norm", None), getattr(expert, "norm", None)
    if (nb is None) != (ne is None) or (nb is not None and not (
            np.array_equal(nb.min, ne.min) and np.array_equal(nb.max, ne.max))):
        raise ConfigurationError("base and expert models use different normalization", key="norm")


def rrf_loss(r: RewardNet, x, t, target, step_index=None) -> tuple[float, MLPParams]:
    """Mean squared distance between ``grad rho(x, t)`` and ``target``, with parameter gradients.

    ``target`` is a ``(B, n)`` array of precomputed differences.  The loss
    is a sum over (trajectory, step) rows, so ``step_index`` (``(B, k)``
    step positions) restricts it to a subset of rows, rescaled so that the
    value is an unbiased estimate of ``mean_b |grad rho_b - target_b|^2``.
    """
    rows, B, _ = r._rows(x, t)
    target = np.asarray(target, dtype=np.float64).reshape(B * r.horizon, r.step_dim)
    if step_index is not None:
        step_index = np.asarray(step_index)
        flat = (np.arange(B)[:, None] * r.horizon + step_index).ravel()
        rows, target = rows[flat], target[flat]
    full = np.zeros_like(rows)
    full[:, : r.step_dim] = target * r.horizon
    mask = np.zeros(rows.shape[1])
    mask[: r.step_dim] = 1.0
    loss = SquaredError(full, on="input_grad", scale=1.0 / r.horizon, mask=mask)
    return loss_param_gradient(r.net, rows, loss)


def rrf_loss_from_models(r: RewardNet, x, t, base, expert, target: ScoreDifferenceTarget):
    """:func:`rrf_loss` with the target computed from the two models."""
    return rrf_loss(r, x, t, target(base, expert, x, t))


@dataclass
class RewardConfig:
    hidden: tuple = (128, 64, 32)
    activation: str = "tanh"
    lr: float = 5e-5
    lr_schedule: str = "constant"
    batch_size: int = 256
    train_steps: int = 5000
    window: int = 4
    target_mode: str = "mean"
    target_sign: int = 1
    log_every: int = 100
    seed: int = 0
    layout: tuple | None = None   # (horizon, state_dim, action_dim) when models carry none
    steps_per_sample: int | None = None   # random trajectory steps per sample in the loss


def _layout_of(model, config: RewardConfig, dim: int):
    if config.layout is not None:
        layout = tuple(config.layout)
    elif getattr(model, "horizon", 0):
        layout = (model.horizon, model.state_dim, model.action_dim)
    else:
        layout = (1, dim, 0)
    if layout[0] * (layout[1] + layout[2]) != dim:
        raise ShapeError(f"layout {layout} does not match trajectory length {dim}")
    return layout


def init_reward(layout, config: RewardConfig, diffusion_steps: int, rng=None) -> RewardNet:
    horizon, sdim, adim = layout
    seed = rng.integers(2**63) if rng is not None else config.seed
    net = init_mlp([sdim + adim + N_TIME_FEATURES, *config.hidden, 1],
                   activation=config.activation, seed=seed)
    return RewardNet(net, horizon, sdim, adim, config.window, diffusion_steps, config.target_mode)


def _fit(r: RewardNet, draw: Callable, config: RewardConfig, rng, on_record=None):
    if config.lr_schedule not in ("constant", "cosine"):
        raise ConfigurationError(f"unknown learning-rate schedule {config.lr_schedule!r}",
                                 key="lr_schedule")
    state = adam_init(r.net, lr=config.lr)
    records, window = [], []
    k = config.steps_per_sample
    if k is not None and not 1 <= k <= r.horizon:
        raise ConfigurationError(f"steps_per_sample must lie in [1, {r.horizon}]", key="steps_per_sample")
    for step in range(1, config.train_steps + 1):
        x, t, target = draw(rng)
        idx = None
        if k is not None and k < r.horizon:
            idx = np.argsort(rng.random((x.shape[0], r.horizon)), axis=1)[:, :k]
        value, grads = rrf_loss(r, x, t, target, idx)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite reward loss at step {step}")
        if config.lr_schedule == "cosine":
            state = replace(state, lr=cosine_decay(config.lr, step, config.train_steps))
        state, params = adam_step(state, r.net, grads)
        r = replace(r, net=params)
        window.append(value)
        if step % config.log_every == 0 or step == config.train_steps:
            rec = {"step": step, "loss": float(np.mean(window))}
            records.append(rec)
            window = []
            if on_record is not None:
                on_record(rec)
    return r, records


def _as_pool(data, norm):
    if hasattr(data, "trajectories"):
        x = data.normalized(norm) if norm is not None else data.normalized()
        return x.reshape(len(data), -1)
    x = np.asarray(data, dtype=np.float64)
    return x.reshape(x.shape[0], -1) if x.size else np.zeros((0, 0))


def train_reward_alg1(base, expert, dataset, config: RewardConfig, on_record=None):
    """Fit a reward to the base-to-expert difference on noised data.

    ``dataset`` is one dataset/array of clean (normalized) trajectories, or a
    sequence of them; with several pools each batch draws equally from all
    of them.  Trajectory datasets are normalized with the models' shared
    statistics.  Returns ``(reward, records)``.
    """
    _check_pair(base, expert)
    if config.target_mode not in TARGET_MODES:
        raise ConfigurationError(f"unknown target mode {config.target_mode!r}", key="target_mode")
    pools_in = dataset if isinstance(dataset, (list, tuple)) else [dataset]
    norm = getattr(base, "norm", None)
    pools = [_as_pool(p, norm) for p in pools_in]
    if not pools or any(p.shape[0] == 0 for p in pools):
        raise ConfigurationError("cannot train a reward on an empty dataset", key="dataset")
    dim = pools[0].shape[1]
    target = ScoreDifferenceTarget(config.target_mode, config.target_sign)
    sched = base.schedule
    rng = np.random.default_rng(config.seed)
    r = init_reward(_layout_of(base, config, dim), config, sched.T, rng)
    shares = np.diff(np.linspace(0, config.batch_size, len(pools) + 1).round().astype(int))

    def draw(rng):
        x0 = np.concatenate([p[rng.integers(0, p.shape[0], size=k)] for p, k in zip(pools, shares)])
        t = rng.integers(1, sched.T + 1, size=x0.shape[0])
        xt = forward_noise(x0, t, rng.standard_normal(x0.shape), sched)
        return xt, t, target(base, expert, xt, t)

    return _fit(r, draw, config, rng, on_record)


@dataclass
class PairedDataset:
    """Reverse-step outputs of both models taken from the same noisy input.

    Row ``i`` holds the step ``step[i]`` (the ``t+1`` of the pair), the
    shared input ``x[i]``, and both models' next states; ``chain[i]`` is 1
    for chains continued with the base model and 2 for the expert.
    """

    step: np.ndarray
    x: np.ndarray
    out_base: np.ndarray
    out_expert: np.ndarray
    chain: np.ndarray
    layout: tuple | None = None
    diffusion_steps: int = 0

    def __len__(self) -> int:
        return self.step.shape[0]

    @property
    def difference(self) -> np.ndarray:
        return self.out_expert - self.out_base


def generate_paired_dataset_alg2(base, expert, K: int, seed, clip_denoised: bool = False) -> PairedDataset:
    """Run ``K`` sampling chains per model, recording both models' step at every node.

    Both branches receive the same noise draw, so their outputs differ
    exactly by the difference of reverse-step means; the chain continues
    with the branch of the model that owns it.  Yields ``2 K T`` rows.
    """
    _check_pair(base, expert)
    sched = base.schedule
    dim = base.traj_dim if hasattr(base, "traj_dim") else base.dim
    rng = np.random.default_rng(seed)
    steps, xs, outs_b, outs_e, chains = [], [], [], [], []
    for m, model_id in ((base, 1), (expert, 2)):
        x = rng.standard_normal((K, dim))
        for t in range(sched.T, 0, -1):
            mu_b = posterior_mean(base, x, t, clip_denoised=clip_denoised)
            mu_e = posterior_mean(expert, x, t, clip_denoised=clip_denoised)
            noise = sched.posterior_sigma[t - 1] * rng.standard_normal((K, dim)) if t > 1 else 0.0
            nb, ne = mu_b + noise, mu_e + noise
            steps.append(np.full(K, t))
            xs.append(x)
            outs_b.append(nb)
            outs_e.append(ne)
            chains.append(np.full(K, model_id))
            x = nb if model_id == 1 else ne
    layout = (base.horizon, base.state_dim, base.action_dim) if getattr(base, "horizon", 0) else None
    return PairedDataset(np.concatenate(steps), np.concatenate(xs), np.concatenate(outs_b),
                         np.concatenate(outs_e), np.concatenate(chains), layout, sched.T)


def train_reward_alg2(paired: PairedDataset, config: RewardConfig, on_record=None):
    """Fit a reward to stored output differences; no model is evaluated."""
    if len(paired) == 0:
        raise ConfigurationError("cannot train a reward on an empty paired dataset", key="dataset")
    dim = paired.x.shape[1]
    cfg = config if config.layout is not None or paired.layout is None else replace(config, layout=paired.layout)
    cfg = replace(cfg, target_mode="mean")
    rng = np.random.default_rng(cfg.seed)
    r = init_reward(_layout_of(None, cfg, dim), cfg, paired.diffusion_steps, rng)
    diff = paired.difference * cfg.target_sign

    def draw(rng):
        idx = rng.integers(0, len(paired), size=cfg.batch_size)
        return paired.x[idx], paired.step[idx], diff[idx]

    return _fit(r, draw, cfg, rng, on_record)


def mean_gradient_norm(r: RewardNet, x, t) -> float:
    return float(np.mean(np.linalg.norm(r.gradient(x, t), axis=-1)))
