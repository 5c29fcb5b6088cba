"""Discrete-time DDPM over flattened trajectory vectors.

Step indices run over ``1..T``; ``alpha_bar[0] == 1`` is the clean data.
Anything with a ``schedule`` attribute and a ``predict_noise(x, t)`` method
can stand in for a trained :class:`Denoiser` (the analytic Gaussian models
in :mod:`relreward.oracles` use this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, RangeError, ShapeError, TrainingError
from .gradcore import (MLPParams, SquaredError, adam_init, adam_step, cosine_decay, init_mlp,
                       loss_param_gradient, mlp_forward)

N_TIME_FEATURES = 9
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables for a T-step schedule; ``beta[t-1]`` belongs to step ``t``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray        # length T+1, alpha_bar[0] = 1
    posterior_sigma: np.ndarray  # reverse-step noise scale, sqrt(beta)

    def check_step(self, t, low: int = 0):
        arr = np.asarray(t)
        if arr.size and (arr.min() < low or arr.max() > self.T):
            raise RangeError(f"diffusion step {t} outside [{low}, {self.T}]")

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.T == other.T and np.array_equal(self.beta, other.beta)


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 2 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigurationError("betas must be a 1-D table of values in (0, 1) with T >= 2")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(beta.size, beta, alpha, alpha_bar, np.sqrt(beta))


def cosine_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule (offset 0.008) with betas clipped at 0.999."""
    if int(T) != T or T < 2:
        raise ConfigurationError(f"need T >= 2 diffusion steps, got {T}", key="diffusion_steps")
    T = int(T)
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
    ratio = f[1:] / f[:-1]
    beta = np.clip(1.0 - ratio, 1e-12, MAX_BETA)
    return schedule_from_betas(beta)


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form sample of ``q(x_t | x_0)`` for the given noise draw.

    ``t`` may be a scalar or one step per row of a batch.
    """
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} differs from data shape {x0.shape}")
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(x_prev, t, z, sched: NoiseSchedule) -> np.ndarray:
    """One step of the forward kernel, ``x_t ~ q(x_t | x_{t-1})``."""
    sched.check_step(t, low=1)
    b = sched.beta[t - 1]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * z


def time_embedding(t, T: int) -> np.ndarray:
    """``[t/T, sin(pi 2^k t/T), cos(pi 2^k t/T) for k=0..3]`` per row."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    feats = [s]
    for k in range(4):
        w = math.pi * 2.0 ** k
        feats.append(np.sin(w * s))
        feats.append(np.cos(w * s))
    return np.stack(feats, axis=1)


def _step_vector(t, n: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        return np.full(n, int(t))
    if t.shape != (n,):
        raise ShapeError(f"expected {n} diffusion steps, got shape {t.shape}")
    return t.astype(np.int64)


@dataclass
class GaussianSkip:
    """Closed-form noise prediction for ``N(mean, basis diag(eigs) basis^T)`` data.

    For Gaussian data the optimal prediction is linear in ``x_t``:
    ``sqrt(1-abar) (abar S + (1-abar) I)^-1 (x_t - sqrt(abar) mean)``.
    Fitted to the training set's first two moments it captures the smooth,
    low-rank structure of trajectories; the network then models what is
    left.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigs: np.ndarray

    @classmethod
    def fit(cls, x) -> "GaussianSkip":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
        eigs, basis = np.linalg.eigh(cov)
        return cls(mean, basis, np.clip(eigs, 0.0, None))

    def predict(self, x, steps, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.alpha_bar[steps][:, None]
        z = (x - np.sqrt(ab) * self.mean) @ self.basis
        return (z * (np.sqrt(1.0 - ab) / (ab * self.eigs + 1.0 - ab))) @ self.basis.T


@dataclass
class Denoiser:
    """Noise-prediction model over flattened ``(H, state+action)`` trajectories.

    The prediction is the network output, plus the closed-form Gaussian
    prediction when ``skip`` is set.
    """

    net: MLPParams
    schedule: NoiseSchedule
    norm: object = None          # maze.NormStats of the training data
    horizon: int = 0
    state_dim: int = 0
    action_dim: int = 0
    skip: GaussianSkip | None = None

    def __post_init__(self):
        expected = self.traj_dim + N_TIME_FEATURES
        if self.net.input_dim != expected or self.net.output_dim != self.traj_dim:
            raise ShapeError(
                f"net maps {self.net.input_dim}->{self.net.output_dim}, "
                f"expected {expected}->{self.traj_dim}"
            )
        if self.skip is not None and self.skip.mean.shape != (self.traj_dim,):
            raise ShapeError("Gaussian skip does not match the trajectory length")

    @property
    def traj_dim(self) -> int:
        return self.horizon * (self.state_dim + self.action_dim)

    def predict_noise(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.shape[1] != self.traj_dim:
            raise ShapeError(f"trajectory vector of length {xb.shape[1]}, expected {self.traj_dim}")
        steps = _step_vector(t, xb.shape[0])
        self.schedule.check_step(steps)
        inp = np.concatenate([xb, time_embedding(steps, self.schedule.T)], axis=1)
        out = mlp_forward(self.net, inp)
        if self.skip is not None:
            out = out + self.skip.predict(xb, steps, self.schedule)
        return out[0] if single else out


@dataclass
class DenoiserConfig:
    hidden: tuple = (256, 256)
    train_steps: int = 20000
    batch_size: int = 64
    lr: float = 2e-4
    lr_schedule: str = "constant"   # or "cosine"
    activation: str = "tanh"
    diffusion_steps: int = 100
    ema_decay: float = 0.0
    gaussian_skip: bool = True
    log_every: int = 100
    seed: int = 0


def train_denoiser(data, config: DenoiserConfig, *, layout=None, norm=None,
                   on_record: Callable[[dict], None] | None = None):
    """Fit an epsilon-prediction model with the simplified DDPM loss.

    With ``gaussian_skip`` the closed-form Gaussian prediction for the data's
    mean and covariance is added to the network, whose output layer starts
    at zero, so training begins at the best linear denoiser.

    ``data`` is an array ``(N, H, D)`` (or already flat ``(N, H*D)``) of
    *normalized* trajectories, or a ``TrajectoryDataset`` whose normalized
    view is used.  ``layout`` is ``(horizon, state_dim, action_dim)``; it is
    inferred from a dataset or 3-D array when omitted.

    Returns ``(denoiser, records)`` where records are ``{"step", "loss"}``
    dicts, one per ``log_every`` steps (mean loss over that window).
    """
    if hasattr(data, "normalized"):
        layout = layout or (data.horizon, data.state_dim, data.action_dim)
        norm = norm if norm is not None else data.stats
        data = data.normalized()
    x = np.asarray(data, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[0] == 0:
        raise ConfigurationError("cannot train a denoiser on an empty dataset", key="dataset")
    if x.ndim == 3:
        layout = layout or (x.shape[1], x.shape[2], 0)
        x = x.reshape(x.shape[0], -1)
    if layout is None:
        layout = (1, x.shape[1], 0)
    horizon, sdim, adim = layout
    if horizon * (sdim + adim) != x.shape[1]:
        raise ShapeError(f"layout {layout} does not match trajectory length {x.shape[1]}")

    sched = cosine_schedule(config.diffusion_steps)
    rng = np.random.default_rng(config.seed)
    n_dim = x.shape[1]
    params = init_mlp([n_dim + N_TIME_FEATURES, *config.hidden, n_dim],
                      activation=config.activation, seed=rng.integers(2**63))
    if not np.all(np.isfinite(x)):
        raise TrainingError("training data contains non-finite values, so the loss would be too")
    skip = GaussianSkip.fit(x) if config.gaussian_skip else None
    if skip is not None:
        params.weights[-1][:] = 0.0
    state = adam_init(params, lr=config.lr)
    ema = params.copy() if config.ema_decay > 0 else None
    if config.lr_schedule not in ("constant", "cosine"):
        raise ConfigurationError(f"unknown learning-rate schedule {config.lr_schedule!r}",
                                 key="lr_schedule")
    cosine = config.lr_schedule == "cosine"
    records = []
    window = []
    for step in range(1, config.train_steps + 1):
        idx = rng.integers(0, x.shape[0], size=config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, n_dim))
        xt = forward_noise(x[idx], t, eps, sched)
        inp = np.concatenate([xt, time_embedding(t, sched.T)], axis=1)
        target = eps if skip is None else eps - skip.predict(xt, t, sched)
        loss, grads = loss_param_gradient(params, inp, SquaredError(target, on="output"))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite denoiser loss at step {step}")
        if cosine:
            state = replace(state, lr=cosine_decay(config.lr, step, config.train_steps))
        state, params = adam_step(state, params, grads)
        if ema is not None:
            for e, p in zip(ema.arrays(), params.arrays()):
                e *= config.ema_decay
                e += (1.0 - config.ema_decay) * p
        window.append(loss)
        if step % config.log_every == 0 or step == config.train_steps:
            rec = {"step": step, "loss": float(np.mean(window))}
            records.append(rec)
            window = []
            if on_record is not None:
                on_record(rec)
    final = ema if ema is not None else params
    return Denoiser(final, sched, norm, horizon, sdim, adim, skip), records


def _posterior_coefs(sched: NoiseSchedule, t: np.ndarray):
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    b = sched.beta[t - 1]
    a = sched.alpha[t - 1]
    return ab, ab_prev, b, a


def posterior_mean(d, x_t, t, clip_denoised: bool = False) -> np.ndarray:
    """Reverse-kernel mean ``mu(x_t, t)`` of a noise-prediction model.

    Without clipping this is ``(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``.
    With clipping the implied clean estimate is clamped to [-1, 1] and the
    mean of ``q(x_{t-1} | x_t, x0_hat)`` is returned instead.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    xb = x_t[None] if single else x_t
    steps = _step_vector(t, xb.shape[0])
    sched = d.schedule
    sched.check_step(steps, low=1)
    eps = d.predict_noise(xb, steps)
    ab, ab_prev, b, a = (c[:, None] for c in _posterior_coefs(sched, steps))
    if clip_denoised:
        x0 = np.clip((xb - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
        mu = (b * np.sqrt(ab_prev) / (1.0 - ab)) * x0 + ((1.0 - ab_prev) * np.sqrt(a) / (1.0 - ab)) * xb
    else:
        mu = (xb - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
    return mu[0] if single else mu


def score_from_noise(sched: NoiseSchedule, eps, t) -> np.ndarray:
    """Convert an epsilon prediction to a score, ``-eps / sqrt(1 - abar_t)``."""
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (eps.ndim - 1))
    return -eps / np.sqrt(1.0 - ab)


@dataclass
class GuidanceConfig:
    """Classifier-guidance settings.

    Guidance is active at steps ``t > t_stopgrad``.  ``scale_by_variance``
    chooses between ``omega * sigma_t^2 * grad`` and ``omega * grad``; when
    left as ``None`` it follows the reward's training target (rewards fitted
    to posterior-mean differences already carry the per-step scale).
    """

    omega: float = 0.3
    t_stopgrad: int = 2
    clip_denoised: bool = True
    scale_by_variance: bool | None = None

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigurationError("guidance scale omega must be >= 0", key="omega")
        if self.t_stopgrad < 0:
            raise ConfigurationError("t_stopgrad must be >= 0", key="t_stopgrad")


Conditioning = Mapping[int, object]


def apply_conditioning(x: np.ndarray, conditioning: Conditioning | None) -> np.ndarray:
    """Overwrite fixed flat coordinates in place; values may be per-row arrays."""
    if conditioning:
        for idx, val in conditioning.items():
            x[:, idx] = val
    return x


def _check_conditioning(conditioning, dim: int, n: int):
    if not conditioning:
        return
    for idx, val in conditioning.items():
        if not 0 <= int(idx) < dim:
            raise RangeError(f"conditioning index {idx} outside [0, {dim})")
        v = np.asarray(val)
        if v.ndim > 1 or (v.ndim == 1 and v.shape[0] != n):
            raise ShapeError(f"conditioning value for index {idx} must be scalar or length {n}")


def _model_dim(d) -> int:
    if hasattr(d, "traj_dim"):
        return d.traj_dim
    return d.dim


def _sample(d, n, conditioning, rng_seed, clip_denoised, guide=None):
    dim = _model_dim(d)
    _check_conditioning(conditioning, dim, n)
    sched = d.schedule
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    x = rng.standard_normal((n, dim))
    apply_conditioning(x, conditioning)
    for t in range(sched.T, 0, -1):
        mu = posterior_mean(d, x, t, clip_denoised=clip_denoised)
        if guide is not None:
            mu = guide(mu, x, t)
        if t > 1:
            x = mu + sched.posterior_sigma[t - 1] * rng.standard_normal((n, dim))
        else:
            x = mu
        apply_conditioning(x, conditioning)
    return x


def ancestral_sample(d, n: int, conditioning: Conditioning | None = None, rng_seed=None,
                     clip_denoised: bool = True) -> np.ndarray:
    """Draw ``n`` flat samples by running the reverse chain from pure noise.

    ``conditioning`` maps flat coordinate indices to fixed values, which are
    written into the sample after initialization and after every step.  The
    last step (t=1 -> 0) adds no noise.
    """
    return _sample(d, n, conditioning, rng_seed, clip_denoised)


def guided_sample(d, reward, gc: GuidanceConfig, n: int, conditioning: Conditioning | None = None,
                  rng_seed=None) -> np.ndarray:
    """Ancestral sampling with the reward gradient added to each reverse mean.

    ``reward`` must offer ``gradient(x, t)`` returning the gradient of the
    trajectory reward for a batch of flat samples.  With ``omega == 0`` or
    ``t_stopgrad >= T`` this draws exactly what :func:`ancestral_sample` draws.
    """
    if gc.t_stopgrad > d.schedule.T:
        raise ConfigurationError(f"t_stopgrad={gc.t_stopgrad} exceeds T={d.schedule.T}",
                                 key="t_stopgrad")
    scaled = gc.scale_by_variance
    if scaled is None:
        scaled = getattr(reward, "target_mode", "score") != "mean"
    sched = d.schedule

    def guide(mu, x, t):
        if gc.omega == 0 or t <= gc.t_stopgrad:
            return mu
        g = reward.gradient(x, np.full(x.shape[0], t))
        w = gc.omega * (sched.beta[t - 1] if scaled else 1.0)
        return mu + w * g

    return _sample(d, n, conditioning, rng_seed, gc.clip_denoised, guide=guide)
