"""scikit-learn style wrappers around the diffusion and reward trainers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .diffusion import DenoiserConfig, ancestral_sample, train_denoiser
from .reward import RewardConfig, train_reward_alg1


class TrajectoryDiffusion(BaseEstimator):
    """Fit a trajectory denoiser to ``X`` of shape ``(n, horizon, state_dim + action_dim)``.

    ``X`` must already be scaled to [-1, 1]; ``state_dim`` splits each row
    into state and action parts.
    """

    def __init__(self, state_dim=4, hidden=(256, 256), diffusion_steps=100, train_steps=20000,
                 batch_size=64, lr=2e-4, lr_schedule="constant", gaussian_skip=True, seed=0):
        self.state_dim = state_dim
        self.hidden = hidden
        self.diffusion_steps = diffusion_steps
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.gaussian_skip = gaussian_skip
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        cfg = DenoiserConfig(hidden=tuple(self.hidden), train_steps=self.train_steps,
                             batch_size=self.batch_size, lr=self.lr, lr_schedule=self.lr_schedule,
                             diffusion_steps=self.diffusion_steps,
                             gaussian_skip=self.gaussian_skip, seed=self.seed)
        layout = (X.shape[1], self.state_dim, X.shape[2] - self.state_dim)
        self.model_, self.loss_curve_ = train_denoiser(X, cfg, layout=layout)
        return self

    def sample(self, n, conditioning=None, seed=None):
        """``n`` trajectories shaped like the training data."""
        self._check()
        flat = ancestral_sample(self.model_, n, conditioning, seed)
        return flat.reshape(n, self.model_.horizon, -1)

    def _check(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit first")


class RelativeReward(BaseEstimator):
    """Learn a reward whose gradient explains how ``expert`` differs from ``base``.

    ``base`` and ``expert`` are fitted :class:`TrajectoryDiffusion` estimators
    (or raw denoisers).  ``fit`` takes the clean trajectories to noise, as an
    array or a list of arrays drawn from equally.
    """

    def __init__(self, base=None, expert=None, hidden=(128, 64, 32), window=4, lr=5e-5,
                 lr_schedule="constant", batch_size=256, train_steps=5000, target_mode="mean",
                 steps_per_sample=None, seed=0):
        self.base = base
        self.expert = expert
        self.hidden = hidden
        self.window = window
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.target_mode = target_mode
        self.steps_per_sample = steps_per_sample
        self.seed = seed

    @staticmethod
    def _model(m):
        if m is None:
            raise ValueError("base and expert models are required")
        return getattr(m, "model_", m)

    def fit(self, X, y=None):
        cfg = RewardConfig(hidden=tuple(self.hidden), window=self.window, lr=self.lr,
                           lr_schedule=self.lr_schedule, batch_size=self.batch_size,
                           train_steps=self.train_steps, target_mode=self.target_mode,
                           steps_per_sample=self.steps_per_sample, seed=self.seed)
        pools = [np.asarray(p, dtype=np.float64) for p in X] if isinstance(X, list) else \
            np.asarray(X, dtype=np.float64)
        self.reward_, self.loss_curve_ = train_reward_alg1(self._model(self.base),
                                                           self._model(self.expert), pools, cfg)
        return self

    def predict(self, X, t=0):
        """Trajectory rewards of ``X`` ``(n, horizon, dim)`` at diffusion time ``t``."""
        self._check()
        X = np.asarray(X, dtype=np.float64)
        return self.reward_.value(X.reshape(X.shape[0], -1), t)

    def gradient(self, X, t=0):
        self._check()
        X = np.asarray(X, dtype=np.float64)
        return self.reward_.gradient(X.reshape(X.shape[0], -1), t).reshape(X.shape)

    def _check(self):
        if not hasattr(self, "reward_"):
            raise NotFittedError("call fit first")
