"""Independent ground truth for the learned components.

Closed-form Gaussian diffusion models, an Euler-Maruyama integrator with
caller-supplied noise, a least-squares projection of a 2-D vector field
onto gradients, and loop-integral checks for conservativeness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .diffusion import NoiseSchedule, cosine_schedule, forward_noise, forward_step
from .errors import ContractError, IntegrationError, ShapeError


# ---------------------------------------------------------------- Gaussians

@dataclass
class AnalyticGaussianModel:
    """Data distribution ``N(mean, sigma2 I)`` pushed through a DDPM schedule.

    Exposes the same ``schedule`` / ``predict_noise`` interface as a trained
    denoiser, so samplers and the reward trainer accept it unchanged.
    """

    mean: np.ndarray
    sigma2: float
    schedule: NoiseSchedule

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if self.mean.ndim != 1:
            raise ShapeError("Gaussian mean must be a vector")
        if not self.sigma2 > 0:
            raise ContractError("Gaussian variance must be positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def traj_dim(self) -> int:
        return self.mean.size

    def marginal_mean(self, t) -> np.ndarray:
        ab = self.schedule.alpha_bar[np.asarray(t)]
        return np.sqrt(ab)[..., None] * self.mean

    def marginal_var(self, t) -> np.ndarray:
        ab = self.schedule.alpha_bar[np.asarray(t)]
        return ab * self.sigma2 + 1.0 - ab

    def score(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), x.shape[:-1])
        return -(x - self.marginal_mean(t)) / self.marginal_var(t)[..., None]

    def predict_noise(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), x.shape[:-1])
        ab = self.schedule.alpha_bar[t]
        return -np.sqrt(1.0 - ab)[..., None] * self.score(x, t)

    def sample_marginal(self, t, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` points from the time-``t`` marginal (``t`` scalar or per row)."""
        x0 = self.mean + math.sqrt(self.sigma2) * rng.standard_normal((n, self.dim))
        t = np.broadcast_to(np.asarray(t), (n,))
        return forward_noise(x0, t, rng.standard_normal((n, self.dim)), self.schedule)


def _check_pair(m1, m2):
    if not m1.schedule.same_as(m2.schedule):
        raise ContractError("Gaussian models use different noise schedules")
    if m1.dim != m2.dim:
        raise ShapeError(f"Gaussian models have dimensions {m1.dim} and {m2.dim}")


def gaussian_score_difference(m1: AnalyticGaussianModel, m2: AnalyticGaussianModel, x, t) -> np.ndarray:
    """``score_2(x, t) - score_1(x, t)`` in closed form."""
    _check_pair(m1, m2)
    return m2.score(x, t) - m1.score(x, t)


def gaussian_mean_difference(m1: AnalyticGaussianModel, m2: AnalyticGaussianModel, x, t) -> np.ndarray:
    """Difference of the reverse-step means, ``beta_t / sqrt(alpha_t)`` times the score difference."""
    _check_pair(m1, m2)
    t = np.asarray(t)
    sched = m1.schedule
    coef = sched.beta[t - 1] / np.sqrt(sched.alpha[t - 1])
    return np.asarray(coef)[..., None] * gaussian_score_difference(m1, m2, x, t)


def guided_gaussian_mean(model: AnalyticGaussianModel, direction, omega: float, t_stopgrad: int = 0,
                         scale_by_variance: bool = True) -> np.ndarray:
    """Exact mean of unclipped guided samples under the linear reward ``direction . x``.

    For a Gaussian model the reverse mean is affine, ``A_t x + b_t``, and a
    linear reward adds the constant ``w_t c``, so the sample mean follows
    ``m_{t-1} = A_t m_t + b_t + w_t c`` from ``m_T = 0``.
    """
    c = np.asarray(direction, dtype=np.float64)
    sched = model.schedule
    m = np.zeros(model.dim)
    for t in range(sched.T, 0, -1):
        ab = sched.alpha_bar[t]
        b = sched.beta[t - 1]
        a = sched.alpha[t - 1]
        v = ab * model.sigma2 + 1.0 - ab
        m = ((1.0 - b / v) * m + b * math.sqrt(ab) * model.mean / v) / math.sqrt(a)
        if omega != 0 and t > t_stopgrad:
            m = m + omega * (b if scale_by_variance else 1.0) * c
    return m


# ------------------------------------------------------------------- SDEs

@dataclass
class DriftField:
    """Drift ``f(x, t)``; ``lipschitz`` is documentation only."""

    fn: Callable[[np.ndarray, float], np.ndarray]
    lipschitz: float | None = None

    def __call__(self, x, t):
        return self.fn(x, t)


def euler_maruyama(drift, g, x0, dt: float, n_steps: int, noise) -> np.ndarray:
    """Integrate ``dx = f(x, t) dt + g(t) dW`` with the given Brownian increments.

    ``noise`` has shape ``(n_steps,) + x0.shape`` and should be drawn as
    ``N(0, dt)``.  Returns the path, shape ``(n_steps + 1,) + x0.shape``.
    """
    if not dt > 0:
        raise ContractError("dt must be positive")
    x = np.array(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (n_steps,) + x.shape:
        raise ShapeError(f"noise shape {noise.shape}, expected {(n_steps,) + x.shape}")
    path = np.empty((n_steps + 1,) + x.shape)
    path[0] = x
    for k in range(n_steps):
        t = k * dt
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + drift(x, t) * dt + g(t) * noise[k]
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"state left the finite range at step {k + 1}", step=k + 1)
        path[k + 1] = x
    return path


def brownian_increments(rng: np.random.Generator, dt: float, n_steps: int, shape=()) -> np.ndarray:
    return math.sqrt(dt) * rng.standard_normal((n_steps,) + tuple(shape))


def coarsen_increments(noise: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive increments so a coarse path shares the fine path's noise."""
    n = noise.shape[0] // factor
    return noise[: n * factor].reshape((n, factor) + noise.shape[1:]).sum(axis=1)


def theorem1_deviation(f1, f2, g, x0, dt: float, n_steps: int, seed, h=None) -> np.ndarray:
    """Per-step L-inf gap between ``dx = (f1 + h) dt + g dW`` and ``dx = f2 dt + g dW``.

    Both paths share one set of increments.  ``h`` defaults to ``f2 - f1``.
    """
    if h is None:
        h = lambda x, t: f2(x, t) - f1(x, t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = brownian_increments(np.random.default_rng(seed), dt, n_steps, x0.shape)
    corrected = euler_maruyama(lambda x, t: f1(x, t) + h(x, t), g, x0, dt, n_steps, noise)
    target = euler_maruyama(f2, g, x0, dt, n_steps, noise)
    diff = np.abs(corrected - target).reshape(n_steps + 1, -1)
    return diff.max(axis=1)


def theorem1_check(f1, f2, g, x0, dt: float, n_steps: int, seed, h=None) -> float:
    """Largest deviation between the corrected base SDE and the expert SDE."""
    return float(theorem1_deviation(f1, f2, g, x0, dt, n_steps, seed, h).max())


# ------------------------------------------------------------- projection

@dataclass
class PotentialGrid:
    """Scalar potential on a regular grid; ``values[iy, ix]``."""

    values: np.ndarray
    spacing: tuple

    def gradient(self) -> np.ndarray:
        """Discrete gradient as a ``(ny, nx, 2)`` field of ``(d/dx, d/dy)``."""
        ny, nx = self.values.shape
        D = gradient_operator(ny, nx, self.spacing)
        return _unstack(D @ self.values.ravel(), ny, nx)


def _diff_matrix(n: int, h: float) -> sp.csr_matrix:
    """1-D derivative: central inside, second-order one-sided at the ends."""
    if n == 2:
        return sp.csr_matrix(np.array([[-1.0, 1.0], [-1.0, 1.0]]) / h)
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h, 1.5 / h, -2.0 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def gradient_operator(ny: int, nx: int, spacing) -> sp.csr_matrix:
    """Sparse map from node values (row-major) to stacked ``[d/dx; d/dy]``."""
    if ny < 2 or nx < 2:
        raise ContractError(f"grid of {ny}x{nx} nodes is too small for a gradient")
    hx, hy = _spacing(spacing)
    dx = sp.kron(sp.identity(ny), _diff_matrix(nx, hx))
    dy = sp.kron(_diff_matrix(ny, hy), sp.identity(nx))
    return sp.vstack([dx, dy]).tocsr()


def _spacing(spacing):
    hx, hy = (spacing, spacing) if np.isscalar(spacing) else spacing
    if not (hx > 0 and hy > 0):
        raise ContractError("grid spacing must be positive")
    return float(hx), float(hy)


def _unstack(v, ny, nx):
    n = ny * nx
    return np.stack([v[:n].reshape(ny, nx), v[n:].reshape(ny, nx)], axis=-1)


def conjugate_gradient(A, b, tol: float = 1e-10, max_iter: int | None = None):
    """Plain CG for a symmetric positive-definite ``A``.

    Stops when ``|r| <= tol * |b|``.  Returns ``(x, iterations, residual)``.
    """
    x = np.zeros_like(b)
    r = b - A @ x
    p = r.copy()
    rr = r @ r
    stop = tol * max(np.linalg.norm(b), 1e-300)
    max_iter = max_iter or 10 * b.size
    k = 0
    while math.sqrt(rr) > stop and k < max_iter:
        Ap = A @ p
        step = rr / (p @ Ap)
        x += step * p
        r -= step * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
    return x, k, math.sqrt(rr)


def grid_conservative_projection(field, spacing=1.0, tol: float = 1e-12) -> PotentialGrid:
    """Least-squares potential whose discrete gradient best matches ``field``.

    ``field`` has shape ``(ny, nx, 2)`` holding ``(F_x, F_y)`` at each node.
    Solves the normal equations with node (0, 0) pinned to zero, using
    conjugate gradients to relative residual ``tol`` or ``10 * nodes``
    iterations.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != 2:
        raise ShapeError(f"field must have shape (ny, nx, 2), got {field.shape}")
    ny, nx = field.shape[:2]
    D = gradient_operator(ny, nx, spacing)
    rhs_vec = np.concatenate([field[..., 0].ravel(), field[..., 1].ravel()])
    Dr = D[:, 1:]
    normal = (Dr.T @ Dr).tocsr()
    phi, _, _ = conjugate_gradient(normal, Dr.T @ rhs_vec, tol=tol, max_iter=10 * ny * nx)
    values = np.concatenate([[0.0], phi]).reshape(ny, nx)
    return PotentialGrid(values, _spacing(spacing))


def rms(a) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


# ------------------------------------------------------- path independence

def loop_integral(field, loop, n_samples: int) -> float:
    """Trapezoid-rule circulation of ``field`` around a closed polyline.

    Every edge is split into ``n_samples`` equal pieces.  ``field`` maps an
    ``(m, n)`` batch of points to an ``(m, n)`` batch of vectors.
    """
    loop = np.asarray(loop, dtype=np.float64)
    if loop.ndim != 2 or loop.shape[0] < 3:
        raise ShapeError("a loop needs at least three points")
    if not np.array_equal(loop[0], loop[-1]):
        raise ContractError("loop is not closed: first and last points differ")
    if n_samples < 1:
        raise ContractError("need at least one sample interval per edge")
    s = np.linspace(0.0, 1.0, n_samples + 1)
    w = np.full(n_samples + 1, 1.0 / n_samples)
    w[[0, -1]] *= 0.5
    total = 0.0
    for a, b in zip(loop[:-1], loop[1:]):
        pts = a + s[:, None] * (b - a)
        vals = np.asarray(field(pts), dtype=np.float64)
        total += float(w @ (vals @ (b - a)))
    return total


def path_independence_check(gradient_field, loops: Sequence, n_samples: int = 1000) -> float:
    """Largest absolute circulation over ``loops``; near zero for gradient fields."""
    return max(abs(loop_integral(gradient_field, lp, n_samples)) for lp in loops)


# ------------------------------------------------------------- the suite

# |x| + |y| = 1; the cubic field below circulates exactly 2 around it
DIAMOND = np.array([[1, 0], [0, 1], [-1, 0], [0, -1], [1, 0]], dtype=float)


def cubic_rotation(p):
    return np.stack([-p[:, 1] ** 3, p[:, 0] ** 3], axis=1)


def oracle_record(oracle: str, metric: str, value: float, tolerance: float, passed: bool) -> dict:
    return {"oracle": oracle, "metric": metric, "value": float(value),
            "tolerance": float(tolerance), "pass": bool(passed)}


def _grid(n=64):
    xs = np.linspace(-1.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs)
    return X, Y, xs[1] - xs[0]


def run_oracle_suite(seed: int = 0) -> list[dict]:
    """Fast numerical checks of the SDE and projection machinery."""
    out = []
    rng = np.random.default_rng(seed)

    f1 = DriftField(lambda x, t: -x, 1.0)
    f2 = DriftField(lambda x, t: -x + 1.0, 1.0)
    g = lambda t: 1.0
    dev = theorem1_check(f1, f2, g, np.zeros(2), 0.01, 100, seed)
    out.append(oracle_record("drift_correction", "max_deviation_corrected", dev, 1e-12, dev <= 1e-12))
    dev0 = theorem1_check(f1, f2, g, np.zeros(2), 0.01, 100, seed, h=lambda x, t: 0.0 * x)
    out.append(oracle_record("drift_correction", "max_deviation_uncorrected", dev0, 0.1, dev0 > 0.1))

    X, Y, h = _grid()
    pot = np.stack([2 * X, np.ones_like(Y)], axis=-1)
    err = rms(grid_conservative_projection(pot, h).gradient() - pot)
    out.append(oracle_record("projection", "potential_recovery_rms", err, 1e-8, err <= 1e-8))
    decay = np.exp(-8.0 * (X ** 2 + Y ** 2))
    vortex = np.stack([-Y * decay, X * decay], axis=-1)
    ratio = rms(grid_conservative_projection(vortex, h).gradient()) / rms(vortex)
    out.append(oracle_record("projection", "vortex_residual_ratio", ratio, 0.01, ratio <= 0.01))
    mixed = pot + vortex
    once = grid_conservative_projection(mixed, h).gradient()
    twice = grid_conservative_projection(once, h).gradient()
    idem = rms(twice - once)
    out.append(oracle_record("projection", "idempotence_rms", idem, 1e-10, idem <= 1e-10))

    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    circ = loop_integral(lambda p: np.stack([-p[:, 1], p[:, 0]], axis=1), square, 1000)
    out.append(oracle_record("path_independence", "rotational_circulation_error", abs(circ - 2.0),
                             0.02, abs(circ - 2.0) <= 0.02))
    # trapezoid is exact for the linear field; a cubic one shows the h^2 rate
    coarse, fine = (abs(loop_integral(cubic_rotation, DIAMOND, n) - 2.0) for n in (50, 100))
    out.append(oracle_record("path_independence", "trapezoid_refinement_ratio", coarse / fine,
                             4.0, abs(coarse / fine - 4.0) <= 0.4))
    quad = lambda p: np.stack([2 * p[:, 0] * p[:, 1], p[:, 0] ** 2 + 3 * p[:, 1] ** 2], axis=1)
    circ = path_independence_check(quad, [square], 1000)
    out.append(oracle_record("path_independence", "gradient_circulation", circ, 1e-3, circ <= 1e-3))

    sched = cosine_schedule(100)
    x0 = np.full((100_000, 1), 0.5)
    for t in (25, 50, 100):
        x = x0.copy()
        for s in range(1, t + 1):
            x = forward_step(x, s, rng.standard_normal(x.shape), sched)
        direct = forward_noise(x0, t, rng.standard_normal(x0.shape), sched)
        gap = abs(x.var() - direct.var()) / direct.var()
        out.append(oracle_record("forward_process", f"variance_gap_t{t}", gap, 0.02, gap <= 0.02))
    return out


def format_records(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
