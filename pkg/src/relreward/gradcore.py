"""Small numpy MLP core with analytic input-gradients.

The networks here need two kinds of derivative:

* the gradient of a scalar output with respect to the *input* (used as the
  reward gradient field and for classifier guidance), and
* parameter gradients of losses that contain that input-gradient.

The input-gradient is computed as an explicit forward sweep of chain-rule
products, and parameter gradients are obtained by a single reverse pass over
both the ordinary forward graph and that sweep.  This covers exactly the
mixed second derivative the reward objective needs, without a general
nested-autodiff engine.

Batch convention: inputs are ``(B, d)`` row batches; a 1-D input is treated
as a single row and the result is squeezed back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import math

import numpy as np

from .errors import ContractError, ShapeError, TrainingError


def _tanh(z):
    return np.tanh(z)


def _tanh_d1(z, a):
    return 1.0 - a * a


def _tanh_d2(z, a):
    return -2.0 * a * (1.0 - a * a)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus_d1(z, a):
    return _sigmoid(z)


def _softplus_d2(z, a):
    s = _sigmoid(z)
    return s * (1.0 - s)


def _gelu(z):
    from scipy.special import erf

    return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))


def _gelu_d1(z, a):
    from scipy.special import erf

    return 0.5 * (1.0 + erf(z / np.sqrt(2.0))) + z * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _gelu_d2(z, a):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi) * (2.0 - z * z)


# name -> (f(z), f'(z, f(z)), f''(z, f(z)))
ACTIVATIONS: dict[str, tuple[Callable, Callable, Callable]] = {
    "tanh": (_tanh, _tanh_d1, _tanh_d2),
    "softplus": (_softplus, _softplus_d1, _softplus_d2),
    "gelu": (_gelu, _gelu_d1, _gelu_d2),
}


@dataclass
class MLPParams:
    """Weights ``(out, in)`` and biases ``(out,)`` of a fully connected net.

    Hidden layers use ``activation``; the last layer is affine.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(
                f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}"
            )
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} "
                    f"produces {self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)

    def zeros_like(self) -> "MLPParams":
        return MLPParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activation)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "MLPParams":
        new = self.zeros_like()
        pos = 0
        for a in new.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        return new


def init_mlp(sizes: Sequence[int], activation: str = "tanh", seed=None) -> MLPParams:
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists layer widths from input to output, e.g. ``[15, 64, 64, 1]``.
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ShapeError(f"invalid layer sizes {list(sizes)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, activation)


def _as_batch(params: MLPParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input_dim={params.input_dim}")
    return x, single


class _Cache(NamedTuple):
    pre: list        # Z_l, pre-activations of every layer
    post: list       # A_l, A_0 = input, A_l = act(Z_l) for hidden layers


def _forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    act = ACTIVATIONS[params.activation][0]
    a = x
    pre, post = [], [x]
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre.append(z)
        if i < last:
            a = act(z)
            post.append(a)
    return pre[-1], _Cache(pre, post)


def _input_grad_sweep(params: MLPParams, cache: _Cache):
    """Chain-rule sweep for d(output)/d(input) of a scalar head.

    Returns ``G_0`` plus the intermediates ``G_l`` (cotangent of ``A_l``) and
    ``D_l = G_l * act'(Z_l)`` needed for the reverse pass.
    """
    d1 = ACTIVATIONS[params.activation][1]
    n_layers = params.n_layers
    batch = cache.post[0].shape[0]
    g = np.broadcast_to(params.weights[-1][0], (batch, params.weights[-1].shape[1]))
    gs = {n_layers - 1: g}
    ds = {}
    for layer in range(n_layers - 1, 0, -1):
        # layer indexes the hidden activation A_layer = act(Z_{layer-1})
        z = cache.pre[layer - 1]
        dphi = d1(z, cache.post[layer])
        d = gs[layer] * dphi
        ds[layer] = (d, dphi)
        gs[layer - 1] = d @ params.weights[layer - 1]
    return gs[0], gs, ds


def mlp_forward(params: MLPParams, x) -> np.ndarray:
    """Network output for one input ``(d,)`` or a batch ``(B, d)``."""
    xb, single = _as_batch(params, x)
    out, _ = _forward(params, xb)
    return out[0] if single else out


def mlp_input_gradient(params: MLPParams, x) -> np.ndarray:
    """Gradient of the scalar output with respect to the input."""
    if params.output_dim != 1:
        raise ContractError(f"input gradient needs a scalar head, got output_dim={params.output_dim}")
    xb, single = _as_batch(params, x)
    _, cache = _forward(params, xb)
    g0, _, _ = _input_grad_sweep(params, cache)
    g0 = np.array(g0)
    return g0[0] if single else g0


def mlp_value_and_input_gradient(params: MLPParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Output and input-gradient from one shared forward pass (batch only)."""
    if params.output_dim != 1:
        raise ContractError(f"input gradient needs a scalar head, got output_dim={params.output_dim}")
    xb, _ = _as_batch(params, x)
    out, cache = _forward(params, xb)
    g0, _, _ = _input_grad_sweep(params, cache)
    return out[:, 0], np.array(g0)


class LossTerms(NamedTuple):
    """What a loss reports back: its value and cotangents of its inputs.

    ``d_output`` is dL/d(network output) with the output's shape and
    ``d_input_grad`` is dL/d(input-gradient) with the input's shape; either
    may be ``None`` when the loss does not depend on that quantity.
    """

    value: float
    d_output: np.ndarray | None = None
    d_input_grad: np.ndarray | None = None


@dataclass
class SquaredError:
    """``scale * sum((q - target)**2) / B`` on the output or the input-gradient.

    ``mask`` (broadcastable to the compared quantity) zeroes columns that must
    not enter the loss, e.g. time-embedding inputs.
    """

    target: np.ndarray
    on: str = "input_grad"
    scale: float = 1.0
    mask: np.ndarray | None = None

    @property
    def uses_output(self) -> bool:
        return self.on == "output"

    @property
    def uses_input_grad(self) -> bool:
        return self.on == "input_grad"

    def __call__(self, output, input_grad) -> LossTerms:
        q = output if self.on == "output" else input_grad
        diff = q - self.target
        if self.mask is not None:
            diff = diff * self.mask
        batch = q.shape[0]
        value = self.scale * float(np.sum(diff * diff)) / batch
        cot = 2.0 * self.scale * diff / batch
        if self.on == "output":
            return LossTerms(value, d_output=cot)
        return LossTerms(value, d_input_grad=cot)


def loss_param_gradient(params: MLPParams, x, loss) -> tuple[float, MLPParams]:
    """Value and parameter gradient of ``loss`` evaluated on a batch ``x``.

    ``loss`` is an object with boolean attributes ``uses_output`` /
    ``uses_input_grad`` that, called as ``loss(output, input_grad)``, returns
    :class:`LossTerms`.  The input-gradient term is differentiated through
    the chain-rule sweep, which yields the mixed derivative d/dθ (∇ₓ f).
    """
    if not (hasattr(loss, "uses_output") and hasattr(loss, "uses_input_grad") and callable(loss)):
        raise ContractError(f"unsupported loss object {type(loss).__name__}")
    if not (loss.uses_output or loss.uses_input_grad):
        raise ContractError("loss depends on neither the output nor the input-gradient")
    xb, _ = _as_batch(params, x)
    out, cache = _forward(params, xb)
    g0 = gs = ds = None
    if loss.uses_input_grad:
        if params.output_dim != 1:
            raise ContractError("input-gradient losses need a scalar head")
        g0, gs, ds = _input_grad_sweep(params, cache)
    terms = loss(out, g0)
    if not isinstance(terms, LossTerms):
        raise ContractError("loss must return LossTerms")
    value = float(terms.value)
    grads = _backward(params, cache, gs, ds, terms.d_output, terms.d_input_grad)
    return value, grads


def _backward(params, cache, gs, ds, d_out, d_g0) -> MLPParams:
    """Reverse pass over the forward graph and, if present, the gradient sweep."""
    n_layers = params.n_layers
    _, d1, d2 = ACTIVATIONS[params.activation]
    grads = params.zeros_like()
    batch = cache.post[0].shape[0]
    # extra cotangents flowing into pre-activations Z_l from the sweep
    z_extra: dict[int, np.ndarray] = {}
    if d_g0 is not None:
        d_g0 = np.asarray(d_g0, dtype=np.float64)
        if d_g0.shape != cache.post[0].shape:
            raise ContractError(f"input-gradient cotangent has shape {d_g0.shape}, "
                                f"expected {cache.post[0].shape}")
        g_bar = d_g0
        for layer in range(1, n_layers):
            d, dphi = ds[layer]
            w = params.weights[layer - 1]
            # G_{layer-1} = D_layer @ W
            grads.weights[layer - 1] += d.T @ g_bar
            d_bar = g_bar @ w.T
            # D_layer = G_layer * act'(Z)
            z = cache.pre[layer - 1]
            z_extra[layer - 1] = d_bar * gs[layer] * d2(z, cache.post[layer])
            g_bar = d_bar * dphi
        # G_{L-1} = broadcast of the head weight row
        grads.weights[-1][0] += g_bar.sum(axis=0)
    if d_out is not None:
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.shape != cache.pre[-1].shape:
            raise ContractError(f"output cotangent has shape {d_out.shape}, "
                                f"expected {cache.pre[-1].shape}")
        z_bar = d_out
    else:
        z_bar = np.zeros((batch, params.output_dim))
    for layer in range(n_layers - 1, -1, -1):
        if layer in z_extra:
            z_bar = z_bar + z_extra[layer]
        grads.weights[layer] += z_bar.T @ cache.post[layer]
        grads.biases[layer] += z_bar.sum(axis=0)
        if layer == 0:
            break
        a_bar = z_bar @ params.weights[layer]
        z_bar = a_bar * d1(cache.pre[layer - 1], cache.post[layer])
    return grads


@dataclass
class OptState:
    """Adam moment accumulators for one parameter set."""

    m: MLPParams
    v: MLPParams
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(params: MLPParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptState:
    return OptState(params.zeros_like(), params.zeros_like(), lr, beta1, beta2, eps)


def adam_step(state: OptState, params: MLPParams, grads: MLPParams) -> tuple[OptState, MLPParams]:
    """One bias-corrected Adam update; returns fresh state and parameters."""
    garrs = grads.arrays()
    parrs = params.arrays()
    if len(garrs) != len(parrs) or any(g.shape != p.shape for g, p in zip(garrs, parrs)):
        raise ShapeError("gradient shapes do not match parameter shapes")
    for i, g in enumerate(garrs):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {i // 2}", layer=i // 2)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = state.m.zeros_like(), state.v.zeros_like(), params.zeros_like()
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for g, m, v, p, nm, nv, np_ in zip(garrs, state.m.arrays(), state.v.arrays(), parrs,
                                       new_m.arrays(), new_v.arrays(), new_p.arrays()):
        nm[...] = b1 * m + (1.0 - b1) * g
        nv[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = nm / c1
        v_hat = nv / c2
        np_[...] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptState(new_m, new_v, state.lr, b1, b2, state.eps, t)
    return new_state, new_p


def cosine_decay(base_lr: float, step: int, total: int, floor: float = 0.0) -> float:
    """Learning rate at 1-based ``step`` of ``total`` on a half-cosine from ``base_lr`` to ``floor * base_lr``."""
    frac = min(max(step - 1, 0) / max(total, 1), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
