"""Small explicit-gradient numerical core.

Dense ReLU MLPs with hand-written backward passes, Adam, the step learning
rate schedule, and the two fixed input encodings (sinusoidal positional
encoding for positions, real spherical harmonics for view directions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError


@dataclass
class ParamTensor:
    """A learnable array with a gradient accumulator.

    Values are kept in the compute dtype (float32 for training); gradients
    are always accumulated in float64.
    """

    name: str
    values: np.ndarray
    grads: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grads = np.zeros(self.values.shape, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grads.fill(0.0)


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    output_width: int
    hidden_width: int = 128
    hidden_layers: int = 1
    output_activation: Literal["none", "sigmoid"] = "none"

    def __post_init__(self) -> None:
        if min(self.input_width, self.output_width, self.hidden_width) < 1:
            raise ConfigError(f"MLP widths must be positive: {self}")
        if self.hidden_layers < 0:
            raise ConfigError("hidden_layers must be >= 0")
        if self.output_activation not in ("none", "sigmoid"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_widths(self) -> list[int]:
        return [self.input_width] + [self.hidden_width] * self.hidden_layers + [self.output_width]

    def param_count(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32, prefix: str = "mlp") -> list[ParamTensor]:
    """Weights uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    Returned as ``[W0, b0, W1, b1, ...]`` with ``W`` shaped ``(fan_in, fan_out)``.
    """
    params = []
    widths = spec.layer_widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        s = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)
        params.append(ParamTensor(f"{prefix}.W{i}", w))
        params.append(ParamTensor(f"{prefix}.b{i}", np.zeros(fan_out, dtype=dtype)))
    return params


def _check_params(spec: MlpSpec, params: Sequence[ParamTensor]) -> None:
    widths = spec.layer_widths
    if len(params) != 2 * (len(widths) - 1):
        raise ConfigError(f"expected {2 * (len(widths) - 1)} parameter blocks, got {len(params)}")
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if params[2 * i].shape != (a, b) or params[2 * i + 1].shape != (b,):
            raise ConfigError(
                f"layer {i} parameter shapes {params[2 * i].shape}/{params[2 * i + 1].shape} "
                f"do not match spec widths ({a}, {b})"
            )


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpCache:
    """Activations saved by :func:`mlp_forward` for the backward pass."""

    inputs: list[np.ndarray]
    output: np.ndarray


def mlp_forward(spec: MlpSpec, params: Sequence[ParamTensor], x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the MLP on a batch ``x`` of shape ``(n, input_width)``.

    A 1-D input is treated as a batch of one and a 1-D output is returned.
    """
    _check_params(spec, params)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[-1] != spec.input_width:
        raise ConfigError(f"MLP input width {h.shape[-1]} != spec.input_width {spec.input_width}")
    inputs = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        inputs.append(h)
        h = h @ params[2 * i].values + params[2 * i + 1].values
        if i < n_layers - 1:
            h = np.maximum(h, 0)
    if spec.output_activation == "sigmoid":
        h = sigmoid(h)
    cache = MlpCache(inputs=inputs, output=h)
    return (h[0] if squeeze else h), cache


def mlp_backward(
    spec: MlpSpec,
    params: Sequence[ParamTensor],
    cache: MlpCache | None,
    upstream: np.ndarray,
) -> np.ndarray:
    """Backpropagate ``upstream`` (d loss / d output) through the MLP.

    Parameter gradients are added to ``params[*].grads``; the gradient with
    respect to the MLP input is returned.
    """
    if cache is None:
        raise ValueError("mlp_backward needs the cache returned by mlp_forward")
    _check_params(spec, params)
    squeeze = upstream.ndim == 1
    g = np.atleast_2d(upstream)
    if spec.output_activation == "sigmoid":
        y = cache.output
        g = g * (y * (1 - y))
    n_layers = len(params) // 2
    for i in reversed(range(n_layers)):
        a = cache.inputs[i]
        W, b = params[2 * i], params[2 * i + 1]
        W.grads += a.T @ g
        b.grads += g.sum(axis=0, dtype=np.float64)
        g = g @ W.values.T
        if i > 0:
            # inputs[i] is the post-ReLU activation of layer i-1
            g = g * (a > 0)
    return g[0] if squeeze else g


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over ``params``; gradients are zeroed after.

    ``params`` may hold any objects exposing ``name``, ``values`` and ``grads``
    (MLP tensors and binary grid latents alike).
    """
    for p in params:
        if not np.all(np.isfinite(p.grads)):
            raise FloatingPointError(f"non-finite gradient in parameter block {p.name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.values.shape, dtype=np.float64)
            state.v[p.name] = np.zeros(p.values.shape, dtype=np.float64)
        v = state.v[p.name]
        g = p.grads
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        np.subtract(p.values, update, out=p.values, casting="unsafe")
        p.grads.fill(0.0)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.01
    warmup_iters: int = 1000
    decay_points: tuple[int, ...] = (15000, 18000)
    decay_factor: float = 0.33


def lr_at(schedule: LrSchedule, it: int) -> float:
    """Linear warmup to ``base_lr``, then a step decay at each decay point."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    k = sum(1 for d in schedule.decay_points if it >= d)
    lr = schedule.base_lr * schedule.decay_factor**k
    if it < schedule.warmup_iters:
        lr *= (it + 1) / schedule.warmup_iters
    return lr


def positional_encode(x: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < n_freqs; width ``3 + 6 n_freqs``."""
    x = np.asarray(x)
    parts = [x]
    for k in range(n_freqs):
        arg = (2.0**k * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def pe_width(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


SH_WIDTH = 16


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of degree 0..3 (16 values) of direction ``d``.

    Directions are normalized first, so the output depends only on the
    direction.
    """
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xy, xz, yz = x * y, x * z, y * z
    x2, y2, z2 = x * x, y * y, z * z
    out = [
        np.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * xy,
        -1.0925484305920792 * yz,
        0.94617469575755997 * z2 - 0.31539156525251999,
        -1.0925484305920792 * xz,
        0.54627421529603959 * x2 - 0.54627421529603959 * y2,
        0.59004358992664352 * y * (-3.0 * x2 + y2),
        2.8906114426405538 * xy * z,
        0.45704579946446572 * y * (1.0 - 5.0 * z2),
        0.3731763325901154 * z * (5.0 * z2 - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * z2),
        1.4453057213202769 * z * (x2 - y2),
        0.59004358992664352 * x * (-x2 + 3.0 * y2),
    ]
    return np.stack(out, axis=-1)
