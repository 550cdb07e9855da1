"""Dense MLP kernel with hand-written backward pass, AdamW, and a
finite-difference gradient checker.

Matrices are plain ``float64`` numpy arrays laid out row-major, one sample
per row. Layer weights are stored ``(fan_in, fan_out)`` so a layer computes
``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")

ParamDict = Dict[str, np.ndarray]


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )


@dataclass
class MlpParams:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [layer.weight.shape[1] for layer in self.layers]

    def named_arrays(self, prefix: str) -> ParamDict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
) -> MlpParams:
    """Glorot-uniform weights and zero biases for a chain of dense layers."""
    if len(sizes) < 2:
        raise ContractError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    return x


def _activation_grad(pre: np.ndarray, post: np.ndarray, grad: np.ndarray, kind: str):
    if kind == "relu":
        return grad * (pre > 0.0)
    if kind == "tanh":
        return grad * (1.0 - post * post)
    return grad


@dataclass
class MlpCache:
    """Activation record of one forward call."""

    params: MlpParams
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)
    shapes: List[Tuple[int, int]] = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match MLP input dim {params.in_dim}")
    cache = MlpCache(params)
    h = x
    for layer in params.layers:
        cache.inputs.append(h)
        cache.shapes.append(layer.weight.shape)
        pre = h @ layer.weight
        pre += layer.bias
        h = _activate(pre, layer.activation)
        cache.pre.append(pre)
        cache.outputs.append(h)
    return h, cache


def mlp_backward(
    params: MlpParams, cache: MlpCache, output_grad: np.ndarray
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse pass; returns ``([(dW, db) per layer], d_input)``."""
    if cache.params is not params or cache.shapes != [l.weight.shape for l in params.layers]:
        raise ContractError("cache was produced by a different MLP")
    out = cache.outputs[-1]
    if output_grad.shape != out.shape:
        raise ShapeError(f"output grad {output_grad.shape} != output {out.shape}")
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    g = output_grad
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        g = _activation_grad(cache.pre[i], cache.outputs[i], g, layer.activation)
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return grads, g


def mlp_grad_dict(prefix: str, grads: List[Tuple[np.ndarray, np.ndarray]]) -> ParamDict:
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"{prefix}.{i}.weight"] = dw
        out[f"{prefix}.{i}.bias"] = db
    return out


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("betas must lie in [0, 1)")


def init_opt_state(params: ParamDict, **hyper) -> OptState:
    state = OptState(**hyper)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adamw_step(params: ParamDict, grads: ParamDict, state: OptState):
    """One AdamW update, in place. Weight decay is decoupled: it is added to
    the step, never folded into the moment estimates."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad {g.shape} != param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            step += state.weight_decay * p
        p -= state.lr * step
    return params, state


def finite_diff_report(
    loss_fn: Callable[[], Tuple[float, ParamDict]],
    params: ParamDict,
    step: float = 1e-5,
) -> Dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference
    gradients. ``loss_fn`` closes over ``params``; entries are perturbed in
    place and restored."""
    _, analytic = loss_fn()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    report = {}
    for name, p in params.items():
        if name not in analytic:
            continue
        flat = p.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_fn()
            flat[i] = orig - step
            down, _ = loss_fn()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = ana[i]
            if not (math.isfinite(num) and math.isfinite(a)):
                worst = math.inf
                continue
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(
    loss_fn: Callable[[], Tuple[float, ParamDict]],
    params: ParamDict,
    step: float = 1e-5,
) -> float:
    report = finite_diff_report(loss_fn, params, step)
    return max(report.values(), default=0.0)
