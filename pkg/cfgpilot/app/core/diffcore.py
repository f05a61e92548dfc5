"""Dense feedforward networks with exact reverse-mode gradients and an Adam optimizer."""

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")

_net_ids = itertools.count()


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"layer shapes disagree: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """Ordered stack of affine + activation layers."""

    def __init__(self, layers: List[DenseLayer]):
        if not layers:
            raise ValueError("DenseNet needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer {i} outputs {a.fan_out} but layer {i + 1} expects {b.fan_in}")
        self.layers = layers
        self.uid = next(_net_ids)
        self.version = 0

    @classmethod
    def create(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
    ) -> "DenseNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {list(widths)}")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            bound = 1.0 / np.sqrt(n_in)
            activation = output_activation if i == len(widths) - 2 else hidden_activation
            layers.append(DenseLayer(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation))
        return cls(layers)

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"{i}.weight"] = layer.weight
            params[f"{i}.bias"] = layer.bias
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias"):
                value = np.asarray(params[f"{i}.{name}"], dtype=np.float64)
                if value.shape != getattr(layer, name).shape:
                    raise ValueError(f"block {i}.{name}: shape {value.shape} != {getattr(layer, name).shape}")
                if not np.all(np.isfinite(value)):
                    raise FloatingPointError(f"block {i}.{name} contains non-finite values")
                setattr(layer, name, value.copy())
        self.version += 1

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "DenseNet":
        return DenseNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


@dataclass
class GradientTape:
    """Activations recorded by one forward pass."""
    net_uid: int
    net_version: int
    batched: bool
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)


def forward(net: DenseNet, x) -> Tuple[np.ndarray, GradientTape]:
    """Evaluate ``net`` on one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match network input width {net.input_dim}")
    h = x if batched else x[None, :]
    tape = GradientTape(net.uid, net.version, batched)
    for layer in net.layers:
        tape.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _activate(z, layer.activation)
        tape.pre_activations.append(z)
        tape.outputs.append(h)
    return (h if batched else h[0]), tape


def backward(net: DenseNet, tape: GradientTape, upstream) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients of <upstream, output> w.r.t. every weight and bias, summed over batch rows.

    Also returns the gradient w.r.t. the network input (per row).
    """
    if tape.net_uid != net.uid or tape.net_version != net.version or len(tape.inputs) != len(net.layers):
        raise ValueError("gradient tape does not belong to the current parameters of this network")
    g = np.asarray(upstream, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"upstream shape {g.shape} does not match output shape {tape.outputs[-1].shape}")

    grads: Dict[str, np.ndarray] = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_grad(tape.pre_activations[i], tape.outputs[i], layer.activation)
        grads[f"{i}.weight"] = dz.T @ tape.inputs[i]
        grads[f"{i}.bias"] = dz.sum(axis=0)
        g = dz @ layer.weight
    return grads, (g if tape.batched else g[0])


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value, dtype=np.float64)
            state.v[name] = np.zeros_like(value, dtype=np.float64)
        return state


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced in place."""
    for name, grad in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter block {name!r}")
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        updated[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the original norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def cosine_lr(lr: float, lr_min: float, epoch: int, epochs: int) -> float:
    """Cosine decay from ``lr`` at epoch 0 to ``lr_min`` at the last epoch."""
    if epochs <= 1:
        return lr
    progress = min(max(epoch, 0), epochs - 1) / (epochs - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + float(np.cos(np.pi * progress)))
