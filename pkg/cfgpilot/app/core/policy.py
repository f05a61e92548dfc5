"""Gaussian actors over the guidance adjustment and the classical critic."""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..models import ActorKind, ControllerConfig, VqcConfig
from . import diffcore
from .diffcore import DenseNet, GradientTape
from .qsim import N_FEATURES, VqcParams, encode_features, param_shift_grad, run_circuit

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
ACTION_LOW = -2.0
ACTION_HIGH = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianPolicyOut:
    """Mean and (clamped) log standard deviation; scalars or arrays over a batch."""
    mu: Union[float, np.ndarray]
    log_std: Union[float, np.ndarray]

    @property
    def std(self):
        return np.exp(self.log_std)


class HybridActor:
    """Circuit features followed by a small dense head producing (mu, log_std)."""

    kind = ActorKind.QUANTUM

    def __init__(self, vqc_config: VqcConfig, params: VqcParams, head: DenseNet):
        if head.input_dim != vqc_config.n_qubits:
            raise ValueError(f"head input width {head.input_dim} != n_qubits {vqc_config.n_qubits}")
        if head.output_dim != 2:
            raise ValueError(f"head must output (mu, log_std), got width {head.output_dim}")
        if params.angles.shape != (vqc_config.depth, vqc_config.n_qubits, 3):
            raise ValueError(f"circuit parameters have shape {params.angles.shape}")
        self.vqc_config = vqc_config
        self.params = params
        self.head = head

    @classmethod
    def create(cls, vqc_config: VqcConfig, head_hidden: int, rng: np.random.Generator) -> "HybridActor":
        params = VqcParams(rng.uniform(-0.1, 0.1, size=(vqc_config.depth, vqc_config.n_qubits, 3)))
        head = DenseNet.create([vqc_config.n_qubits, head_hidden, 2], rng)
        return cls(vqc_config, params, head)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {"vqc.angles": self.params.angles}
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        angles = np.asarray(params["vqc.angles"], dtype=np.float64)
        if angles.shape != self.params.angles.shape:
            raise ValueError(f"vqc.angles: shape {angles.shape} != {self.params.angles.shape}")
        self.params = VqcParams(angles.copy())
        self.head.set_parameters({k[len("head."):]: v for k, v in params.items() if k.startswith("head.")})

    def param_count(self) -> int:
        return self.params.count + self.head.param_count()


class ClassicalActor:
    """Dense network from the 6 state features straight to (mu, log_std)."""

    kind = ActorKind.CLASSICAL

    def __init__(self, net: DenseNet):
        if net.input_dim != N_FEATURES or net.output_dim != 2:
            raise ValueError(f"classical actor must map {N_FEATURES} -> 2, got {net.widths}")
        self.net = net

    @classmethod
    def create(cls, hidden: Sequence[int], rng: np.random.Generator) -> "ClassicalActor":
        return cls(DenseNet.create([N_FEATURES, *hidden, 2], rng))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.parameters().items()}

    def set_parameters(self, params: Dict[str, np.ndarray]):
        self.net.set_parameters({k[len("net."):]: v for k, v in params.items()})

    def param_count(self) -> int:
        return self.net.param_count()


class Critic:
    """State-value network V(s)."""

    def __init__(self, net: DenseNet):
        if net.input_dim != N_FEATURES or net.output_dim != 1:
            raise ValueError(f"critic must map {N_FEATURES} -> 1, got {net.widths}")
        self.net = net

    @classmethod
    def create(cls, hidden: Sequence[int], rng: np.random.Generator) -> "Critic":
        return cls(DenseNet.create([N_FEATURES, *hidden, 1], rng))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.parameters().items()}

    def set_parameters(self, params: Dict[str, np.ndarray]):
        self.net.set_parameters({k[len("net."):]: v for k, v in params.items()})

    def param_count(self) -> int:
        return self.net.param_count()


Actor = Union[HybridActor, ClassicalActor]


@dataclass
class ActorTape:
    """What actor_backward needs from one forward pass."""
    head_tape: GradientTape
    log_std_free: np.ndarray  # True where the log_std clamp was inactive
    encoding: Optional[np.ndarray] = None


def _check_state(state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != N_FEATURES:
        raise ValueError(f"state must have {N_FEATURES} features, got shape {state.shape}")
    if not np.all(np.isfinite(state)):
        raise ValueError("state contains non-finite values")
    return state


def actor_forward_with_tape(actor: Actor, state) -> Tuple[GaussianPolicyOut, ActorTape]:
    state = _check_state(state)
    encoding = None
    if isinstance(actor, HybridActor):
        encoding = encode_features(state, actor.vqc_config.n_qubits)
        features = run_circuit(actor.params, encoding)
        out, head_tape = diffcore.forward(actor.head, features)
    else:
        out, head_tape = diffcore.forward(actor.net, state)
    mu = out[..., 0]
    raw_log_std = out[..., 1]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    free = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    if out.ndim == 1:
        mu, log_std = float(mu), float(log_std)
    return GaussianPolicyOut(mu, log_std), ActorTape(head_tape, np.asarray(free), encoding)


def actor_forward(actor: Actor, state) -> GaussianPolicyOut:
    """Policy distribution for one state (6,) or a batch (B, 6)."""
    return actor_forward_with_tape(actor, state)[0]


def actor_backward(actor: Actor, tape: ActorTape, d_mu, d_log_std) -> Dict[str, np.ndarray]:
    """Chain rule from d/d(mu, log_std) into every actor parameter.

    The dense part uses reverse mode; circuit angles use the parameter-shift rule with the
    head's input gradient as upstream.
    """
    d_mu = np.asarray(d_mu, dtype=np.float64)
    d_log_std = np.asarray(d_log_std, dtype=np.float64) * tape.log_std_free
    if d_mu.shape != d_log_std.shape:
        raise ValueError(f"d_mu shape {d_mu.shape} != d_log_std shape {d_log_std.shape}")
    upstream = np.stack([d_mu, d_log_std], axis=-1)

    if isinstance(actor, HybridActor):
        head_grads, d_features = diffcore.backward(actor.head, tape.head_tape, upstream)
        vqc_grad = param_shift_grad(actor.params, tape.encoding, d_features)
        if vqc_grad.ndim > 3:
            vqc_grad = vqc_grad.reshape((-1,) + vqc_grad.shape[-3:]).sum(axis=0)
        grads = {"vqc.angles": vqc_grad}
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return grads

    net_grads, _ = diffcore.backward(actor.net, tape.head_tape, upstream)
    return {f"net.{k}": v for k, v in net_grads.items()}


def reparameterize(out: GaussianPolicyOut, noise):
    """Pre-clamp Gaussian sample mu + sigma * noise."""
    return out.mu + np.exp(out.log_std) * np.asarray(noise, dtype=np.float64)


def log_prob(out: GaussianPolicyOut, action):
    """Gaussian log-density of ``action``."""
    std = np.exp(out.log_std)
    return -HALF_LOG_2PI - out.log_std - (np.asarray(action) - out.mu) ** 2 / (2.0 * std * std)


def sample_action(out: GaussianPolicyOut, noise) -> Tuple[float, float]:
    """Clamped action and the log-probability of the underlying (pre-clamp) sample."""
    raw = reparameterize(out, noise)
    return float(np.clip(raw, ACTION_LOW, ACTION_HIGH)), float(log_prob(out, raw))


def mean_action(out: GaussianPolicyOut):
    """Deterministic action used at inference time."""
    return np.clip(out.mu, ACTION_LOW, ACTION_HIGH)


def entropy(out: GaussianPolicyOut):
    return 0.5 * math.log(2.0 * math.pi * math.e) + np.asarray(out.log_std)


def critic_forward_with_tape(critic: Critic, state) -> Tuple[Union[float, np.ndarray], GradientTape]:
    state = _check_state(state)
    value, tape = diffcore.forward(critic.net, state)
    value = value[..., 0]
    return (float(value) if value.ndim == 0 else value), tape


def critic_forward(critic: Critic, state):
    return critic_forward_with_tape(critic, state)[0]


def critic_backward(critic: Critic, tape: GradientTape, d_value) -> Dict[str, np.ndarray]:
    upstream = np.asarray(d_value, dtype=np.float64)[..., None]
    grads, _ = diffcore.backward(critic.net, tape, upstream)
    return {f"net.{k}": v for k, v in grads.items()}


def dense_param_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


def matched_hidden_width(target: int, n_in: int = N_FEATURES, n_out: int = 2) -> int:
    """Hidden width h whose n_in -> h -> n_out net is closest in size to ``target`` (ties go to smaller h)."""
    best_h, best_gap = 1, None
    h = 1
    while True:
        gap = abs(dense_param_count([n_in, h, n_out]) - target)
        if best_gap is None or gap < best_gap:
            best_h, best_gap = h, gap
        if dense_param_count([n_in, h, n_out]) > target:
            break
        h += 1
    return best_h


def classical_hidden_widths(controller: ControllerConfig, vqc_config: VqcConfig) -> List[int]:
    if controller.classical_hidden == "matched":
        hybrid = vqc_config.n_params + dense_param_count([vqc_config.n_qubits, controller.head_hidden, 2])
        return [matched_hidden_width(hybrid)]
    return list(controller.classical_hidden)


def build_actor(kind: ActorKind, controller: ControllerConfig, vqc_config: VqcConfig, rng: np.random.Generator) -> Actor:
    if kind == ActorKind.QUANTUM:
        return HybridActor.create(vqc_config, controller.head_hidden, rng)
    if kind == ActorKind.CLASSICAL:
        return ClassicalActor.create(classical_hidden_widths(controller, vqc_config), rng)
    raise ValueError(f"actor kind {kind.value!r} has no trainable policy")


def build_critic(controller: ControllerConfig, rng: np.random.Generator) -> Critic:
    return Critic.create(controller.critic_hidden, rng)
