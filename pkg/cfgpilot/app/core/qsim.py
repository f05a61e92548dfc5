"""Statevector simulation of the shallow variational circuit used by the hybrid actor.

States are stored as complex128 arrays of shape ``(*batch, 2**n)``. Qubit 0 is the most
significant bit of the basis index, so ``|10>`` means qubit 0 is set. Every gate broadcasts
over leading batch axes, which lets the parameter-shift rule run all shifted circuits at once.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..models import VqcConfig

MAX_QUBITS = 12
N_FEATURES = 6
AXES = ("X", "Y", "Z")
SHIFT = np.pi / 2


@dataclass(frozen=True)
class StateVector:
    """Amplitudes of an n-qubit register, optionally batched."""
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        if self.amplitudes.shape[-1:] != (2 ** self.n_qubits,):
            raise ValueError(
                f"amplitude vector length {self.amplitudes.shape[-1:]} does not match 2**{self.n_qubits}"
            )

    @classmethod
    def zero(cls, n_qubits: int, batch_shape: Tuple[int, ...] = ()) -> "StateVector":
        """|0...0> repeated over ``batch_shape``."""
        amps = np.zeros(tuple(batch_shape) + (2 ** n_qubits,), dtype=np.complex128)
        amps[..., 0] = 1.0
        return cls(amps, n_qubits)

    @classmethod
    def basis(cls, bits: str) -> "StateVector":
        """Computational basis state from a bit string, e.g. ``"10"``."""
        n = len(bits)
        amps = np.zeros(2 ** n, dtype=np.complex128)
        amps[int(bits, 2)] = 1.0
        return cls(amps, n)

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.amplitudes.shape[:-1]

    def norm_squared(self) -> np.ndarray:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=-1)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def tensor(self) -> np.ndarray:
        """View with one axis of length 2 per qubit."""
        return self.amplitudes.reshape(self.batch_shape + (2,) * self.n_qubits)


@dataclass
class VqcParams:
    """Trainable angles, shape ``(*batch, depth, n_qubits, 3)`` ordered RY, RZ, RX."""
    angles: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.ndim < 3 or self.angles.shape[-1] != 3:
            raise ValueError(f"VQC angles must have shape (..., depth, n_qubits, 3), got {self.angles.shape}")

    @classmethod
    def zeros(cls, config: VqcConfig) -> "VqcParams":
        return cls(np.zeros((config.depth, config.n_qubits, 3)))

    @classmethod
    def random(cls, config: VqcConfig, rng: np.random.Generator, scale: float = np.pi) -> "VqcParams":
        return cls(rng.uniform(-scale, scale, size=(config.depth, config.n_qubits, 3)))

    @property
    def depth(self) -> int:
        return self.angles.shape[-3]

    @property
    def n_qubits(self) -> int:
        return self.angles.shape[-2]

    @property
    def count(self) -> int:
        return 3 * self.n_qubits * self.depth

    def copy(self) -> "VqcParams":
        return VqcParams(self.angles.copy())


def rotation_matrix(axis: str, angle) -> np.ndarray:
    """exp(-i angle/2 P) for P in {X, Y, Z}; broadcasts over ``angle``, result ``(*angle.shape, 2, 2)``."""
    angle = np.asarray(angle, dtype=np.float64)
    c = np.cos(angle / 2)
    s = np.sin(angle / 2)
    m = np.zeros(angle.shape + (2, 2), dtype=np.complex128)
    if axis == "X":
        m[..., 0, 0] = c
        m[..., 0, 1] = -1j * s
        m[..., 1, 0] = -1j * s
        m[..., 1, 1] = c
    elif axis == "Y":
        m[..., 0, 0] = c
        m[..., 0, 1] = -s
        m[..., 1, 0] = s
        m[..., 1, 1] = c
    elif axis == "Z":
        m[..., 0, 0] = np.exp(-0.5j * angle)
        m[..., 1, 1] = np.exp(0.5j * angle)
    else:
        raise ValueError(f"unknown rotation axis {axis!r}; expected one of {AXES}")
    return m


def _check_qubit(state: StateVector, qubit: int, name: str = "qubit"):
    if not 0 <= qubit < state.n_qubits:
        raise ValueError(f"{name} index {qubit} out of range for {state.n_qubits} qubits")


def apply_rotation(state: StateVector, qubit: int, axis: str, angle) -> StateVector:
    """Apply R_axis(angle) on one wire. ``angle`` may be a scalar or broadcast against the batch."""
    _check_qubit(state, qubit)
    gate = rotation_matrix(axis, angle)
    batch = np.broadcast_shapes(state.batch_shape, gate.shape[:-2])
    n = state.n_qubits

    psi = np.broadcast_to(state.amplitudes, batch + (2 ** n,)).reshape(batch + (2,) * n)
    axis_index = len(batch) + qubit
    psi = np.moveaxis(psi, axis_index, -1)
    # Gate gets singleton axes for the other qubits so it broadcasts across them.
    gate = np.broadcast_to(gate, batch + (2, 2)).reshape(batch + (1,) * (n - 1) + (2, 2))
    psi = np.einsum("...ij,...j->...i", gate, psi)
    psi = np.moveaxis(psi, -1, axis_index)
    return StateVector(np.ascontiguousarray(psi).reshape(batch + (2 ** n,)), n)


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """Flip ``target`` on every basis state whose ``control`` bit is 1."""
    _check_qubit(state, control, "control")
    _check_qubit(state, target, "target")
    if control == target:
        raise ValueError(f"CNOT control and target must differ (both {control})")

    nb = len(state.batch_shape)
    psi = state.tensor()
    out = psi.copy()
    index = [slice(None)] * psi.ndim
    index[nb + control] = 1
    index = tuple(index)
    # The control axis disappears from the sliced view.
    target_axis = nb + target - (1 if target > control else 0)
    out[index] = np.flip(psi[index], axis=target_axis)
    return StateVector(out.reshape(state.amplitudes.shape), state.n_qubits)


def expectation_z(state: StateVector) -> np.ndarray:
    """<Z_i> for every qubit, shape ``(*batch, n_qubits)``."""
    nb = len(state.batch_shape)
    n = state.n_qubits
    probs = np.abs(state.tensor()) ** 2
    out = np.empty(state.batch_shape + (n,))
    for i in range(n):
        other = tuple(nb + j for j in range(n) if j != i)
        marginal = probs.sum(axis=other) if other else probs
        out[..., i] = marginal[..., 0] - marginal[..., 1]
    return out


def encode_features(features, n_qubits: int = 4) -> np.ndarray:
    """Map state features to RY/RZ encoding angles: pi*tanh(f), zero-padded to 2*n_qubits slots."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("cannot encode non-finite features")
    n_slots = 2 * n_qubits
    angles = np.zeros(features.shape[:-1] + (n_slots,))
    used = min(n_slots, features.shape[-1])
    angles[..., :used] = np.pi * np.tanh(features[..., :used])
    return angles


def _ring_pairs(n_qubits: int):
    if n_qubits < 2:
        return []
    return [(i, (i + 1) % n_qubits) for i in range(n_qubits)]


def run_circuit(params: VqcParams, encoding) -> np.ndarray:
    """Encode, apply ``depth`` layers of RY/RZ, ring CNOT and RX, and read out <Z> on all qubits.

    ``params.angles`` and ``encoding`` broadcast against each other over leading axes.
    """
    encoding = np.asarray(encoding, dtype=np.float64)
    n = params.n_qubits
    if encoding.shape[-1] != 2 * n:
        raise ValueError(f"encoding has {encoding.shape[-1]} angles, circuit with {n} qubits needs {2 * n}")
    if not 1 <= n <= MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n}")

    angles = params.angles
    batch = np.broadcast_shapes(angles.shape[:-3], encoding.shape[:-1])
    state = StateVector.zero(n, batch)

    for i in range(n):
        state = apply_rotation(state, i, "Y", encoding[..., 2 * i])
        state = apply_rotation(state, i, "Z", encoding[..., 2 * i + 1])

    for layer in range(params.depth):
        for i in range(n):
            state = apply_rotation(state, i, "Y", angles[..., layer, i, 0])
            state = apply_rotation(state, i, "Z", angles[..., layer, i, 1])
        for control, target in _ring_pairs(n):
            state = apply_cnot(state, control, target)
        for i in range(n):
            state = apply_rotation(state, i, "X", angles[..., layer, i, 2])

    return expectation_z(state)


def param_shift_grad(params: VqcParams, encoding, upstream) -> np.ndarray:
    """Gradient of sum_i upstream_i * <Z_i> w.r.t. every circuit angle.

    All 2*P shifted circuits are evaluated as a single batch. The result has shape
    ``(*batch, depth, n_qubits, 3)``; callers sum over batch axes when needed.
    """
    encoding = np.asarray(encoding, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    depth, n = params.depth, params.n_qubits
    n_params = 3 * n * depth
    if upstream.shape[-1] != n:
        raise ValueError(f"upstream has length {upstream.shape[-1]}, expected {n}")

    shifts = (np.eye(n_params) * SHIFT).reshape(n_params, depth, n, 3)
    shifts = np.concatenate([shifts, -shifts], axis=0)  # (2P, depth, n, 3)
    shifted = VqcParams(params.angles[..., None, :, :, :] + shifts)
    expectations = run_circuit(shifted, encoding[..., None, :])  # (*batch, 2P, n)

    plus, minus = expectations[..., :n_params, :], expectations[..., n_params:, :]
    d_expect = 0.5 * (plus - minus)  # (*batch, P, n)
    grad = np.einsum("...pi,...i->...p", d_expect, upstream)
    return grad.reshape(grad.shape[:-1] + (depth, n, 3))
