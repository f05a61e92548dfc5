"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CFGP" | u16 version | u16 len + kind (utf-8) | u32 n_blocks
    per block: u16 len + name (utf-8) | u32 ndim | u64 * ndim shape | f64 data (C order)
    u32 CRC32 of every preceding byte

The architecture of a model is recovered from its kind tag and the block shapes.
"""

import logging
import math
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..models import VqcConfig
from .diffcore import DenseLayer, DenseNet
from .diffusion import Denoiser, ProxyClassifier
from .policy import ClassicalActor, Critic, HybridActor
from .qsim import VqcParams

logger = logging.getLogger(__name__)

MAGIC = b"CFGP"
FORMAT_VERSION = 1

KIND_HYBRID_ACTOR = "hybrid_actor"
KIND_CLASSICAL_ACTOR = "classical_actor"
KIND_CRITIC = "critic"
KIND_DENOISER = "denoiser"
KIND_CLASSIFIER = "classifier"

Model = Union[HybridActor, ClassicalActor, Critic, Denoiser, ProxyClassifier]


class CheckpointError(ValueError):
    """Corrupt, truncated or mismatched checkpoint file."""


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_blocks(kind: str, blocks: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(kind), struct.pack("<I", len(blocks))]
    for name, value in blocks.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"invalid string in checkpoint: {e}") from e


def decode_blocks(data: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = reader.string()
    (n_blocks,) = reader.unpack("<I")
    blocks = {}
    for _ in range(n_blocks):
        name = reader.string()
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q")
        count = math.prod(shape)
        blocks[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.pos != len(body):
        raise CheckpointError(f"{len(body) - reader.pos} trailing bytes after the last block")
    return kind, blocks


def model_kind(model: Model) -> str:
    if isinstance(model, HybridActor):
        return KIND_HYBRID_ACTOR
    if isinstance(model, ClassicalActor):
        return KIND_CLASSICAL_ACTOR
    if isinstance(model, Critic):
        return KIND_CRITIC
    if isinstance(model, Denoiser):
        return KIND_DENOISER
    if isinstance(model, ProxyClassifier):
        return KIND_CLASSIFIER
    raise TypeError(f"cannot checkpoint objects of type {type(model).__name__}")


def _dense_from_blocks(blocks: Dict[str, np.ndarray], prefix: str, hidden_activation: str) -> DenseNet:
    n_layers = 0
    while f"{prefix}{n_layers}.weight" in blocks:
        n_layers += 1
    if n_layers == 0:
        raise CheckpointError(f"no dense layers under prefix {prefix!r}")
    layers = []
    for i in range(n_layers):
        activation = "identity" if i == n_layers - 1 else hidden_activation
        try:
            layers.append(DenseLayer(blocks[f"{prefix}{i}.weight"], blocks[f"{prefix}{i}.bias"], activation))
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"bad dense block {prefix}{i}: {e}") from e
    try:
        return DenseNet(layers)
    except ValueError as e:
        raise CheckpointError(str(e)) from e


def model_from_blocks(kind: str, blocks: Dict[str, np.ndarray]) -> Model:
    try:
        if kind == KIND_HYBRID_ACTOR:
            angles = blocks["vqc.angles"]
            depth, n_qubits, _ = angles.shape
            return HybridActor(VqcConfig(n_qubits=n_qubits, depth=depth), VqcParams(angles), _dense_from_blocks(blocks, "head.", "tanh"))
        if kind == KIND_CLASSICAL_ACTOR:
            return ClassicalActor(_dense_from_blocks(blocks, "net.", "tanh"))
        if kind == KIND_CRITIC:
            return Critic(_dense_from_blocks(blocks, "net.", "tanh"))
        if kind == KIND_CLASSIFIER:
            return ProxyClassifier(_dense_from_blocks(blocks, "net.", "tanh"))
        if kind == KIND_DENOISER:
            net = _dense_from_blocks(blocks, "net.", "relu")
            embedding = blocks["class_embedding"]
            pixels = net.output_dim
            side = math.isqrt(pixels)
            time_dim = net.input_dim - pixels - embedding.shape[1]
            return Denoiser(net, embedding, time_dim, side)
    except KeyError as e:
        raise CheckpointError(f"{kind} checkpoint is missing block {e}") from e
    except ValueError as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{kind} checkpoint has inconsistent shapes: {e}") from e
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_model(path: Union[str, Path], model: Model) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_blocks(model_kind(model), model.parameters()))
    logger.info("Saved %s checkpoint to %s (%d params)", model_kind(model), path, model.param_count())
    return path


def load_model(path: Union[str, Path], expected_kind: Union[str, Tuple[str, ...], None] = None) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    kind, blocks = decode_blocks(path.read_bytes())
    if expected_kind is not None:
        allowed = (expected_kind,) if isinstance(expected_kind, str) else expected_kind
        if kind not in allowed:
            raise CheckpointError(f"{path} holds a {kind} checkpoint, expected {' or '.join(allowed)}")
    return model_from_blocks(kind, blocks)
