"""Split architectures, smashed-data production and the client/aux/server update paths.

A split architecture has three stacks: the client-side model, the auxiliary
head that turns cut-layer activations into local logits, and the server-side
model. Client updates use only the auxiliary loss. The server trains on
uploaded smashed batches. The baseline path instead returns the cut-layer
gradient to the client.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataError, ProtocolError
from .nn import core
from .nn.layers import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    LocalResponseNorm,
    MaxPool2D,
    ReLU,
    check_params,
    flatten_params,
    infer_shapes,
    layer_from_dict,
    layer_to_dict,
    param_count,
    unflatten_params,
    init_params,
)


@dataclass(frozen=True)
class MLP:
    """Auxiliary head: Flatten -> Dense(cut, classes)."""


@dataclass(frozen=True)
class CnnMlp:
    """Auxiliary head: 1x1 Conv2D to ``channels`` -> Flatten -> Dense(classes)."""

    channels: int

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError("CnnMlp channels must be positive")


AuxKind = Union[MLP, CnnMlp]


def aux_from_dict(d) -> AuxKind:
    if d is None or d.get("kind", "mlp") == "mlp":
        return MLP()
    if d["kind"] == "cnn_mlp":
        return CnnMlp(int(d["channels"]))
    raise ConfigurationError(f"unknown auxiliary kind {d['kind']!r}")


@dataclass(frozen=True)
class SplitArchitecture:
    name: str
    input_shape: tuple
    client_stack: tuple
    aux_stack: tuple
    server_stack: tuple
    cut_shape: tuple
    num_classes: int

    def __post_init__(self):
        cut = infer_shapes(self.client_stack, self.input_shape)[-1]
        if tuple(cut) != tuple(self.cut_shape):
            raise ConfigurationError(f"client stack outputs {cut}, declared cut shape is {self.cut_shape}")
        for role, stack in (("aux", self.aux_stack), ("server", self.server_stack)):
            out = infer_shapes(stack, self.cut_shape)[-1]
            if out != (self.num_classes,):
                raise ConfigurationError(f"{role} stack outputs {out}, expected ({self.num_classes},)")

    @property
    def q(self) -> int:
        """Scalars per smashed sample."""
        return int(np.prod(self.cut_shape))

    def stack(self, role: str) -> tuple:
        return {"client": self.client_stack, "aux": self.aux_stack, "server": self.server_stack}[role]

    def param_counts(self) -> dict:
        return {role: param_count(self.stack(role)) for role in ("client", "aux", "server")}

    def init(self, seed: int):
        """Initial (client, aux, server) parameter sets from one seed."""
        return (init_params(self.client_stack, seed * 3 + 0),
                init_params(self.aux_stack, seed * 3 + 1),
                init_params(self.server_stack, seed * 3 + 2))


def _aux_stack(aux: AuxKind, cut_shape, num_classes):
    if isinstance(aux, MLP):
        return (Flatten(), Dense(int(np.prod(cut_shape)), num_classes))
    if len(cut_shape) != 3:
        raise ConfigurationError("CnnMlp auxiliary head needs a (C, H, W) cut shape")
    c, h, w = cut_shape
    return (Conv2D(1, 1, c, aux.channels, "valid", 1, True), Flatten(),
            Dense(aux.channels * h * w, num_classes))


def build_cifar10_arch(aux: AuxKind = MLP(), lrn: bool = True, server_first_bias: bool = True) -> SplitArchitecture:
    """Client: two 5x5/64 SAME convs, each with 2x2 max-pool and LRN, on 3x24x24 crops.

    Server: 2304 -> 384 -> 192 -> 10 dense layers with ReLU.
    """
    norm = (LocalResponseNorm(),) if lrn else ()
    client = (Conv2D(5, 5, 3, 64, "same"), ReLU(), MaxPool2D(2, 2), *norm,
              Conv2D(5, 5, 64, 64, "same"), ReLU(), MaxPool2D(2, 2), *norm)
    cut = (64, 6, 6)
    server = (Flatten(), Dense(2304, 384, server_first_bias), ReLU(), Dense(384, 192), ReLU(), Dense(192, 10))
    return SplitArchitecture("cifar10", (3, 24, 24), client, _aux_stack(aux, cut, 10), server, cut, 10)


def build_femnist_arch(aux: AuxKind = MLP(), dropout_rate: float = 0.25) -> SplitArchitecture:
    """Client: 3x3/32 and 3x3/64 VALID convs with ReLU, 2x2 max-pool, dropout on 1x28x28."""
    client = (Conv2D(3, 3, 1, 32, "valid"), ReLU(), Conv2D(3, 3, 32, 64, "valid"), ReLU(),
              MaxPool2D(2, 2), Dropout(dropout_rate))
    cut = (64, 12, 12)
    server = (Flatten(), Dense(9216, 128), ReLU(), Dense(128, 62))
    return SplitArchitecture("femnist", (1, 28, 28), client, _aux_stack(aux, cut, 62), server, cut, 62)


def build_mlp_arch(input_dim: int, num_classes: int, cut_dim: int = 16, server_hidden: int = 16,
                   aux: AuxKind = MLP(), client_relu: bool = True) -> SplitArchitecture:
    """Dense split model for desk-scale synthetic tasks."""
    client = (Flatten(), Dense(input_dim, cut_dim)) + ((ReLU(),) if client_relu else ())
    if isinstance(aux, CnnMlp):
        raise ConfigurationError("CnnMlp auxiliary head needs a convolutional cut layer")
    server = (Dense(cut_dim, server_hidden), ReLU(), Dense(server_hidden, num_classes))
    return SplitArchitecture("mlp", (input_dim,), client, _aux_stack(aux, (cut_dim,), num_classes),
                             server, (cut_dim,), num_classes)


def build_small_cnn_arch(input_shape=(1, 8, 8), num_classes: int = 4, channels: int = 4,
                         aux: AuxKind = MLP()) -> SplitArchitecture:
    """Conv split model small enough for desk-scale image-shaped synthetic data."""
    cin, h, w = input_shape
    client = (Conv2D(3, 3, cin, channels, "same"), ReLU(), MaxPool2D(2, 2))
    cut = (channels, h // 2, w // 2)
    q = int(np.prod(cut))
    server = (Flatten(), Dense(q, 16), ReLU(), Dense(16, num_classes))
    return SplitArchitecture("small_cnn", tuple(input_shape), client, _aux_stack(aux, cut, num_classes),
                             server, cut, num_classes)


@dataclass
class SmashedBatch:
    activations: np.ndarray
    labels: np.ndarray
    client_id: int
    round: int
    batch_index: int

    def __post_init__(self):
        if self.activations.shape[0] != len(self.labels):
            raise DataError("smashed activations and labels disagree on batch size")

    @property
    def batch_size(self) -> int:
        return int(self.activations.shape[0])

    @property
    def payload_size(self) -> int:
        """Scalars of cut-layer activations (labels excluded)."""
        return int(self.activations.size)

    @property
    def label_units(self) -> int:
        return int(len(self.labels))


@dataclass
class ModelSnapshot:
    role: str
    params: list
    round: int
    client_id: Optional[int] = None

    @property
    def param_count(self) -> int:
        return sum(a.size for entry in self.params for a in entry)


def snapshot_to_dict(snapshot: ModelSnapshot, stack: Sequence[LayerSpec]) -> dict:
    return {
        "role": snapshot.role,
        "round": snapshot.round,
        "client_id": snapshot.client_id,
        "stack": [layer_to_dict(layer) for layer in stack],
        "params": flatten_params(snapshot.params).tolist(),
    }


def snapshot_from_dict(d: dict) -> tuple[ModelSnapshot, tuple]:
    stack = tuple(layer_from_dict(x) for x in d["stack"])
    like = init_params(stack, 0)
    params = unflatten_params(np.asarray(d["params"], dtype=np.float64), like)
    return ModelSnapshot(d["role"], params, d["round"], d.get("client_id")), stack


def snapshot_to_bytes(snapshot: ModelSnapshot, stack) -> bytes:
    """Length-prefixed JSON header followed by little-endian float64 parameters."""
    header = snapshot_to_dict(snapshot, stack)
    flat = np.asarray(header.pop("params"), dtype="<f8")
    header["n_params"] = int(flat.size)
    raw = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(raw)) + raw + flat.tobytes()


def snapshot_from_bytes(blob: bytes) -> tuple[ModelSnapshot, tuple]:
    (n,) = struct.unpack_from("<Q", blob, 0)
    header = json.loads(blob[8:8 + n])
    flat = np.frombuffer(blob, dtype="<f8", offset=8 + n, count=header.pop("n_params"))
    header["params"] = flat
    return snapshot_from_dict(header)


def client_forward_cut(arch: SplitArchitecture, client_params, features, labels, client_id=0,
                       round_index=0, batch_index=0, train_mode=True, rng_seed=0) -> SmashedBatch:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1:] != tuple(arch.input_shape):
        raise DataError(f"batch features {features.shape[1:]} do not match client input {arch.input_shape}")
    _, act = core.forward(arch.client_stack, client_params, features, train_mode, rng_seed)
    return SmashedBatch(act, np.asarray(labels).copy(), client_id, round_index, batch_index)


def local_loss_and_grads(arch: SplitArchitecture, client_params, aux_params, features, labels, rng_seed=0):
    """Local auxiliary loss over the mini-batch and its gradients for client and aux parameters."""
    features = np.asarray(features, dtype=np.float64)
    c_cache, cut = core.forward(arch.client_stack, client_params, features, True, rng_seed)
    a_cache, logits = core.forward(arch.aux_stack, aux_params, cut, True, rng_seed)
    loss, dlogits = core.softmax_xent(logits, labels)
    aux_grads, dcut = core.backward(arch.aux_stack, aux_params, a_cache, dlogits)
    client_grads, _ = core.backward(arch.client_stack, client_params, c_cache, dcut)
    return loss, client_grads, aux_grads


def _check_smashed(arch, smashed):
    if tuple(smashed.activations.shape[1:]) != tuple(arch.cut_shape):
        raise ProtocolError(
            f"smashed activations {smashed.activations.shape[1:]} do not match server input {arch.cut_shape}")


def backprop_to_cut(arch: SplitArchitecture, server_params, smashed: SmashedBatch):
    """Server loss, server gradients and the gradient w.r.t. the smashed activations."""
    _check_smashed(arch, smashed)
    check_params(arch.server_stack, server_params)
    cache, logits = core.forward(arch.server_stack, server_params, smashed.activations, True, 0)
    loss, dlogits = core.softmax_xent(logits, smashed.labels)
    grads, cut_grad = core.backward(arch.server_stack, server_params, cache, dlogits)
    return loss, grads, cut_grad


def server_loss_step(arch: SplitArchitecture, server_params, smashed: SmashedBatch, lr: float):
    """One SGD step of the server model on a single smashed batch."""
    loss, grads, _ = backprop_to_cut(arch, server_params, smashed)
    return loss, core.sgd_step(server_params, grads, lr)
