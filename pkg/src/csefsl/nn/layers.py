"""Layer specifications, shape inference and parameter bookkeeping.

Layers are immutable value objects. Tensors are plain ``float64`` numpy arrays
in NCHW layout; per-sample shapes below exclude the leading batch dimension.
A parameter set is a list with one entry per layer, each entry a list of
arrays (``[W]``, ``[W, b]`` or ``[]``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigurationError(f"Dense dims must be positive, got {self.in_dim}x{self.out_dim}")


@dataclass(frozen=True)
class Conv2D:
    kernel_h: int
    kernel_w: int
    in_ch: int
    out_ch: int
    padding: str = "same"
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w) < 1:
            raise ConfigurationError("Conv2D kernel dims must be >= 1")
        if self.in_ch <= 0 or self.out_ch <= 0:
            raise ConfigurationError("Conv2D channel counts must be positive")
        if self.stride < 1:
            raise ConfigurationError("Conv2D stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ConfigurationError(f"Conv2D padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass(frozen=True)
class MaxPool2D:
    k: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.k < 1 or self.stride < 1:
            raise ConfigurationError("MaxPool2D k and stride must be >= 1")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"Dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class LocalResponseNorm:
    depth_radius: int = 4
    alpha_n: float = 0.001 / 9.0
    beta_n: float = 0.75
    bias_n: float = 1.0

    def __post_init__(self):
        if self.depth_radius < 0:
            raise ConfigurationError("LocalResponseNorm depth_radius must be >= 0")
        if self.bias_n <= 0:
            raise ConfigurationError("LocalResponseNorm bias_n must be positive")


LayerSpec = Union[Dense, Conv2D, MaxPool2D, ReLU, Flatten, Dropout, LocalResponseNorm]
LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2D, MaxPool2D, ReLU, Flatten, Dropout, LocalResponseNorm)}

Shape = tuple


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """TF-style SAME padding (before, after) for one spatial axis."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_hw(layer: Conv2D, h: int, w: int) -> tuple[int, int]:
    if layer.padding == "same":
        return -(-h // layer.stride), -(-w // layer.stride)
    return (h - layer.kernel_h) // layer.stride + 1, (w - layer.kernel_w) // layer.stride + 1


def layer_output_shape(layer: LayerSpec, in_shape: Shape, index: int = 0) -> Shape:
    """Per-sample output shape, raising ConfigurationError on mismatch."""
    in_shape = tuple(in_shape)
    if isinstance(layer, Dense):
        if in_shape != (layer.in_dim,):
            raise ConfigurationError(f"Dense expects input ({layer.in_dim},), got {in_shape}", index)
        return (layer.out_dim,)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != layer.in_ch:
            raise ConfigurationError(f"Conv2D expects ({layer.in_ch}, H, W), got {in_shape}", index)
        oh, ow = conv_output_hw(layer, in_shape[1], in_shape[2])
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"Conv2D kernel larger than input {in_shape}", index)
        return (layer.out_ch, oh, ow)
    if isinstance(layer, MaxPool2D):
        if len(in_shape) != 3:
            raise ConfigurationError(f"MaxPool2D expects (C, H, W), got {in_shape}", index)
        oh = (in_shape[1] - layer.k) // layer.stride + 1
        ow = (in_shape[2] - layer.k) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"MaxPool2D window larger than input {in_shape}", index)
        return (in_shape[0], oh, ow)
    if isinstance(layer, LocalResponseNorm):
        if len(in_shape) != 3:
            raise ConfigurationError(f"LocalResponseNorm expects (C, H, W), got {in_shape}", index)
        return in_shape
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, (ReLU, Dropout)):
        return in_shape
    raise ConfigurationError(f"unknown layer type {type(layer).__name__}", index)


def infer_shapes(stack: Sequence[LayerSpec], input_shape: Shape) -> list[Shape]:
    """Return ``[input_shape, shape after layer 0, ...]``; shape-checks the stack."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(stack):
        shapes.append(layer_output_shape(layer, shapes[-1], i))
    return shapes


def output_shape(stack: Sequence[LayerSpec], input_shape: Shape) -> Shape:
    return infer_shapes(stack, input_shape)[-1]


def param_shapes(layer: LayerSpec) -> list[tuple]:
    if isinstance(layer, Dense):
        shapes = [(layer.in_dim, layer.out_dim)]
        if layer.has_bias:
            shapes.append((layer.out_dim,))
        return shapes
    if isinstance(layer, Conv2D):
        shapes = [(layer.out_ch, layer.in_ch, layer.kernel_h, layer.kernel_w)]
        if layer.has_bias:
            shapes.append((layer.out_ch,))
        return shapes
    return []


def param_count(stack: Sequence[LayerSpec]) -> int:
    """Exact number of scalar parameters in a stack."""
    return sum(int(np.prod(s)) for layer in stack for s in param_shapes(layer))


def init_params(stack: Sequence[LayerSpec], seed: int) -> list[list[np.ndarray]]:
    """Fan-in scaled uniform weights in (-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in stack:
        shapes = param_shapes(layer)
        if not shapes:
            params.append([])
            continue
        w_shape = shapes[0]
        fan_in = w_shape[0] if isinstance(layer, Dense) else int(np.prod(w_shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        entry = [rng.uniform(-bound, bound, size=w_shape)]
        if len(shapes) > 1:
            entry.append(np.zeros(shapes[1]))
        params.append(entry)
    return params


def zeros_like_params(params):
    return [[np.zeros_like(a) for a in entry] for entry in params]


def copy_params(params):
    return [[a.copy() for a in entry] for entry in params]


def flatten_params(params) -> np.ndarray:
    arrays = [a.ravel() for entry in params for a in entry]
    if not arrays:
        return np.zeros(0)
    return np.concatenate(arrays)


def unflatten_params(vector: np.ndarray, like) -> list[list[np.ndarray]]:
    vector = np.asarray(vector, dtype=np.float64)
    expected = sum(a.size for entry in like for a in entry)
    if vector.size != expected:
        raise ConfigurationError(f"flat vector has {vector.size} entries, expected {expected}")
    out, pos = [], 0
    for entry in like:
        new_entry = []
        for a in entry:
            new_entry.append(vector[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        out.append(new_entry)
    return out


def params_count_of(params) -> int:
    return sum(a.size for entry in params for a in entry)


def check_params(stack: Sequence[LayerSpec], params) -> None:
    if len(params) != len(stack):
        raise ConfigurationError(f"parameter set has {len(params)} layers, stack has {len(stack)}")
    for i, (layer, entry) in enumerate(zip(stack, params)):
        shapes = param_shapes(layer)
        if [tuple(a.shape) for a in entry] != shapes:
            raise ConfigurationError(
                f"parameter shapes {[a.shape for a in entry]} do not match {shapes}", i)


def layer_to_dict(layer: LayerSpec) -> dict:
    return {"type": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown layer type {kind!r}") from None
    return cls(**d)
