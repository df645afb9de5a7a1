"""Forward/backward passes, fused softmax cross-entropy, SGD and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .layers import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    LocalResponseNorm,
    MaxPool2D,
    ReLU,
    check_params,
    layer_output_shape,
    same_padding,
)
from ..errors import ConfigurationError, DataError, InternalConsistencyError, TrainingAborted


@dataclass
class ForwardCache:
    stack: tuple
    param_ids: tuple
    input_shape: tuple
    layer_caches: list
    output: np.ndarray


def _param_ids(params):
    return tuple(id(a) for entry in params for a in entry)


def _channel_window_sum(x, r):
    # sum over channels [c-r, c+r] clipped to range, for NCHW x
    c = x.shape[1]
    csum = np.concatenate([np.zeros_like(x[:, :1]), np.cumsum(x, axis=1)], axis=1)
    hi = np.minimum(np.arange(c) + r, c - 1) + 1
    lo = np.maximum(np.arange(c) - r, 0)
    return csum[:, hi] - csum[:, lo]


def _conv_pad(layer: Conv2D, h, w):
    if layer.padding == "valid":
        return (0, 0), (0, 0)
    return same_padding(h, layer.kernel_h, layer.stride), same_padding(w, layer.kernel_w, layer.stride)


def _layer_forward(layer, entry, x, train_mode, rng_seed, index):
    if isinstance(layer, Dense):
        out = x @ entry[0]
        if layer.has_bias:
            out = out + entry[1]
        return out, x
    if isinstance(layer, Conv2D):
        (pt, pb), (pl, pr) = _conv_pad(layer, x.shape[2], x.shape[3])
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
        xp = np.ascontiguousarray(xp)
        out = kernels.conv2d_forward(xp, np.ascontiguousarray(entry[0]), layer.stride)
        if layer.has_bias:
            out += entry[1][None, :, None, None]
        return out, (xp, (pt, pb, pl, pr))
    if isinstance(layer, MaxPool2D):
        out, argmax = kernels.maxpool_forward(np.ascontiguousarray(x), layer.k, layer.stride)
        return out, (argmax, x.shape[2], x.shape[3])
    if isinstance(layer, ReLU):
        mask = x > 0
        return x * mask, mask
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Dropout):
        if not train_mode or layer.rate == 0.0:
            return x, None
        rng = np.random.default_rng([int(rng_seed), index])
        mask = (rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
        return x * mask, mask
    if isinstance(layer, LocalResponseNorm):
        scale = layer.bias_n + layer.alpha_n * _channel_window_sum(x * x, layer.depth_radius)
        factor = scale ** (-layer.beta_n)
        return x * factor, (x, scale, factor)
    raise ConfigurationError(f"unknown layer type {type(layer).__name__}", index)


def _layer_backward(layer, entry, cache, g):
    """Return (param grads list, input grad)."""
    if isinstance(layer, Dense):
        x = cache
        grads = [x.T @ g]
        if layer.has_bias:
            grads.append(g.sum(axis=0))
        return grads, g @ entry[0].T
    if isinstance(layer, Conv2D):
        xp, (pt, pb, pl, pr) = cache
        dxp, dw = kernels.conv2d_backward(xp, np.ascontiguousarray(entry[0]), np.ascontiguousarray(g), layer.stride)
        grads = [dw]
        if layer.has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        dx = dxp[:, :, pt:dxp.shape[2] - pb, pl:dxp.shape[3] - pr]
        return grads, np.ascontiguousarray(dx)
    if isinstance(layer, MaxPool2D):
        argmax, h, w = cache
        return [], kernels.maxpool_backward(np.ascontiguousarray(g), argmax, h, w)
    if isinstance(layer, ReLU):
        return [], g * cache
    if isinstance(layer, Flatten):
        return [], g.reshape(cache)
    if isinstance(layer, Dropout):
        return [], g if cache is None else g * cache
    if isinstance(layer, LocalResponseNorm):
        x, scale, factor = cache
        t = g * x * factor / scale
        coupled = _channel_window_sum(t, layer.depth_radius)
        return [], g * factor - 2.0 * layer.alpha_n * layer.beta_n * x * coupled
    raise ConfigurationError(f"unknown layer type {type(layer).__name__}")


def forward(stack: Sequence[LayerSpec], params, x: np.ndarray, train_mode: bool = False,
            rng_seed: int = 0) -> tuple[ForwardCache, np.ndarray]:
    """Run ``x`` (batch-first) through the stack.

    Dropout is active only when ``train_mode``; its masks derive from
    ``rng_seed`` and the layer index, so eval-mode output never depends on the
    seed.
    """
    stack = tuple(stack)
    check_params(stack, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ConfigurationError(f"input must have a batch dimension, got shape {x.shape}", 0)
    input_shape = x.shape
    caches = []
    shape = x.shape[1:]
    for i, (layer, entry) in enumerate(zip(stack, params)):
        shape = layer_output_shape(layer, shape, i)
        x, c = _layer_forward(layer, entry, x, train_mode, rng_seed, i)
        caches.append(c)
    if not np.all(np.isfinite(x)):
        raise TrainingAborted("non-finite activations produced by forward pass")
    return ForwardCache(stack, _param_ids(params), input_shape, caches, x), x


def backward(stack: Sequence[LayerSpec], params, cache: ForwardCache, upstream):
    """Backpropagate ``upstream`` through the stack.

    ``upstream`` is either a float gradient w.r.t. the stack output or an
    integer label vector; labels invoke the fused softmax cross-entropy head on
    the cached output. Returns ``(grads, input_grad)``.
    """
    stack = tuple(stack)
    if cache.stack != stack or cache.param_ids != _param_ids(params):
        raise InternalConsistencyError("forward cache does not belong to this stack/parameter set")
    upstream = np.asarray(upstream)
    if np.issubdtype(upstream.dtype, np.integer):
        _, g = softmax_xent(cache.output, upstream)
    else:
        g = upstream.astype(np.float64, copy=False)
        if g.shape != cache.output.shape:
            raise InternalConsistencyError(
                f"upstream gradient shape {g.shape} != cached output shape {cache.output.shape}")
    grads = [None] * len(stack)
    for i in range(len(stack) - 1, -1, -1):
        grads[i], g = _layer_backward(stack[i], params[i], cache.layer_caches[i], g)
    return grads, g


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DataError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise DataError(f"expected {b} labels, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_p[rows, labels].mean())
    d = np.exp(log_p)
    d[rows, labels] -= 1.0
    return loss, d / b


def loss_and_grads(stack, params, x, labels, train_mode=True, rng_seed=0):
    """Forward + softmax cross-entropy + backward in one call."""
    cache, logits = forward(stack, params, x, train_mode, rng_seed)
    loss, dlogits = softmax_xent(logits, labels)
    grads, input_grad = backward(stack, params, cache, dlogits)
    return loss, grads, input_grad


def sgd_step(params, grads, lr: float):
    """Return ``p - lr * g`` for every parameter; inputs are not modified."""
    if len(params) != len(grads):
        raise ConfigurationError("gradient set does not match parameter set")
    out = []
    for p_entry, g_entry in zip(params, grads):
        if len(p_entry) != len(g_entry):
            raise ConfigurationError("gradient set does not match parameter set")
        new_entry = []
        for p, g in zip(p_entry, g_entry):
            if p.shape != g.shape:
                raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingAborted("non-finite gradient; training aborted")
            new_entry.append(p - lr * g)
        out.append(new_entry)
    return out


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for entry in grads for g in entry)))


def clip_by_global_norm(grads, threshold: float):
    """Rescale all gradients by ``threshold / norm`` when the global norm exceeds it."""
    norm = global_norm(grads)
    if not np.isfinite(threshold) or norm <= threshold:
        return grads
    scale = threshold / norm
    return [[g * scale for g in entry] for entry in grads]


def add_grads(a, b):
    return [[x + y for x, y in zip(ea, eb)] for ea, eb in zip(a, b)]


def numeric_grads(loss_fn: Callable[[list], float], params, eps: float = 1e-5):
    """Central-difference gradient of ``loss_fn(params)`` w.r.t. every parameter."""
    out = []
    for entry in params:
        g_entry = []
        for a in entry:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = loss_fn(params)
                flat[j] = orig - eps
                f_minus = loss_fn(params)
                flat[j] = orig
                gflat[j] = (f_plus - f_minus) / (2.0 * eps)
            g_entry.append(g)
        out.append(g_entry)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    worst = 0.0
    for ea, en in zip(analytic, numeric):
        for a, n in zip(ea, en):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            if a.size:
                worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(stack, params, x, labels, eps: float = 1e-5, rng_seed: int = 0) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    work = [[a.copy() for a in entry] for entry in params]
    _, analytic, _ = loss_and_grads(stack, work, x, labels, train_mode=True, rng_seed=rng_seed)

    def loss_fn(p):
        _, logits = forward(stack, p, x, train_mode=True, rng_seed=rng_seed)
        return softmax_xent(logits, labels)[0]

    numeric = numeric_grads(loss_fn, work, eps)
    return max_relative_error(analytic, numeric)


def predict(stack, params, x, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    outs = []
    for start in range(0, len(x), batch_size):
        outs.append(forward(stack, params, x[start:start + batch_size], train_mode=False)[1])
    return np.concatenate(outs) if outs else np.zeros((0,))
