"""Finite-difference checks for every layer type and both composite split paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import core
from .nn.layers import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LocalResponseNorm,
    MaxPool2D,
    ReLU,
    init_params,
)
from .split import build_small_cnn_arch, local_loss_and_grads

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _image_case(middle, channels=3, hw=6, classes=3):
    """Conv feeding the layer under test, then a dense readout."""
    from .nn.layers import infer_shapes
    stack = (Conv2D(3, 3, 2, channels, "same"),) + tuple(middle)
    out = infer_shapes(stack, (2, hw, hw))[-1]
    return stack + (Flatten(), Dense(int(np.prod(out)), classes)), (2, hw, hw), classes


LAYER_CASES = {
    "dense": lambda: ((Dense(5, 4), Dense(4, 3)), (5,), 3),
    "dense_nobias": lambda: ((Dense(5, 4, False), Dense(4, 3)), (5,), 3),
    "relu": lambda: ((Dense(5, 6), ReLU(), Dense(6, 3)), (5,), 3),
    "flatten": lambda: _image_case(()),
    "conv_same": lambda: _image_case((Conv2D(3, 3, 3, 2, "same"),)),
    "conv_valid": lambda: _image_case((Conv2D(3, 3, 3, 2, "valid"),)),
    "conv_stride2": lambda: _image_case((Conv2D(2, 2, 3, 2, "valid", 2),)),
    "conv_1x1": lambda: _image_case((Conv2D(1, 1, 3, 2, "valid"),)),
    "maxpool": lambda: _image_case((MaxPool2D(2, 2),)),
    "lrn": lambda: _image_case((LocalResponseNorm(depth_radius=2, alpha_n=0.1, beta_n=0.75, bias_n=1.0),),
                               channels=6),
    "dropout": lambda: ((Dense(5, 6), Dropout(0.25), Dense(6, 3)), (5,), 3),
}


def _batch(rng, shape, classes, b=4):
    return rng.normal(size=(b, *shape)), rng.integers(0, classes, size=b)


def check_layer(name: str, seed: int, eps: float = 1e-5) -> CheckResult:
    stack, shape, classes = LAYER_CASES[name]()
    rng = np.random.default_rng([seed, 21])
    x, y = _batch(rng, shape, classes)
    params = init_params(stack, seed)
    return CheckResult(name, seed, core.grad_check(stack, params, x, y, eps=eps, rng_seed=seed))


def _composite_arch():
    return build_small_cnn_arch((1, 6, 6), num_classes=3, channels=2)


def check_client_aux(seed: int, eps: float = 1e-5) -> CheckResult:
    """Client + auxiliary head under the local loss."""
    arch = _composite_arch()
    x_c, a_c, _ = arch.init(seed)
    rng = np.random.default_rng([seed, 22])
    x, y = _batch(rng, arch.input_shape, arch.num_classes)
    _, g_c, g_a = local_loss_and_grads(arch, x_c, a_c, x, y, seed)
    split_at = len(x_c)
    work = [[a.copy() for a in e] for e in x_c + a_c]

    def loss_fn(p):
        return local_loss_and_grads(arch, p[:split_at], p[split_at:], x, y, seed)[0]

    numeric = core.numeric_grads(loss_fn, work, eps)
    return CheckResult("client+aux", seed, core.max_relative_error(g_c + g_a, numeric))


def check_client_server(seed: int, eps: float = 1e-5) -> CheckResult:
    """Client + server end to end, with the client gradient routed through the cut."""
    from .split import backprop_to_cut, client_forward_cut
    arch = _composite_arch()
    x_c, _, x_s = arch.init(seed)
    rng = np.random.default_rng([seed, 23])
    x, y = _batch(rng, arch.input_shape, arch.num_classes)
    cache, cut = core.forward(arch.client_stack, x_c, x, True, seed)
    smashed = client_forward_cut(arch, x_c, x, y, rng_seed=seed)
    _, g_s, cut_grad = backprop_to_cut(arch, x_s, smashed)
    g_c, _ = core.backward(arch.client_stack, x_c, cache, cut_grad)
    split_at = len(x_c)
    work = [[a.copy() for a in e] for e in x_c + x_s]

    def loss_fn(p):
        _, act = core.forward(arch.client_stack, p[:split_at], x, True, seed)
        _, logits = core.forward(arch.server_stack, p[split_at:], act, True, 0)
        return core.softmax_xent(logits, y)[0]

    numeric = core.numeric_grads(loss_fn, work, eps)
    return CheckResult("client+server", seed, core.max_relative_error(g_c + g_s, numeric))


def run_all(seeds: int = 20) -> list[CheckResult]:
    results = []
    for seed in range(seeds):
        for name in LAYER_CASES:
            results.append(check_layer(name, seed))
        results.append(check_client_aux(seed))
        results.append(check_client_server(seed))
    return results


def summarize(results) -> dict:
    """Worst error per check name."""
    out = {}
    for r in results:
        out[r.name] = max(out.get(r.name, 0.0), r.max_rel_error)
    return out
