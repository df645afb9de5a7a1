"""Convergence-bound evaluation, full-gradient tracking and cut-activation distance estimates.

The right-hand sides are evaluated in closed form. The constants they need
(smoothness ``L``, gradient bounds ``G1``/``G2``, initial gaps ``delta``) are not
observable, so :func:`bound_report` estimates them from a run's trace. The
resulting comparison is a consistency check, not a certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import ClientShard, Dataset
from .errors import ConfigurationError, DataError
from .nn import core
from .nn.layers import flatten_params


@dataclass(frozen=True)
class BoundInputs:
    L: float
    G1: float
    G2: float
    h: int
    n: int
    T: int
    delta_c: float
    delta_s: float
    d_sum: float = 0.0

    def __post_init__(self):
        if self.L <= 0 or self.G1 < 0 or self.G2 < 0:
            raise ConfigurationError("L must be positive and G1, G2 non-negative")
        if self.h < 1 or self.n < 1 or self.T < 1:
            raise ConfigurationError("h, n and T must be >= 1")
        if self.delta_c < 0 or self.delta_s < 0 or self.d_sum < 0:
            raise ConfigurationError("delta_c, delta_s and d_sum must be non-negative")


def client_bound(bi: BoundInputs) -> float:
    """Average squared client gradient bound for the constant rate ``1/(L h sqrt(T))``."""
    h, root = bi.h, math.sqrt(bi.T)
    return 4 * bi.L * h * bi.delta_c / ((2 * h - 1) * root) + 2 * h * bi.G1 ** 2 / ((2 * h - 1) * root)


def server_bound(bi: BoundInputs) -> float:
    """Average squared server gradient bound for the constant rate ``1/(L n sqrt(T))``."""
    n, root = bi.n, math.sqrt(bi.T)
    return (4 * bi.L * n * bi.delta_s / ((2 * n - 1) * root)
            + 4 * bi.G2 ** 2 * bi.d_sum / ((2 * n - 1) * bi.T)
            + 2 * n * bi.G2 ** 2 / ((2 * n - 1) * root))


def lr_from_theory(role: str, L: float, h_or_n: int, T: int) -> float:
    if role not in ("client", "server"):
        raise ConfigurationError("role must be 'client' or 'server'")
    if L <= 0 or h_or_n < 1 or T < 1:
        raise ConfigurationError("L must be positive and h_or_n, T >= 1")
    return 1.0 / (L * h_or_n * math.sqrt(T))


# --- full-batch gradients ----------------------------------------------------

def _shard_grads(arch, x_c, a_c, x_s, features, labels):
    c_cache, cut = core.forward(arch.client_stack, x_c, features, train_mode=False)
    s_cache, logits = core.forward(arch.server_stack, x_s, cut, train_mode=False)
    loss_s, dlogits = core.softmax_xent(logits, labels)
    g_s, dcut = core.backward(arch.server_stack, x_s, s_cache, dlogits)
    if a_c is None:
        g_c, _ = core.backward(arch.client_stack, x_c, c_cache, dcut)
        return loss_s, flatten_params(g_c), loss_s, flatten_params(g_s)
    a_cache, aux_logits = core.forward(arch.aux_stack, a_c, cut, train_mode=False)
    loss_c, daux = core.softmax_xent(aux_logits, labels)
    g_a, dcut_aux = core.backward(arch.aux_stack, a_c, a_cache, daux)
    g_c, _ = core.backward(arch.client_stack, x_c, c_cache, dcut_aux)
    return loss_c, np.concatenate([flatten_params(g_c), flatten_params(g_a)]), loss_s, flatten_params(g_s)


def full_gradients(arch, x_c, a_c, x_s, train: Dataset, shards: Sequence[ClientShard]) -> dict:
    """Client and server objectives and gradients averaged over per-shard full-batch means.

    The client objective is the auxiliary loss when ``a_c`` is given and the
    end-to-end loss otherwise. The server objective is evaluated on the
    activations of the current client model.
    """
    shards = [s for s in shards if len(s)]
    if not shards:
        raise DataError("no non-empty shards")
    acc = None
    for shard in shards:
        parts = _shard_grads(arch, x_c, a_c, x_s, train.features[shard.indices], train.labels[shard.indices])
        acc = list(parts) if acc is None else [a + p for a, p in zip(acc, parts)]
    loss_c, grad_c, loss_s, grad_s = (v / len(shards) for v in acc)
    params_c = flatten_params(x_c) if a_c is None else np.concatenate([flatten_params(x_c), flatten_params(a_c)])
    return {
        "loss_c": float(loss_c), "loss_s": float(loss_s),
        "grad_c": grad_c, "grad_s": grad_s,
        "params_c": params_c, "params_s": flatten_params(x_s),
        "norm_sq_c": float(grad_c @ grad_c), "norm_sq_s": float(grad_s @ grad_s),
    }


def track_grad_norms(world, train: Dataset, shards: Sequence[ClientShard]) -> tuple[float, float]:
    """Squared full-batch gradient norms of the client and server objectives at ``world``."""
    fg = full_gradients(world.arch, world.x_c, world.a_c, world.eval_server("average"), train, shards)
    return fg["norm_sq_c"], fg["norm_sq_s"]


# --- activation distances ----------------------------------------------------

@dataclass
class ActivationHistogram:
    """Per-dimension binned counts of cut activations; ``edges`` has one row per dimension."""

    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def build(cls, activations: np.ndarray, edges: np.ndarray) -> "ActivationHistogram":
        acts = np.asarray(activations, dtype=np.float64).reshape(len(activations), -1)
        edges = np.asarray(edges, dtype=np.float64)
        if edges.ndim != 2 or edges.shape[0] != acts.shape[1]:
            raise DataError(f"edges for {edges.shape[0] if edges.ndim == 2 else '?'} dimensions, "
                            f"activations have {acts.shape[1]}")
        bins = edges.shape[1] - 1
        counts = np.empty((acts.shape[1], bins), dtype=np.int64)
        for j in range(acts.shape[1]):
            # clip so every sample lands in a bin even outside the shared range
            col = np.clip(acts[:, j], edges[j, 0], edges[j, -1])
            counts[j] = np.histogram(col, bins=edges[j])[0]
        return cls(edges, counts)

    @property
    def samples(self) -> int:
        return int(self.counts[0].sum())


def shared_edges(*activation_sets: np.ndarray, bins: int = 50) -> np.ndarray:
    """Per-dimension equal-width bin edges covering every given activation set."""
    flat = [np.asarray(a, dtype=np.float64).reshape(len(a), -1) for a in activation_sets]
    lo = np.min([f.min(axis=0) for f in flat], axis=0)
    hi = np.max([f.max(axis=0) for f in flat], axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return np.linspace(lo, hi, bins + 1, axis=1)


def random_projection(activations: np.ndarray, seed: int = 0) -> np.ndarray:
    """Project activations onto one seeded random unit direction, giving shape (N, 1)."""
    acts = np.asarray(activations, dtype=np.float64).reshape(len(activations), -1)
    v = np.random.default_rng([seed, 11]).normal(size=acts.shape[1])
    return (acts @ (v / np.linalg.norm(v)))[:, None]


def estimate_dct(hist_t: ActivationHistogram, hist_ref: ActivationHistogram) -> float:
    """Average over dimensions of the L1 distance between binned probability masses, in [0, 2]."""
    if hist_t.edges.shape != hist_ref.edges.shape or not np.array_equal(hist_t.edges, hist_ref.edges):
        raise DataError("histograms use different binning")
    p = hist_t.counts / hist_t.counts.sum(axis=1, keepdims=True)
    r = hist_ref.counts / hist_ref.counts.sum(axis=1, keepdims=True)
    return float(np.abs(p - r).sum(axis=1).mean())


def distance_series(activations: Sequence[dict], reference: dict, bins: int = 50,
                    projection: Optional[int] = None) -> list[dict]:
    """``d_{c,i}^t`` estimates for every stored round and client against per-client reference activations."""
    rows = []
    for t, per_client in enumerate(activations):
        for cid in sorted(per_client):
            acts, ref = per_client[cid], reference[cid]
            if projection is not None:
                acts, ref = random_projection(acts, projection), random_projection(ref, projection)
            edges = shared_edges(acts, ref, bins=bins)
            d = estimate_dct(ActivationHistogram.build(acts, edges), ActivationHistogram.build(ref, edges))
            rows.append({"round": t, "client": cid, "d": d})
    return rows


# --- constants and reports ---------------------------------------------------

def estimate_smoothness(grad_vectors: Sequence[np.ndarray], param_vectors: Sequence[np.ndarray]) -> float:
    """Largest observed ``|grad(x) - grad(y)| / |x - y|`` over consecutive trajectory points."""
    best = 0.0
    for k in range(1, len(grad_vectors)):
        dx = np.linalg.norm(param_vectors[k] - param_vectors[k - 1])
        if dx > 0:
            best = max(best, float(np.linalg.norm(grad_vectors[k] - grad_vectors[k - 1]) / dx))
    return best


def probe_smoothness(arch, x_c, a_c, x_s, train, shards, scale: float = 0.1, probes: int = 8,
                     seed: int = 0) -> tuple[float, float]:
    """Curvature ratios from random parameter perturbations around a point, as (L_c, L_s)."""
    from .nn.layers import unflatten_params

    rng = np.random.default_rng([seed, 12])
    base = full_gradients(arch, x_c, a_c, x_s, train, shards)
    lc = ls = 0.0
    n_client = len(flatten_params(x_c))
    for _ in range(probes):
        dc = rng.normal(size=base["params_c"].shape) * scale
        ds = rng.normal(size=base["params_s"].shape) * scale
        pc = base["params_c"] + dc
        new_xc = unflatten_params(pc[:n_client], x_c)
        new_ac = None if a_c is None else unflatten_params(pc[n_client:], a_c)
        new_xs = unflatten_params(base["params_s"] + ds, x_s)
        moved = full_gradients(arch, new_xc, new_ac, x_s, train, shards)
        lc = max(lc, float(np.linalg.norm(moved["grad_c"] - base["grad_c"]) / np.linalg.norm(dc)))
        moved_s = full_gradients(arch, x_c, a_c, new_xs, train, shards)
        ls = max(ls, float(np.linalg.norm(moved_s["grad_s"] - base["grad_s"]) / np.linalg.norm(ds)))
    return lc, ls


def bound_report(result, bins: int = 50, L: Optional[float] = None) -> dict:
    """Estimate the bound constants from a theory-tracked run and compare both sides.

    ``L`` defaults to the largest curvature ratio seen along the trajectory on
    either side.
    """
    th = result.theory
    if th is None or not th.grad_norm_sq_c:
        raise ConfigurationError("run was not executed with track_theory enabled")
    cfg = result.config
    T = len(th.grad_norm_sq_c)
    if L is None:
        L = max(estimate_smoothness(th.grad_vectors_c, th.param_vectors_c),
                estimate_smoothness(th.grad_vectors_s, th.param_vectors_s), 1e-12)
    final_acts = th.activations[-1] if th.activations else {}
    series = distance_series(th.activations, final_acts, bins=bins) if final_acts else []
    d_sum = float(sum(r["d"] for r in series))
    inputs = BoundInputs(
        L=L, G1=th.max_stoch_norm_c, G2=th.max_stoch_norm_s, h=cfg.h, n=cfg.K, T=T,
        delta_c=max(th.loss_c[0] - min(th.loss_c), 0.0),
        delta_s=max(th.loss_s[0] - min(th.loss_s), 0.0),
        d_sum=d_sum)
    lhs_c = float(np.mean(th.grad_norm_sq_c))
    lhs_s = float(np.mean(th.grad_norm_sq_s))
    rhs_c, rhs_s = client_bound(inputs), server_bound(inputs)
    return {
        "kind": "consistency-estimate",
        "T": T,
        "inputs": {k: float(getattr(inputs, k)) for k in ("L", "G1", "G2", "delta_c", "delta_s", "d_sum")}
        | {"h": inputs.h, "n": inputs.n},
        "client": {"avg_grad_norm_sq": lhs_c, "bound": rhs_c, "consistent": lhs_c <= rhs_c},
        "server": {"avg_grad_norm_sq": lhs_s, "bound": rhs_s, "consistent": lhs_s <= rhs_s},
        "lr_theory": {"client": lr_from_theory("client", L, inputs.h, T),
                      "server": lr_from_theory("server", L, inputs.n, T)},
        "grad_norm_sq_c": [float(v) for v in th.grad_norm_sq_c],
        "grad_norm_sq_s": [float(v) for v in th.grad_norm_sq_s],
        "d_series": series,
    }


def consistency_check(T_values: Sequence[int] = (25, 50, 100), seed: int = 0, h: int = 1, n: int = 5) -> list[dict]:
    """Run the smooth synthetic task at each horizon with the theory rate and compare bound sides.

    The client model is linear (no activation), so both objectives are smooth.
    ``L`` is measured by random probes at the initial point plus the trajectory
    curvature of a pilot run, then inflated by 2x as a safety margin.
    """
    from .algorithms import RunConfig, run_simulation
    from .data import IID, partition, synth_dataset
    from .ledger import Method
    from .nn.schedule import LrSchedule
    from .split import build_mlp_arch

    arch = build_mlp_arch(8, 4, cut_dim=8, server_hidden=8, client_relu=False)
    train = synth_dataset(seed, 400, 8, 4, separation=4.0)
    shards = partition(train, IID(), n, seed)
    x_c, a_c, x_s = arch.init(seed)
    lc, ls = probe_smoothness(arch, x_c, a_c, x_s, train, shards, seed=seed)
    pilot = run_simulation(arch, RunConfig(Method.CSE_FSL, n, T=10, B=20, h=h, lr=LrSchedule(0.05), seed=seed,
                                           track_theory=True), train, shards)
    L = 2.0 * max(lc, ls, estimate_smoothness(pilot.theory.grad_vectors_c, pilot.theory.param_vectors_c),
                  estimate_smoothness(pilot.theory.grad_vectors_s, pilot.theory.param_vectors_s))
    reports = []
    for T in T_values:
        lr = lr_from_theory("client", L, h, T)
        lr_s = lr_from_theory("server", L, n, T)
        cfg = RunConfig(Method.CSE_FSL, n, T=T, B=20, h=h, lr=LrSchedule(lr), lr_server=LrSchedule(lr_s),
                        seed=seed, track_theory=True)
        rep = bound_report(run_simulation(arch, cfg, train, shards), L=L)
        reports.append(rep)
    return reports
