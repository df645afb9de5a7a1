import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csefsl.algorithms import RunConfig, WorldState, run_simulation
from csefsl.bounds import (
    ActivationHistogram,
    BoundInputs,
    bound_report,
    client_bound,
    distance_series,
    estimate_dct,
    estimate_smoothness,
    full_gradients,
    lr_from_theory,
    random_projection,
    server_bound,
    shared_edges,
    track_grad_norms,
)
from csefsl.errors import ConfigurationError, DataError
from csefsl.nn import core
from csefsl.nn.layers import flatten_params
from csefsl.nn.schedule import LrSchedule
from csefsl.split import build_mlp_arch


def _bi(**kw):
    base = dict(L=1.0, G1=1.0, G2=1.0, h=1, n=1, T=100, delta_c=1.0, delta_s=1.0, d_sum=0.0)
    base.update(kw)
    return BoundInputs(**base)


def test_client_bound_hand_value():
    assert abs(client_bound(_bi()) - 0.6) < 1e-12


def test_server_bound_hand_value():
    assert abs(server_bound(_bi()) - 0.6) < 1e-12


def test_quadrupling_T_halves_client_bound():
    for h in (1, 3, 7):
        b = _bi(h=h, L=2.5, G1=0.7, delta_c=3.0)
        assert client_bound(b.__class__(**{**b.__dict__, "T": 400})) == pytest.approx(client_bound(b) / 2, rel=1e-12)


def test_client_bound_large_h_limit():
    L, dc, g1, T = 2.0, 0.5, 1.5, 64
    limit = (4 * L * dc + 2 * g1 ** 2) / (2 * math.sqrt(T))
    assert client_bound(_bi(L=L, delta_c=dc, G1=g1, T=T, h=10 ** 9)) == pytest.approx(limit, rel=1e-8)


def test_d_sum_enters_linearly_in_middle_term():
    base = server_bound(_bi(n=4, d_sum=0.0))
    one = server_bound(_bi(n=4, d_sum=3.0)) - base
    two = server_bound(_bi(n=4, d_sum=6.0)) - base
    assert two == pytest.approx(2 * one, rel=1e-12)
    assert one == pytest.approx(4 * 3.0 / (7 * 100), rel=1e-12)


def test_single_client_server_bound_matches_client_structure():
    for L, d, g, T in ((1.0, 1.0, 1.0, 100), (3.0, 0.2, 2.0, 9)):
        s = server_bound(_bi(n=1, L=L, delta_s=d, G2=g, T=T))
        c = client_bound(_bi(h=1, L=L, delta_c=d, G1=g, T=T))
        assert s == pytest.approx(c, rel=1e-12)


def test_bounds_strictly_decrease_in_T():
    vals = [(client_bound(_bi(T=T, h=3)), server_bound(_bi(T=T, n=3, d_sum=2.0))) for T in range(1, 50)]
    for (c0, s0), (c1, s1) in zip(vals, vals[1:]):
        assert c1 < c0 and s1 < s0


def test_bound_inputs_validation():
    with pytest.raises(ConfigurationError):
        _bi(L=0.0)
    with pytest.raises(ConfigurationError):
        _bi(h=0)
    with pytest.raises(ConfigurationError):
        _bi(d_sum=-1.0)


def test_lr_from_theory():
    assert lr_from_theory("client", 1, 1, 1) == 1.0
    assert lr_from_theory("server", 2, 5, 100) == pytest.approx(0.01)
    assert lr_from_theory("client", 3, 2, 10) < lr_from_theory("client", 2, 2, 10)
    assert lr_from_theory("client", 2, 3, 10) < lr_from_theory("client", 2, 2, 10)
    assert lr_from_theory("client", 2, 2, 11) < lr_from_theory("client", 2, 2, 10)
    with pytest.raises(ConfigurationError):
        lr_from_theory("aux", 1, 1, 1)


# --- distances -------------------------------------------------------------------

def _hist(acts, edges):
    return ActivationHistogram.build(acts, edges)


def test_identical_histograms_distance_zero():
    a = np.random.default_rng(0).normal(size=(500, 3))
    e = shared_edges(a, bins=20)
    assert estimate_dct(_hist(a, e), _hist(a, e)) == 0.0


def test_disjoint_support_distance_two():
    a = np.random.default_rng(0).uniform(0, 1, size=(300, 2))
    b = a + 5.0
    e = shared_edges(a, b, bins=20)
    assert estimate_dct(_hist(a, e), _hist(b, e)) == pytest.approx(2.0)


def test_gaussian_overlap_matches_integral():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, (100_000, 1)), rng.normal(1, 1, (100_000, 1))
    e = shared_edges(a, b, bins=1000)
    est = estimate_dct(_hist(a, e), _hist(b, e))
    z = np.linspace(-10, 11, 200_001)
    p = np.exp(-z ** 2 / 2) / math.sqrt(2 * math.pi)
    q = np.exp(-(z - 1) ** 2 / 2) / math.sqrt(2 * math.pi)
    integral = float(np.abs(p - q).sum() * (z[1] - z[0]))
    assert integral == pytest.approx(2 * math.erf(0.5 / math.sqrt(2)), rel=1e-6)
    assert abs(est - integral) / integral < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 30))
def test_dct_is_a_pseudometric(seed, bins):
    rng = np.random.default_rng(seed)
    sets = [rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), size=(rng.integers(5, 200), 2)) for _ in range(3)]
    e = shared_edges(*sets, bins=bins)
    h = [_hist(s, e) for s in sets]
    d = lambda i, j: estimate_dct(h[i], h[j])  # noqa: E731
    assert d(0, 1) == pytest.approx(d(1, 0), abs=1e-15)
    assert 0.0 <= d(0, 1) <= 2.0 + 1e-12
    assert d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12
    assert sum(h[0].counts[0]) == h[0].samples == len(sets[0])


def test_binning_mismatch_is_rejected():
    a = np.random.default_rng(0).normal(size=(50, 2))
    with pytest.raises(DataError):
        estimate_dct(_hist(a, shared_edges(a, bins=10)), _hist(a, shared_edges(a, bins=11)))
    with pytest.raises(DataError):
        _hist(a, shared_edges(a[:, :1], bins=10))


def test_random_projection_and_series():
    acts = np.random.default_rng(0).normal(size=(40, 5))
    assert random_projection(acts, 3).shape == (40, 1)
    np.testing.assert_array_equal(random_projection(acts, 3), random_projection(acts, 3))
    rows = distance_series([{0: acts, 1: acts}], {0: acts, 1: acts + 1000}, bins=8, projection=1)
    assert [r["d"] for r in rows] == [0.0, pytest.approx(2.0)]


def test_smoothness_of_quadratic():
    # grad of 0.5 * 3 x^2 is 3x
    xs = [np.array([v]) for v in (1.0, 0.5, -2.0)]
    assert estimate_smoothness([3 * x for x in xs], xs) == pytest.approx(3.0)


# --- gradient tracking -------------------------------------------------------------

def test_full_gradient_matches_whole_dataset(synth_world):
    train, _, shards = synth_world
    arch = build_mlp_arch(8, 4)
    world = WorldState.initial(arch, "fsl_mc", 5, 3)
    fg = full_gradients(arch, world.x_c, None, world.servers[0], train, shards)
    idx = np.concatenate([s.indices for s in shards])
    _, g, _ = core.loss_and_grads(arch.client_stack + arch.server_stack, world.x_c + world.servers[0],
                                  train.features[idx], train.labels[idx])
    g_c = flatten_params(g[:len(world.x_c)])
    g_s = flatten_params(g[len(world.x_c):])
    np.testing.assert_allclose(fg["grad_c"], g_c, atol=1e-14)
    assert fg["norm_sq_c"] == pytest.approx(float(g_c @ g_c), rel=1e-12)
    assert fg["norm_sq_s"] == pytest.approx(float(g_s @ g_s), rel=1e-12)
    assert track_grad_norms(world, train, shards) == pytest.approx((fg["norm_sq_c"], fg["norm_sq_s"]))


def test_theory_trace_length_and_report(synth_world):
    train, _, shards = synth_world
    cfg = RunConfig("cse_fsl", 5, T=3, B=20, lr=LrSchedule(0.05), track_theory=True)
    r = run_simulation(build_mlp_arch(8, 4), cfg, train, shards)
    assert len(r.theory.grad_norm_sq_c) == len(r.theory.grad_norm_sq_s) == 3
    rep = bound_report(r, bins=10)
    assert rep["T"] == 3 and rep["inputs"]["L"] > 0
    assert len(rep["d_series"]) == 3 * 5
    # the final round is the reference
    assert all(row["d"] == 0.0 for row in rep["d_series"] if row["round"] == 2)


def test_report_requires_tracking(synth_world):
    train, _, shards = synth_world
    r = run_simulation(build_mlp_arch(8, 4), RunConfig("cse_fsl", 5, T=1, B=20), train, shards)
    with pytest.raises(ConfigurationError):
        bound_report(r)
