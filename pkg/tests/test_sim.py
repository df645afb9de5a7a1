import json

import numpy as np
import pytest

from csefsl.algorithms import RunConfig, run_simulation
from csefsl.data import IID, partition, synth_dataset
from csefsl.errors import ConfigurationError, DeadlockError, SchedulerError
from csefsl.ledger import MessageKind
from csefsl.sim import ClientProfile, DataQueue, Delay, EventKind, EventQueue
from csefsl.split import SmashedBatch, build_mlp_arch, server_loss_step


def test_events_delivered_in_time_order():
    q = EventQueue()
    for t in (3.0, 1.0, 2.0):
        q.schedule(t, EventKind.EVALUATE, t)
    assert [q.next().payload for _ in range(3)] == [1.0, 2.0, 3.0]
    assert q.next() is None


def test_seq_breaks_ties():
    q = EventQueue()
    q.schedule(1.0, EventKind.EVALUATE, "five", seq=5)
    q.schedule(1.0, EventKind.EVALUATE, "four", seq=4)
    assert q.next().payload == "four"


def test_time_regression_is_fatal():
    q = EventQueue()
    q.schedule(2.0, EventKind.EVALUATE)
    q.next()
    with pytest.raises(SchedulerError):
        q.schedule(1.0, EventKind.EVALUATE)


def test_drain_empty_queue():
    calls = []
    assert DataQueue().drain(calls.append) == 0
    assert calls == []


def test_drain_matches_hand_chained_steps():
    arch = build_mlp_arch(4, 3)
    _, _, x_s = arch.init(0)
    rng = np.random.default_rng(0)
    batches = [SmashedBatch(rng.normal(size=(2, 16)), np.array([0, 2]), i, 0, i) for i in range(3)]
    dq = DataQueue()
    for b in batches:
        dq.enqueue(b)
    state = {"p": x_s, "order": []}

    def step(s):
        state["order"].append(s.client_id)
        state["p"] = server_loss_step(arch, state["p"], s, 0.1)[1]

    assert dq.drain(step) == 3 and len(dq) == 0
    assert state["order"] == [0, 1, 2]
    ref = x_s
    for b in batches:
        ref = server_loss_step(arch, ref, b, 0.1)[1]
    for a, b in zip(state["p"], ref):
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


def test_delay_parsing_and_validation():
    assert Delay.parse(None).is_zero
    assert Delay.parse(0.5) == Delay("constant", 0.5)
    assert Delay.parse({"dist": "uniform", "low": 0, "high": 1}).dist == "uniform"
    for bad in (-1.0, {"dist": "uniform", "low": 2, "high": 1}, {"dist": "pareto"}):
        with pytest.raises(ConfigurationError):
            Delay.parse(bad)
    rng = np.random.default_rng(0)
    assert all(Delay("lognormal", mean=0, sigma=1).sample(rng) >= 0 for _ in range(100))


def _world(n=3, samples=60):
    full = synth_dataset(0, samples, 8, 4, 5.0)
    return build_mlp_arch(8, 4), full, partition(full, IID(), n, 0)


def test_minimum_delay_client_arrives_first():
    arch, full, shards = _world()
    profiles = [ClientProfile(compute_delay=Delay("constant", d)) for d in (3.0, 1.0, 2.0)]
    r = run_simulation(arch, RunConfig("cse_fsl", 3, T=1, B=10), full, shards, profiles=profiles)
    arrivals = r.trace.of_kind(EventKind.SMASHED_ARRIVED)
    assert arrivals[0]["client"] == 1
    # server processes in arrival order, not client-id order
    first = {}
    for a in arrivals:
        first.setdefault(a["client"], a["time"])
    assert first == {1: 1.0, 2: 2.0, 0: 3.0}
    assert list(first) == [1, 2, 0]


def test_single_client_zero_delay_is_synchronous_order():
    arch, full, shards = _world(1, 40)
    r = run_simulation(arch, RunConfig("fsl_mc", 1, T=1, B=10), full, shards)
    per_batch = ["ClientBatchDone", "SmashedArrived", "CutGradArrived"]
    assert r.trace.kinds() == ["RoundStart"] + per_batch * 4 + ["ClientModelArrived", "AggregationDue"]


def test_trace_is_deterministic_and_conserves_uploads():
    arch, full, shards = _world()
    profile = ClientProfile(compute_delay=Delay("uniform", low=0.1, high=1.0),
                            uplink_latency=Delay("lognormal", mean=-1, sigma=0.5))
    cfg = RunConfig("cse_fsl", 3, T=2, B=10, h=2, seed=5)
    a = run_simulation(arch, cfg, full, shards, profiles=profile)
    b = run_simulation(arch, cfg, full, shards, profiles=profile)
    assert a.trace.to_jsonl() == b.trace.to_jsonl()
    assert a.ledger.to_csv() == b.ledger.to_csv()
    assert len(a.trace.of_kind(EventKind.SMASHED_ARRIVED)) == a.ledger.count(MessageKind.SMASHED_UPLOAD)
    times = [rec["time"] for rec in a.trace.records]
    assert times == sorted(times)
    json.loads(a.trace.to_jsonl().splitlines()[0])


def test_lost_upload_deadlocks_with_diagnostic(monkeypatch):
    arch, full, shards = _world()
    from csefsl.algorithms import FslSimulation

    original = FslSimulation._on_model_upload

    def drop_client_two(self, ev):
        if ev.payload["client"] != 2:
            original(self, ev)

    monkeypatch.setattr(FslSimulation, "_on_model_upload", drop_client_two)
    with pytest.raises(DeadlockError, match=r"waiting for uploads from clients \[2\]"):
        run_simulation(arch, RunConfig("cse_fsl", 3, T=1, B=10), full, shards)
