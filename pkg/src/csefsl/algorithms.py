"""Training orchestration for CSE-FSL and the FSL_MC, FSL_OC and FSL_AN baselines.

All four methods run on the discrete-event engine in :mod:`csefsl.sim`.
Clients are driven by ``ClientBatchDone`` events. The server consumes smashed
batches from its FIFO data queue in arrival order. Client models are
aggregated at barriers once every participant's upload has arrived.

Per-method behaviour:

* CSE_FSL: local auxiliary-loss updates, one smashed upload every ``h``
  batches, a single server model, streaming aggregation.
* FSL_AN: like CSE_FSL with ``h = 1`` but one server replica per client and
  buffered aggregation.
* FSL_MC: per-batch upload and gradient download, one server replica per client.
* FSL_OC: as FSL_MC with a single shared server model and global-norm clipping.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .data import ClientShard, Dataset
from .errors import ConfigurationError, DeadlockError, ProtocolError, TrainingAborted
from .ledger import STORAGE_CONVENTIONS, CostModel, Ledger, Message, Method, as_method
from .nn import core
from .nn.layers import flatten_params, params_count_of, unflatten_params
from .nn.schedule import LrSchedule
from .sim import ClientProfile, DataQueue, EventKind, EventQueue, RunTrace
from .split import ModelSnapshot, SmashedBatch, SplitArchitecture, client_forward_cut, local_loss_and_grads
from . import split as split_mod

METRICS_COLUMNS = ["round", "comm_cumulative_units", "storage_units", "train_loss_c", "train_loss_s",
                   "test_top1", "wall_sim_time"]


@dataclass
class RunConfig:
    method: Method
    n: int
    T: int = 1
    B: int = 50
    h: int = 1
    C: Optional[int] = None
    K: Optional[int] = None
    lr: LrSchedule = field(default_factory=lambda: LrSchedule(0.1))
    lr_client: Optional[LrSchedule] = None
    lr_server: Optional[LrSchedule] = None
    clip_threshold: Optional[float] = None
    seed: int = 0
    server_step_time: float = 0.0
    stale_policy: str = "process"
    storage_convention: str = "table2"
    eval_server: str = "average"
    arrival_order: str = "ordered"
    eval_every: int = 1
    track_theory: bool = False

    def __post_init__(self):
        self.method = as_method(self.method)
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if self.K is None:
            self.K = self.n
        if not 1 <= self.K <= self.n:
            raise ConfigurationError(f"K must lie in [1, n], got {self.K}")
        if self.h < 1:
            raise ConfigurationError("h must be >= 1")
        if self.C is not None and self.C < 1:
            raise ConfigurationError("C must be >= 1")
        if self.T < 1 or self.B < 1:
            raise ConfigurationError("T and B must be >= 1")
        if self.method in (Method.FSL_MC, Method.FSL_OC, Method.FSL_AN):
            self.h = 1
        if self.method == Method.FSL_OC:
            if self.clip_threshold is None:
                self.clip_threshold = 1.0
            if self.clip_threshold <= 0:
                raise ConfigurationError("clip_threshold must be positive")
        elif self.clip_threshold is not None:
            raise ConfigurationError("clip_threshold applies only to fsl_oc")
        if self.stale_policy not in ("process", "drop"):
            raise ConfigurationError("stale_policy must be 'process' or 'drop'")
        if self.storage_convention not in STORAGE_CONVENTIONS:
            raise ConfigurationError(f"storage_convention must be one of {STORAGE_CONVENTIONS}")
        if self.eval_server not in ("average", "replica0"):
            raise ConfigurationError("eval_server must be 'average' or 'replica0'")
        if self.arrival_order not in ("ordered", "random"):
            raise ConfigurationError("arrival_order must be 'ordered' or 'random'")
        if self.server_step_time < 0:
            raise ConfigurationError("server_step_time must be non-negative")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")

    @property
    def client_lr(self) -> LrSchedule:
        return self.lr_client or self.lr

    @property
    def server_lr(self) -> LrSchedule:
        return self.lr_server or self.lr


@dataclass
class WorldState:
    arch: SplitArchitecture
    x_c: list
    a_c: Optional[list]
    servers: list
    round: int = 0

    @classmethod
    def initial(cls, arch: SplitArchitecture, method, n: int, seed: int) -> "WorldState":
        method = as_method(method)
        x_c, a_c, x_s = arch.init(seed)
        replicas = 1 if method.single_server else n
        return cls(arch, x_c, a_c if method.uses_aux else None, [x_s] * replicas, 0)

    def client_model(self):
        return [self.x_c] if self.a_c is None else [self.x_c, self.a_c]

    def eval_server(self, mode: str = "average"):
        if len(self.servers) == 1 or mode == "replica0":
            return self.servers[0]
        weights = [1.0 / len(self.servers)] * len(self.servers)
        return aggregate([ModelSnapshot("server", s, self.round) for s in self.servers], weights).params


@dataclass
class RoundMetrics:
    round: int
    train_loss_c: float
    train_loss_s: float
    test_top1: float
    test_loss: float
    comm_round_units: int
    comm_cumulative_units: int
    storage_units: int
    wall_sim_time: float
    smashed_uploads: int = 0
    server_steps: int = 0
    grad_norm_sq_c: float = float("nan")
    grad_norm_sq_s: float = float("nan")

    def row(self) -> list:
        return [self.round, self.comm_cumulative_units, self.storage_units, self.train_loss_c,
                self.train_loss_s, self.test_top1, self.wall_sim_time]


# --- aggregation -------------------------------------------------------------

def _check_congruent(reference, other):
    if len(reference) != len(other) or any(
            len(ea) != len(eb) or any(a.shape != b.shape for a, b in zip(ea, eb))
            for ea, eb in zip(reference, other)):
        raise ProtocolError("cannot aggregate parameter sets with different shapes")


def aggregate(snapshots: Sequence[ModelSnapshot], weights: Optional[Sequence[float]] = None) -> ModelSnapshot:
    """Elementwise weighted mean of congruent snapshots (uniform by default)."""
    if not snapshots:
        raise ProtocolError("nothing to aggregate")
    if weights is None:
        weights = [1.0 / len(snapshots)] * len(snapshots)
    if len(weights) != len(snapshots):
        raise ProtocolError("one weight per snapshot required")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ProtocolError(f"aggregation weights sum to {sum(weights)}, expected 1")
    acc = RunningAggregate()
    for snap, w in zip(snapshots, weights):
        acc.add(snap.params, w)
    first = snapshots[0]
    return ModelSnapshot(first.role, acc.result(), max(s.round for s in snapshots))


class RunningAggregate:
    """Weighted sum accumulated upload by upload; holds a single model copy."""

    def __init__(self):
        self.params = None
        self.count = 0

    def add(self, params, weight: float) -> None:
        if self.params is None:
            self.params = [[weight * a for a in entry] for entry in params]
        else:
            _check_congruent(self.params, params)
            self.params = [[acc + weight * a for acc, a in zip(ea, eb)] for ea, eb in zip(self.params, params)]
        self.count += 1

    def result(self):
        if self.params is None:
            raise ProtocolError("no uploads were aggregated")
        return self.params

    @property
    def size(self) -> int:
        return 0 if self.params is None else params_count_of(self.params)


# --- evaluation --------------------------------------------------------------

def evaluate_params(arch: SplitArchitecture, x_c, x_s, test: Dataset, batch_size: int = 512):
    """Top-1 accuracy and mean loss of the composite client -> server model (eval mode)."""
    correct, loss_sum = 0, 0.0
    for start in range(0, len(test), batch_size):
        xb = test.features[start:start + batch_size]
        yb = test.labels[start:start + batch_size]
        _, cut = core.forward(arch.client_stack, x_c, xb, train_mode=False)
        _, logits = core.forward(arch.server_stack, x_s, cut, train_mode=False)
        loss, _ = core.softmax_xent(logits, yb)
        loss_sum += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(test), loss_sum / len(test)


def evaluate(world: WorldState, test: Dataset, eval_server: str = "average"):
    return evaluate_params(world.arch, world.x_c, world.eval_server(eval_server), test)


# --- client state ------------------------------------------------------------

@dataclass
class _Client:
    cid: int
    x_c: list
    a_c: Optional[list]
    batches: list
    next_batch: int = 0
    pending: Optional[tuple] = None
    done: bool = False

    @property
    def model(self):
        return [self.x_c] if self.a_c is None else [self.x_c, self.a_c]


@dataclass
class TheoryTrace:
    grad_norm_sq_c: list = field(default_factory=list)
    grad_norm_sq_s: list = field(default_factory=list)
    grad_vectors_c: list = field(default_factory=list)
    param_vectors_c: list = field(default_factory=list)
    grad_vectors_s: list = field(default_factory=list)
    param_vectors_s: list = field(default_factory=list)
    loss_c: list = field(default_factory=list)
    loss_s: list = field(default_factory=list)
    max_stoch_norm_c: float = 0.0
    max_stoch_norm_s: float = 0.0
    activations: list = field(default_factory=list)  # per round: {client: activations}


@dataclass
class RunResult:
    config: RunConfig
    world: WorldState
    metrics: list
    ledger: Ledger
    trace: RunTrace
    peak_storage: int
    diverged: bool = False
    divergence_reason: str = ""
    theory: Optional[TheoryTrace] = None
    final_activations: Optional[dict] = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_top1 if self.metrics else float("nan")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for m in self.metrics:
            writer.writerow([_fmt(v) for v in m.row()])
        return buf.getvalue()

    def metrics_json(self) -> str:
        rows = [dict(zip(METRICS_COLUMNS, [_json_num(v) for v in m.row()])) for m in self.metrics]
        return json.dumps({"columns": METRICS_COLUMNS, "rows": rows, "diverged": self.diverged}, sort_keys=True,
                          indent=1)

    def accuracy_at_budget(self, budget: float) -> float:
        """Test accuracy of the last evaluated round whose cumulative traffic fits ``budget``."""
        acc = float("nan")
        for m in self.metrics:
            if m.comm_cumulative_units <= budget:
                acc = m.test_top1
        return acc


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


# --- the simulation ----------------------------------------------------------

class FslSimulation:
    """One training run of a single method on the discrete-event engine."""

    def __init__(self, arch: SplitArchitecture, config: RunConfig, train: Dataset, shards: Sequence[ClientShard],
                 test: Optional[Dataset] = None, profiles=None, world: Optional[WorldState] = None):
        if len(shards) != config.n:
            raise ConfigurationError(f"{len(shards)} shards for n={config.n} clients")
        if tuple(train.sample_shape) != tuple(arch.input_shape):
            raise ConfigurationError(f"dataset samples {train.sample_shape} do not match architecture input "
                                     f"{arch.input_shape}")
        self.arch = arch
        self.cfg = config
        self.method = config.method
        self.train = train
        self.test = test
        self.shards = list(shards)
        if profiles is None or isinstance(profiles, (ClientProfile, dict)):
            profiles = [ClientProfile.parse(profiles)] * config.n
        if len(profiles) != config.n:
            raise ConfigurationError("one client profile per client required")
        self.profiles = [ClientProfile.parse(p) for p in profiles]
        self.world = world or WorldState.initial(arch, config.method, config.n, config.seed)
        self.start_round = self.world.round

        self.events = EventQueue()
        self.dq = DataQueue()
        self.ledger = Ledger()
        self.trace = RunTrace()
        self.metrics: list[RoundMetrics] = []
        self.theory = TheoryTrace() if config.track_theory else None

        self._delay_rngs = [np.random.default_rng([config.seed, 7, i]) for i in range(config.n)]
        self._jitter_rngs = [np.random.default_rng([config.seed, 8, i]) for i in range(config.n)]
        self._clients: dict[int, _Client] = {}
        self._participants: list[int] = []
        self._server_busy = False
        self._barrier = 0
        self._n_barriers = 1
        self._arrived: dict[int, list] = {}
        self._running: Optional[RunningAggregate] = None
        self._loss_c: list[float] = []
        self._loss_s: list[float] = []
        self._round_uploads = 0
        self._round_steps = 0
        self._rounds_done = 0
        self._last_eval_round = -1
        self._comm_cumulative = 0

        client_size = params_count_of(self.world.x_c) + (params_count_of(self.world.a_c) if self.world.a_c else 0)
        self._client_model_size = client_size
        self._held = {"servers": sum(params_count_of(s) for s in self.world.servers),
                      "global": client_size, "uploads": 0}
        self.peak_storage = 0
        self._touch_storage()

    # -- storage ---------------------------------------------------------------
    def _touch_storage(self):
        self.peak_storage = max(self.peak_storage, sum(self._held.values()))

    @property
    def streaming(self) -> bool:
        return self.method == Method.CSE_FSL and self.cfg.storage_convention == "table2"

    # -- helpers ---------------------------------------------------------------
    def _profile_sample(self, cid: int, which: str) -> float:
        delay = getattr(self.profiles[cid], which)
        value = delay.sample(self._delay_rngs[cid])
        if which == "compute_delay" and self.cfg.arrival_order == "random":
            value *= float(self._jitter_rngs[cid].uniform(0.5, 1.5))
        return value

    def _batch_seed(self, cid: int, t: int, m: int) -> int:
        return int(np.random.SeedSequence([self.cfg.seed, 9, cid, t, m]).generate_state(1)[0])

    def _lr_c(self, t):
        return self.cfg.client_lr(t)

    def _lr_s(self, t):
        return self.cfg.server_lr(t)

    def _record(self, msg: Message):
        self.ledger.record(msg)

    # -- run -----------------------------------------------------------------
    def run(self) -> RunResult:
        diverged, reason = False, ""
        end_round = self.start_round + self.cfg.T
        self.events.schedule(self.events.clock, EventKind.ROUND_START, {"round": self.start_round})
        try:
            while True:
                ev = self.events.next()
                if ev is None:
                    break
                self._dispatch(ev)
            if self._rounds_done < self.cfg.T:
                raise DeadlockError(self._deadlock_dump())
            if self._last_eval_round != end_round - 1:
                self._evaluate_round(end_round - 1)
            # a saved world resumes at the next round's seeds
            self.world.round = end_round
        except TrainingAborted as exc:
            diverged, reason = True, str(exc)
            self._record_divergence()
        return RunResult(self.cfg, self.world, self.metrics, self.ledger, self.trace, self.peak_storage,
                         diverged, reason, self.theory, None)

    def run_round(self) -> RoundMetrics:
        """Process events until the current round has been aggregated and evaluated."""
        target = len(self.metrics) + 1
        if not self.events and self._rounds_done == 0:
            self.events.schedule(self.events.clock, EventKind.ROUND_START, {"round": self.world.round})
        while len(self.metrics) < target:
            ev = self.events.next()
            if ev is None:
                if self._rounds_done > len(self.metrics):
                    self._evaluate_round(self._rounds_done - 1 + self.start_round)
                    break
                raise DeadlockError(self._deadlock_dump())
            self._dispatch(ev)
        return self.metrics[-1]

    def _deadlock_dump(self) -> str:
        waiting = sorted(set(self._participants) - set(self._arrived))
        return (f"event queue empty after {self._rounds_done}/{self.cfg.T} rounds; barrier {self._barrier}, "
                f"waiting for uploads from clients {waiting}; data queue holds {len(self.dq)} batches")

    def _record_divergence(self):
        t = self.world.round
        self.metrics.append(RoundMetrics(t, float("nan"), float("nan"), float("nan"), float("nan"), 0,
                                         self._comm_cumulative, self.peak_storage, self.events.clock))

    def _dispatch(self, ev):
        kind = ev.kind
        if kind == EventKind.ROUND_START:
            self._on_round_start(ev)
        elif kind == EventKind.CLIENT_BATCH_DONE:
            self._on_batch_done(ev)
        elif kind == EventKind.SMASHED_ARRIVED:
            self._on_smashed(ev)
        elif kind == EventKind.SERVER_STEP_DONE:
            self._on_server_done(ev)
        elif kind == EventKind.CUT_GRAD_ARRIVED:
            self._on_cut_grad(ev)
        elif kind == EventKind.CLIENT_MODEL_ARRIVED:
            self._on_model_upload(ev)
        elif kind == EventKind.AGGREGATION_DUE:
            self._on_aggregation(ev)
        elif kind == EventKind.MODEL_ARRIVED:
            self._on_model_download(ev)
        elif kind == EventKind.EVALUATE:
            self._on_evaluate(ev)

    # -- round start -----------------------------------------------------------
    def _on_round_start(self, ev):
        t = ev.payload["round"]
        now = ev.time
        self.world.round = t
        self._participants = data_mod.sample_participants(self.cfg.n, self.cfg.K, t, self.cfg.seed)
        self.trace.append(ev, round=t, participants=self._participants)
        if self.theory is not None:
            self._track_theory(t)
        self._clients = {}
        max_batches = 0
        for cid in self._participants:
            bl = data_mod.batches(self.shards[cid], self.train, self.cfg.B, [self.cfg.seed, t, cid])
            max_batches = max(max_batches, len(bl))
            self._clients[cid] = _Client(cid, self.world.x_c, self.world.a_c, bl)
        per = self.cfg.C or max_batches
        self._n_barriers = -(-max_batches // per)
        self._barrier = 0
        self._arrived = {}
        self._running = None
        for cid in self._participants:
            self._record(Message.model_download(self.world.client_model(), cid, t, now))
        self._held["global"] = 0
        self._touch_storage()
        for cid in self._participants:
            arrive = now + self._profile_sample(cid, "downlink_latency")
            self.events.schedule(arrive + self._profile_sample(cid, "compute_delay"), EventKind.CLIENT_BATCH_DONE,
                                 {"client": cid, "round": t, "batch": 0})

    # -- client batches --------------------------------------------------------
    def _on_batch_done(self, ev):
        cid, t, m = ev.payload["client"], ev.payload["round"], ev.payload["batch"]
        client = self._clients[cid]
        mb = client.batches[m]
        seed = self._batch_seed(cid, t, m)
        self.trace.append(ev, client=cid, round=t, batch=m)
        if self.method.uses_aux:
            loss, g_c, g_a = local_loss_and_grads(self.arch, client.x_c, client.a_c, mb.features, mb.labels, seed)
            if self.theory is not None:
                self.theory.max_stoch_norm_c = max(self.theory.max_stoch_norm_c,
                                                   math.hypot(core.global_norm(g_c), core.global_norm(g_a)))
            lr = self._lr_c(t)
            client.x_c = core.sgd_step(client.x_c, g_c, lr)
            client.a_c = core.sgd_step(client.a_c, g_a, lr)
            self._loss_c.append(loss)
            if (m + 1) % self.cfg.h == 0:
                smashed = client_forward_cut(self.arch, client.x_c, mb.features, mb.labels, cid, t, m, True, seed)
                self._upload_smashed(smashed, ev.time)
            self._after_batch(client, m, ev.time)
        else:
            cache, act = core.forward(self.arch.client_stack, client.x_c, mb.features, True, seed)
            client.pending = (cache, m)
            self._upload_smashed(SmashedBatch(act, mb.labels.copy(), cid, t, m), ev.time)

    def _upload_smashed(self, smashed: SmashedBatch, now: float):
        self._record(Message.smashed_upload(smashed, now))
        self._round_uploads += 1
        arrive = now + self._profile_sample(smashed.client_id, "uplink_latency")
        self.events.schedule(arrive, EventKind.SMASHED_ARRIVED, smashed)

    def _after_batch(self, client: _Client, m: int, now: float):
        done = m + 1
        client.next_batch = done
        per = self.cfg.C or len(client.batches)
        if done == len(client.batches) or done % per == 0:
            if done == len(client.batches):
                client.done = True
            self._upload_model(client, now)
        else:
            self.events.schedule(now + self._profile_sample(client.cid, "compute_delay"),
                                 EventKind.CLIENT_BATCH_DONE,
                                 {"client": client.cid, "round": self.world.round, "batch": done})

    def _upload_model(self, client: _Client, now: float):
        t = self.world.round
        self._record(Message.model_upload(client.x_c, client.cid, t, now))
        if client.a_c is not None:
            self._record(Message.model_upload(client.a_c, client.cid, t, now, aux=True))
        arrive = now + self._profile_sample(client.cid, "uplink_latency")
        self.events.schedule(arrive, EventKind.CLIENT_MODEL_ARRIVED,
                             {"client": client.cid, "round": t, "barrier": self._barrier, "model": client.model})

    # -- server ----------------------------------------------------------------
    def _on_smashed(self, ev):
        smashed: SmashedBatch = ev.payload
        stale = smashed.round < self.world.round
        self.trace.append(ev, client=smashed.client_id, round=smashed.round, batch=smashed.batch_index, stale=stale)
        if stale and self.cfg.stale_policy == "drop" and self.method.uses_aux:
            return
        self.dq.enqueue(smashed)
        if not self._server_busy:
            self._serve(ev.time)

    def _serve(self, now: float):
        if self.cfg.server_step_time == 0:
            def step(s):
                cut_grad = self._server_process(s)
                if cut_grad is not None:
                    self._send_cut_grad(s, cut_grad, now)
            self.dq.drain(step)
        elif self.dq:
            s = self.dq.dequeue()
            cut_grad = self._server_process(s)
            self._server_busy = True
            self.events.schedule(now + self.cfg.server_step_time, EventKind.SERVER_STEP_DONE,
                                 {"smashed": s, "cut_grad": cut_grad})

    def _on_server_done(self, ev):
        s, cut_grad = ev.payload["smashed"], ev.payload["cut_grad"]
        self.trace.append(ev, client=s.client_id, round=s.round, batch=s.batch_index)
        if cut_grad is not None:
            self._send_cut_grad(s, cut_grad, ev.time)
        self._server_busy = False
        if self.dq:
            self._serve(ev.time)

    def _server_index(self, cid: int) -> int:
        return 0 if self.method.single_server else cid

    def _server_process(self, s: SmashedBatch):
        idx = self._server_index(s.client_id)
        params = self.world.servers[idx]
        loss, grads, cut_grad = split_mod.backprop_to_cut(self.arch, params, s)
        if self.method == Method.FSL_OC:
            grads = core.clip_by_global_norm(grads, self.cfg.clip_threshold)
        if self.theory is not None:
            self.theory.max_stoch_norm_s = max(self.theory.max_stoch_norm_s, core.global_norm(grads))
        self.world.servers[idx] = core.sgd_step(params, grads, self._lr_s(s.round))
        self._loss_s.append(loss)
        self._round_steps += 1
        if self.method.uses_aux:
            return None
        return cut_grad

    def _send_cut_grad(self, s: SmashedBatch, cut_grad, now: float):
        self._record(Message.cut_grad_download(cut_grad, s.client_id, s.round, now))
        arrive = now + self._profile_sample(s.client_id, "downlink_latency")
        self.events.schedule(arrive, EventKind.CUT_GRAD_ARRIVED,
                             {"client": s.client_id, "round": s.round, "batch": s.batch_index, "cut_grad": cut_grad})

    def _on_cut_grad(self, ev):
        cid, m = ev.payload["client"], ev.payload["batch"]
        client = self._clients[cid]
        self.trace.append(ev, client=cid, round=ev.payload["round"], batch=m)
        cache, pending_m = client.pending
        if pending_m != m:
            raise ProtocolError(f"client {cid} received gradient for batch {m} while waiting on {pending_m}")
        grads, _ = core.backward(self.arch.client_stack, client.x_c, cache, ev.payload["cut_grad"])
        if self.method == Method.FSL_OC:
            grads = core.clip_by_global_norm(grads, self.cfg.clip_threshold)
        client.x_c = core.sgd_step(client.x_c, grads, self._lr_c(self.world.round))
        client.pending = None
        self._after_batch(client, m, ev.time)

    # -- aggregation -----------------------------------------------------------
    def _on_model_upload(self, ev):
        cid = ev.payload["client"]
        self.trace.append(ev, client=cid, round=ev.payload["round"], barrier=ev.payload["barrier"])
        model = ev.payload["model"]
        weight = 1.0 / len(self._participants)
        if self.streaming:
            if self._running is None:
                self._running = RunningAggregate()
            packed = [entry for part in model for entry in part]
            self._running.add(packed, weight)
            self._held["uploads"] = self._running.size
        else:
            self._held["uploads"] += sum(params_count_of(p) for p in model)
        self._arrived[cid] = model
        self._touch_storage()
        if len(self._arrived) == len(self._participants):
            self.events.schedule(ev.time, EventKind.AGGREGATION_DUE,
                                 {"round": self.world.round, "barrier": self._barrier})

    def _on_aggregation(self, ev):
        t = ev.payload["round"]
        self.trace.append(ev, round=t, barrier=ev.payload["barrier"])
        n_client_layers = len(self.world.x_c)
        if self.streaming:
            packed = self._running.result()
        else:
            weights = [1.0 / len(self._participants)] * len(self._participants)
            snaps = [ModelSnapshot("client", [e for part in self._arrived[c] for e in part], t, c)
                     for c in sorted(self._arrived)]
            packed = aggregate(snaps, weights).params
        self.world.x_c = packed[:n_client_layers]
        if self.world.a_c is not None:
            self.world.a_c = packed[n_client_layers:]
        self._arrived = {}
        self._running = None
        self._held["uploads"] = 0
        self._held["global"] = self._client_model_size
        self._touch_storage()
        self._barrier += 1
        if self._barrier < self._n_barriers:
            for cid in self._participants:
                self._record(Message.model_download(self.world.client_model(), cid, t, ev.time))
            self._held["global"] = 0
            for cid in self._participants:
                self.events.schedule(ev.time + self._profile_sample(cid, "downlink_latency"),
                                     EventKind.MODEL_ARRIVED, {"client": cid, "round": t})
            return
        self._rounds_done += 1
        last = t == self.start_round + self.cfg.T - 1
        if not last:
            if (t - self.start_round + 1) % self.cfg.eval_every == 0:
                self.events.schedule(ev.time, EventKind.EVALUATE, {"round": t})
            else:
                self._close_round(t, evaluate=False)
            self.events.schedule(ev.time, EventKind.ROUND_START, {"round": t + 1})

    def _on_model_download(self, ev):
        cid = ev.payload["client"]
        client = self._clients[cid]
        self.trace.append(ev, client=cid, round=ev.payload["round"])
        client.x_c, client.a_c = self.world.x_c, self.world.a_c
        if client.done:
            self._upload_model(client, ev.time)
        else:
            self.events.schedule(ev.time + self._profile_sample(cid, "compute_delay"), EventKind.CLIENT_BATCH_DONE,
                                 {"client": cid, "round": self.world.round, "batch": client.next_batch})

    # -- evaluation ------------------------------------------------------------
    def _on_evaluate(self, ev):
        self.trace.append(ev, round=ev.payload["round"])
        self._evaluate_round(ev.payload["round"])

    def _evaluate_round(self, t):
        self._close_round(t, evaluate=True)

    def _close_round(self, t, evaluate: bool):
        if self.test is not None and evaluate:
            acc, test_loss = evaluate_params(self.arch, self.world.x_c,
                                             self.world.eval_server(self.cfg.eval_server), self.test)
        else:
            acc, test_loss = float("nan"), float("nan")
        window = (t, t + 1)
        comm_round = self.ledger.total(window)
        self._comm_cumulative = self.ledger.total()
        loss_c = self._loss_c if self.method.uses_aux else self._loss_s
        metrics = RoundMetrics(
            round=t,
            train_loss_c=float(np.mean(loss_c)) if loss_c else float("nan"),
            train_loss_s=float(np.mean(self._loss_s)) if self._loss_s else float("nan"),
            test_top1=acc, test_loss=test_loss,
            comm_round_units=comm_round, comm_cumulative_units=self._comm_cumulative,
            storage_units=self.peak_storage, wall_sim_time=self.events.clock,
            smashed_uploads=self._round_uploads, server_steps=self._round_steps)
        if self.theory is not None and self.theory.grad_norm_sq_c:
            metrics.grad_norm_sq_c = self.theory.grad_norm_sq_c[-1]
            metrics.grad_norm_sq_s = self.theory.grad_norm_sq_s[-1]
        self.metrics.append(metrics)
        self._last_eval_round = t
        self._loss_c, self._loss_s = [], []
        self._round_uploads = self._round_steps = 0
        if self.theory is not None:
            self._store_activations(t)

    # -- theory tracking -------------------------------------------------------
    def _track_theory(self, t):
        from .bounds import full_gradients
        fg = full_gradients(self.arch, self.world.x_c, self.world.a_c, self.world.eval_server("average"),
                            self.train, self.shards)
        th = self.theory
        th.grad_norm_sq_c.append(fg["norm_sq_c"])
        th.grad_norm_sq_s.append(fg["norm_sq_s"])
        th.grad_vectors_c.append(fg["grad_c"])
        th.param_vectors_c.append(fg["params_c"])
        th.grad_vectors_s.append(fg["grad_s"])
        th.param_vectors_s.append(fg["params_s"])
        th.loss_c.append(fg["loss_c"])
        th.loss_s.append(fg["loss_s"])

    def _store_activations(self, t):
        acts = {}
        for cid in self._participants:
            idx = self.shards[cid].indices
            _, cut = core.forward(self.arch.client_stack, self.world.x_c, self.train.features[idx], train_mode=False)
            acts[cid] = cut.reshape(len(idx), -1)
        self.theory.activations.append(acts)


# --- public entry points -----------------------------------------------------

def run_simulation(arch, config: RunConfig, train: Dataset, shards, test=None, profiles=None, world=None) -> RunResult:
    """Run ``config.T`` global rounds and return metrics, ledger and trace."""
    return FslSimulation(arch, config, train, shards, test, profiles, world).run()


def _round(sim: FslSimulation, expected) -> tuple[WorldState, RoundMetrics]:
    if sim.method not in expected:
        raise ConfigurationError(f"simulation runs {sim.method.value}, not {[m.value for m in expected]}")
    metrics = sim.run_round()
    return sim.world, metrics


def cse_fsl_round(sim: FslSimulation):
    return _round(sim, (Method.CSE_FSL,))


def fsl_mc_round(sim: FslSimulation):
    return _round(sim, (Method.FSL_MC,))


def fsl_oc_round(sim: FslSimulation):
    return _round(sim, (Method.FSL_OC,))


def fsl_an_round(sim: FslSimulation):
    return _round(sim, (Method.FSL_AN,))


def cost_model_for(result: RunResult, d_size: int) -> CostModel:
    cfg = result.config
    return CostModel.for_arch(cfg.method, result.world.arch, d_size, cfg.K, cfg.h)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(world: WorldState, path) -> None:
    doc = {
        "round": world.round,
        "x_c": flatten_params(world.x_c).tolist(),
        "a_c": None if world.a_c is None else flatten_params(world.a_c).tolist(),
        "servers": [flatten_params(s).tolist() for s in world.servers],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(arch: SplitArchitecture, path) -> WorldState:
    with open(path) as f:
        doc = json.load(f)
    x_c0, a_c0, x_s0 = arch.init(0)
    x_c = unflatten_params(np.asarray(doc["x_c"]), x_c0)
    a_c = None if doc["a_c"] is None else unflatten_params(np.asarray(doc["a_c"]), a_c0)
    servers = [unflatten_params(np.asarray(s), x_s0) for s in doc["servers"]]
    return WorldState(arch, x_c, a_c, servers, doc["round"])
