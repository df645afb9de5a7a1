"""Deterministic discrete-event engine: event queue, server data queue, delay profiles, traces."""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np

from .errors import ConfigurationError, SchedulerError


class EventKind(str, Enum):
    ROUND_START = "RoundStart"
    CLIENT_BATCH_DONE = "ClientBatchDone"
    SMASHED_ARRIVED = "SmashedArrived"
    CUT_GRAD_ARRIVED = "CutGradArrived"
    SERVER_STEP_DONE = "ServerStepDone"
    CLIENT_MODEL_ARRIVED = "ClientModelArrived"
    AGGREGATION_DUE = "AggregationDue"
    MODEL_ARRIVED = "ModelArrived"
    EVALUATE = "Evaluate"


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    """Min-heap of events ordered by ``(time, seq)`` with a monotone clock."""

    def __init__(self):
        self._heap: list[Event] = []
        self._next_seq = 0
        self.clock = 0.0

    def schedule(self, time: float, kind: EventKind, payload=None, seq: Optional[int] = None) -> Event:
        if time < self.clock:
            raise SchedulerError(f"event {kind} at t={time} precedes clock t={self.clock}")
        if seq is None:
            seq = self._next_seq
        self._next_seq = max(self._next_seq, seq + 1)
        event = Event(float(time), seq, kind, payload)
        heapq.heappush(self._heap, event)
        return event

    def next(self) -> Optional[Event]:
        """Pop the earliest event, or ``None`` when the run is complete."""
        if not self._heap:
            return None
        event = heapq.heappop(self._heap)
        self.clock = event.time
        return event

    def peek(self) -> Optional[Event]:
        return self._heap[0] if self._heap else None

    def pending(self) -> list[Event]:
        return sorted(self._heap)

    def __len__(self):
        return len(self._heap)


class DataQueue:
    """Server FIFO of smashed batches; each element is dequeued exactly once."""

    def __init__(self):
        self._items = deque()
        self.enqueued = 0
        self.dequeued = 0

    def enqueue(self, smashed) -> None:
        self._items.append(smashed)
        self.enqueued += 1

    def dequeue(self):
        item = self._items.popleft()
        self.dequeued += 1
        return item

    def drain(self, server_step_fn: Callable[[Any], Any]) -> int:
        """Apply ``server_step_fn`` to every queued batch in FIFO order; returns the count."""
        processed = 0
        while self._items:
            server_step_fn(self.dequeue())
            processed += 1
        return processed

    def __len__(self):
        return len(self._items)

    def __bool__(self):
        return bool(self._items)


@dataclass(frozen=True)
class Delay:
    """A non-negative delay: constant, uniform(low, high) or lognormal(mean, sigma)."""

    dist: str = "constant"
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.dist not in ("constant", "uniform", "lognormal"):
            raise ConfigurationError(f"unknown delay distribution {self.dist!r}")
        if self.dist == "constant" and self.value < 0:
            raise ConfigurationError("delays must be non-negative")
        if self.dist == "uniform" and not 0 <= self.low <= self.high:
            raise ConfigurationError("uniform delay needs 0 <= low <= high")
        if self.dist == "lognormal" and self.sigma < 0:
            raise ConfigurationError("lognormal sigma must be non-negative")

    @classmethod
    def parse(cls, spec) -> "Delay":
        if isinstance(spec, Delay):
            return spec
        if spec is None:
            return cls()
        if isinstance(spec, (int, float)):
            return cls("constant", float(spec))
        return cls(**spec)

    @property
    def is_zero(self) -> bool:
        return self.dist == "constant" and self.value == 0.0

    def sample(self, rng: np.random.Generator) -> float:
        if self.dist == "constant":
            return self.value
        if self.dist == "uniform":
            return float(rng.uniform(self.low, self.high))
        return float(rng.lognormal(self.mean, self.sigma))


@dataclass(frozen=True)
class ClientProfile:
    compute_delay: Delay = Delay()
    uplink_latency: Delay = Delay()
    downlink_latency: Delay = Delay()

    @classmethod
    def parse(cls, spec) -> "ClientProfile":
        if isinstance(spec, ClientProfile):
            return spec
        spec = spec or {}
        return cls(Delay.parse(spec.get("compute_delay")), Delay.parse(spec.get("uplink_latency")),
                   Delay.parse(spec.get("downlink_latency")))


def _jsonable(x):
    if isinstance(x, Enum):
        return x.value
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


class RunTrace:
    """Ordered record of processed events."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, event: Event, **info) -> None:
        rec = {"time": event.time, "seq": event.seq, "kind": event.kind.value}
        rec.update({k: _jsonable(v) for k, v in info.items()})
        self.records.append(rec)

    def kinds(self) -> list[str]:
        return [r["kind"] for r in self.records]

    def of_kind(self, kind: EventKind) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind.value]

    def to_jsonl(self, path=None) -> str:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def __len__(self):
        return len(self.records)
