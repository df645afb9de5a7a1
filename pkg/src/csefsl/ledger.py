"""Message taxonomy and exact communication/storage accounting.

Sizes are in scalar-parameter units. Closed forms use the per-epoch cost
symbols: ``q`` scalars per smashed sample, ``alpha`` the client-side fraction
of the transmitted model, ``w_size`` the full model, ``a_size`` the auxiliary
head, ``d_size`` samples per client per epoch, ``n`` participating clients and
``h`` the smashed-upload period.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ConfigurationError

Number = Union[int, float, Fraction]


class Method(str, Enum):
    CSE_FSL = "cse_fsl"
    FSL_MC = "fsl_mc"
    FSL_OC = "fsl_oc"
    FSL_AN = "fsl_an"

    @property
    def uses_aux(self) -> bool:
        return self in (Method.CSE_FSL, Method.FSL_AN)

    @property
    def single_server(self) -> bool:
        return self in (Method.CSE_FSL, Method.FSL_OC)


def as_method(method) -> Method:
    try:
        return Method(method)
    except ValueError:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {[m.value for m in Method]}") from None


class MessageKind(str, Enum):
    SMASHED_UPLOAD = "SmashedUpload"
    CUT_GRAD_DOWNLOAD = "CutGradDownload"
    CLIENT_MODEL_UPLOAD = "ClientModelUpload"
    AUX_MODEL_UPLOAD = "AuxModelUpload"
    MODEL_DOWNLOAD = "ModelDownload"


MODEL_KINDS = (MessageKind.CLIENT_MODEL_UPLOAD, MessageKind.AUX_MODEL_UPLOAD, MessageKind.MODEL_DOWNLOAD)


def _params_size(params) -> int:
    return sum(int(a.size) for entry in params for a in entry)


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: str
    receiver: str
    size_units: int
    timestamp: float
    round: int = 0
    label_units: int = 0

    @classmethod
    def smashed_upload(cls, smashed, timestamp):
        return cls(MessageKind.SMASHED_UPLOAD, f"client{smashed.client_id}", "server",
                   smashed.payload_size, timestamp, smashed.round, smashed.label_units)

    @classmethod
    def cut_grad_download(cls, cut_grad: np.ndarray, client_id, round_index, timestamp):
        return cls(MessageKind.CUT_GRAD_DOWNLOAD, "server", f"client{client_id}",
                   int(cut_grad.size), timestamp, round_index)

    @classmethod
    def model_upload(cls, params, client_id, round_index, timestamp, aux=False):
        kind = MessageKind.AUX_MODEL_UPLOAD if aux else MessageKind.CLIENT_MODEL_UPLOAD
        return cls(kind, f"client{client_id}", "server", _params_size(params), timestamp, round_index)

    @classmethod
    def model_download(cls, param_sets, client_id, round_index, timestamp):
        size = sum(_params_size(p) for p in param_sets)
        return cls(MessageKind.MODEL_DOWNLOAD, "server", f"client{client_id}", size, timestamp, round_index)


class Ledger:
    """Append-only message log with running per-kind and per-round totals."""

    def __init__(self):
        self.records: list[Message] = []
        self._by_kind = defaultdict(int)
        self._by_round = defaultdict(lambda: defaultdict(int))
        self._labels = 0

    def record(self, msg: Message) -> "Ledger":
        self.records.append(msg)
        self._by_kind[msg.kind] += msg.size_units
        self._by_round[msg.round][msg.kind] += msg.size_units
        self._labels += msg.label_units
        return self

    def __len__(self):
        return len(self.records)

    def totals(self, window: Optional[tuple[int, int]] = None) -> dict:
        """Per-kind unit sums, optionally restricted to rounds ``[start, stop)``."""
        if window is None:
            src = self._by_kind
            return {k: src.get(k, 0) for k in MessageKind}
        start, stop = window
        out = {k: 0 for k in MessageKind}
        for r, kinds in self._by_round.items():
            if start <= r < stop:
                for k, v in kinds.items():
                    out[k] += v
        return out

    def total(self, window=None, include_labels: bool = False) -> int:
        units = sum(self.totals(window).values())
        if include_labels:
            units += self.label_units(window)
        return units

    def label_units(self, window=None) -> int:
        if window is None:
            return self._labels
        start, stop = window
        return sum(m.label_units for m in self.records if start <= m.round < stop)

    def refold(self) -> dict:
        """Totals recomputed from the raw records (must equal ``totals()``)."""
        out = {k: 0 for k in MessageKind}
        for m in self.records:
            out[m.kind] += m.size_units
        return out

    def count(self, kind: MessageKind, sender: Optional[str] = None) -> int:
        return sum(1 for m in self.records if m.kind == kind and (sender is None or m.sender == sender))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "kind", "sender", "receiver", "size_units"])
        for m in self.records:
            writer.writerow([repr(float(m.timestamp)), m.kind.value, m.sender, m.receiver, m.size_units])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text


@dataclass(frozen=True)
class CostModel:
    q: Number
    alpha: Number
    w_size: Number
    a_size: Number
    d_size: Number
    n: int
    h: int = 1

    def __post_init__(self):
        if self.q <= 0:
            raise ConfigurationError("q must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.n < 1 or self.h < 1:
            raise ConfigurationError("n and h must be >= 1")

    @classmethod
    def from_sizes(cls, method, q, client_size, server_size, aux_size, d_size, n, h=1) -> "CostModel":
        """Cost symbols for a concrete split model.

        ``alpha`` is the client share of everything a client exchanges per
        aggregation: ``|x_c| / |w|`` without an auxiliary head and
        ``(|x_c| + |a_c|) / (|w| + |a|)`` with one, so that ``alpha * (|w| + |a|)``
        is exactly the transmitted client model.
        """
        method = as_method(method)
        w = client_size + server_size
        if method.uses_aux:
            alpha = Fraction(client_size + aux_size, w + aux_size)
        else:
            alpha = Fraction(client_size, w)
        return cls(q, alpha, w, aux_size, d_size, n, h if method == Method.CSE_FSL else 1)

    @classmethod
    def for_arch(cls, method, arch, d_size, n, h=1) -> "CostModel":
        c = arch.param_counts()
        return cls.from_sizes(method, arch.q, c["client"], c["server"], c["aux"], d_size, n, h)

    def client_model_units(self, method) -> Number:
        method = as_method(method)
        if method.uses_aux:
            return self.alpha * (self.w_size + self.a_size)
        return self.alpha * self.w_size

    def check_consistency(self, method, client_size, aux_size=0) -> bool:
        expected = client_size + (aux_size if as_method(method).uses_aux else 0)
        return self.client_model_units(method) == expected


def analytic_comm_terms(method, cm: CostModel, aggregations: int = 1) -> dict:
    """Per-epoch closed-form units split into smashed, gradient and model terms."""
    method = as_method(method)
    n, q, d = cm.n, cm.q, cm.d_size
    model = 2 * n * cm.client_model_units(method) * aggregations
    if method in (Method.FSL_MC, Method.FSL_OC):
        return {"smashed": n * q * d, "cut_grad": n * q * d, "model": model}
    if method == Method.FSL_AN:
        return {"smashed": n * q * d, "cut_grad": 0, "model": model}
    smashed = n * q * d
    smashed = Fraction(smashed, cm.h) if isinstance(smashed, int) else smashed / cm.h
    return {"smashed": smashed, "cut_grad": 0, "model": model}


def analytic_comm(method, cm: CostModel, aggregations: int = 1) -> Number:
    """Total communication units for one global epoch.

    FSL_MC/FSL_OC: ``2nq|D| + 2n alpha |w|``; FSL_AN: ``nq|D| + 2n alpha (|w|+|a|)``;
    CSE_FSL: ``(nq/h)|D| + 2n alpha (|w|+|a|)``.
    """
    return sum(analytic_comm_terms(method, cm, aggregations).values())


STORAGE_CONVENTIONS = ("table2", "buffered")


def analytic_storage(method, cm: CostModel, convention: str = "table2") -> Number:
    """Peak server-side parameter storage.

    ``table2``: FSL_MC ``n|w|``, FSL_AN ``n(|w|+|a|)``, CSE_FSL ``|w|+|a|``
    (streaming aggregation). ``buffered``: CSE_FSL also buffers every client
    upload, giving ``(1-alpha)(|w|+|a|) + n alpha (|w|+|a|)``. FSL_OC keeps one
    server model plus ``n`` buffered client models in both conventions.
    """
    method = as_method(method)
    if convention not in STORAGE_CONVENTIONS:
        raise ConfigurationError(f"unknown storage convention {convention!r}")
    n, w, a = cm.n, cm.w_size, cm.a_size
    if method == Method.FSL_MC:
        return n * w
    if method == Method.FSL_AN:
        return n * (w + a)
    client = cm.client_model_units(method)
    total = w + a if method.uses_aux else w
    if method == Method.FSL_OC or convention == "buffered":
        return (total - client) + n * client
    return w + a


def _plain(x):
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else float(x)
    return x


def reconcile(ledger: Ledger, method, cm: CostModel, epochs: int, aggregations: int = 1,
              include_labels: bool = False, first_round: int = 0) -> dict:
    """Compare measured per-kind traffic over ``epochs`` rounds with the closed forms."""
    window = (first_round, first_round + epochs)
    kinds = ledger.totals(window)
    terms = analytic_comm_terms(method, cm, aggregations)
    measured_terms = {
        "smashed": kinds[MessageKind.SMASHED_UPLOAD],
        "cut_grad": kinds[MessageKind.CUT_GRAD_DOWNLOAD],
        "model": sum(kinds[k] for k in MODEL_KINDS),
    }
    labels = ledger.label_units(window)
    measured = sum(measured_terms.values()) + (labels if include_labels else 0)
    analytic = sum(terms.values()) * epochs
    diff = measured - analytic
    return {
        "method": as_method(method).value,
        "epochs": epochs,
        "measured": _plain(measured),
        "analytic": _plain(analytic),
        "diff": _plain(diff),
        "ok": diff == 0,
        "label_units": labels,
        "include_labels": include_labels,
        "per_kind": {
            name: {"measured": _plain(measured_terms[name]), "analytic": _plain(terms[name] * epochs),
                   "diff": _plain(measured_terms[name] - terms[name] * epochs)}
            for name in terms
        },
    }


def bytes_view(units: Number, width: int = 8) -> Number:
    """Convert parameter units to bytes at ``width`` bytes per scalar."""
    return units * width
