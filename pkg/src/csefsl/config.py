"""Experiment configuration: YAML documents validated against a versioned schema.

Validation failures are reported as ``path:line: field: message`` so a user
can jump straight to the offending key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data as data_mod
from .errors import ConfigurationError
from .nn.schedule import LrSchedule
from .sim import ClientProfile

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthData(_Strict):
    kind: Literal["synth"] = "synth"
    n_samples: int = Field(1400, ge=2)
    n_test: int = Field(400, ge=1)
    dim: Optional[int] = Field(8, ge=1)
    shape: Optional[list[int]] = None
    classes: int = Field(4, ge=2)
    separation: float = Field(5.0, gt=0)
    sigma: float = Field(1.0, gt=0)
    standardize: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.n_test >= self.n_samples:
            raise ValueError("n_test must be smaller than n_samples")
        return self


class IdxData(_Strict):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: Optional[int] = Field(None, ge=2)
    standardize: bool = False


class CsvData(_Strict):
    kind: Literal["csv"]
    train_path: str
    test_path: str
    sample_shape: list[int]
    num_classes: Optional[int] = Field(None, ge=2)
    standardize: bool = False


class PartitionConfig(_Strict):
    kind: Literal["iid", "label_shards", "dirichlet"] = "iid"
    shards_per_client: int = Field(2, ge=1)
    concentration: float = Field(0.5, gt=0)


class AuxConfig(_Strict):
    kind: Literal["mlp", "cnn_mlp"] = "mlp"
    channels: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "cnn_mlp" and self.channels is None:
            raise ValueError("cnn_mlp auxiliary head needs channels")
        return self


class ModelConfig(_Strict):
    arch: Literal["mlp", "small_cnn", "cifar10", "femnist"] = "mlp"
    cut_dim: int = Field(16, ge=1)
    server_hidden: int = Field(16, ge=1)
    client_relu: bool = True
    channels: int = Field(4, ge=1)
    aux: AuxConfig = AuxConfig()


class LrConfig(_Strict):
    eta0: float = Field(0.05, gt=0)
    decay_rate: float = Field(1.0, gt=0, le=1)
    decay_every: int = Field(1, ge=1)
    mode: Literal["step", "diminishing"] = "step"

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.eta0, self.decay_rate, self.decay_every, self.mode)


class RunSection(_Strict):
    method: Literal["cse_fsl", "fsl_mc", "fsl_oc", "fsl_an"] = "cse_fsl"
    n: int = Field(5, ge=1)
    K: Optional[int] = Field(None, ge=1)
    h: int = Field(1, ge=1)
    C: Optional[int] = Field(None, ge=1)
    T: int = Field(5, ge=1)
    B: int = Field(20, ge=1)
    lr: LrConfig = LrConfig()
    lr_client: Optional[LrConfig] = None
    lr_server: Optional[LrConfig] = None
    clip_threshold: Optional[float] = Field(None, gt=0)
    server_step_time: float = Field(0.0, ge=0)
    stale_policy: Literal["process", "drop"] = "process"
    storage_convention: Literal["table2", "buffered"] = "table2"
    eval_server: Literal["average", "replica0"] = "average"
    arrival_order: Literal["ordered", "random"] = "ordered"
    eval_every: int = Field(1, ge=1)
    track_theory: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.K is not None and self.K > self.n:
            raise ValueError("K must not exceed n")
        if self.clip_threshold is not None and self.method != "fsl_oc":
            raise ValueError("clip_threshold applies only to fsl_oc")
        return self


class DelayConfig(_Strict):
    dist: Literal["constant", "uniform", "lognormal"] = "constant"
    value: float = Field(0.0, ge=0)
    low: float = Field(0.0, ge=0)
    high: float = Field(0.0, ge=0)
    mean: float = 0.0
    sigma: float = Field(1.0, ge=0)


DelaySpec = Union[float, DelayConfig]


class ProfileConfig(_Strict):
    compute_delay: DelaySpec = 0.0
    uplink_latency: DelaySpec = 0.0
    downlink_latency: DelaySpec = 0.0

    def profile(self) -> ClientProfile:
        def plain(d):
            return d.model_dump() if isinstance(d, DelayConfig) else float(d)
        return ClientProfile.parse({k: plain(getattr(self, k))
                                    for k in ("compute_delay", "uplink_latency", "downlink_latency")})


class ProfilesConfig(_Strict):
    default: ProfileConfig = ProfileConfig()
    per_client: dict[int, ProfileConfig] = {}


class SweepConfig(_Strict):
    param: Literal["h", "n", "aux_channels"] = "h"
    values: list[int] = []


class ArrivalStudyConfig(_Strict):
    seeds: int = Field(10, ge=1)
    threshold: float = Field(0.02, gt=0)


class Table2Config(_Strict):
    ns: list[int] = [2, 5]
    hs: list[int] = [1, 2, 5]
    B: int = Field(4, ge=1)
    samples_per_client: int = Field(40, ge=1)
    storage_ns: list[int] = [2, 8]


class OutputConfig(_Strict):
    dir: str = "out"


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    seed: int = 0
    dataset: Union[SynthData, IdxData, CsvData] = Field(default_factory=SynthData, discriminator="kind")
    partition: PartitionConfig = PartitionConfig()
    model: ModelConfig = ModelConfig()
    run: RunSection = RunSection()
    profiles: ProfilesConfig = ProfilesConfig()
    sweep: SweepConfig = SweepConfig()
    arrival_study: ArrivalStudyConfig = ArrivalStudyConfig()
    table2: Table2Config = Table2Config()
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def _check(self):
        bad = [i for i in self.profiles.per_client if not 0 <= i < self.run.n]
        if bad:
            raise ValueError(f"per_client profiles for unknown clients {bad}")
        return self


# --- loading with line numbers -----------------------------------------------

def _node_lines(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines by walking the composed YAML tree."""
    if out is None:
        out = {}
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            key_path = path + (key.value,)
            out[key_path] = key.start_mark.line + 1
            _node_lines(value, key_path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _node_lines(item, path + (i,), out)
    return out


def _line_for(loc: tuple, lines: dict) -> Optional[int]:
    parts = [p for p in loc if not (isinstance(p, str) and p in ("synth", "idx", "csv", "float", "DelayConfig"))]
    for k in range(len(parts), -1, -1):
        key = tuple(str(p) if not isinstance(p, int) else p for p in parts[:k])
        for candidate in (key, tuple(str(p) for p in parts[:k])):
            if candidate in lines:
                return lines[candidate]
    return None


def _format_errors(exc: ValidationError, lines: dict, source: str) -> str:
    msgs = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        field = ".".join(str(p) for p in loc if p not in ("synth", "idx", "csv", "float", "DelayConfig")) or "<root>"
        line = _line_for(loc, lines)
        where = f"{source}:{line}" if line else source
        msgs.append(f"{where}: {field}: {err['msg']}")
    return "\n".join(msgs)


def config_from_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{source}: invalid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{source}:1: <root>: top level must be a mapping")
    lines = _node_lines(node) if node is not None else {}
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, lines, source)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config: {exc.strerror}") from None
    return config_from_text(text, str(path))


# --- building runtime objects ------------------------------------------------

def build_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    if isinstance(ds, SynthData):
        shape = ds.shape if ds.shape else ds.dim
        full = data_mod.synth_dataset(cfg.seed, ds.n_samples, shape, ds.classes, ds.separation, ds.sigma)
        train, test = data_mod.train_test_split(full, ds.n_test, cfg.seed)
    elif isinstance(ds, IdxData):
        train = data_mod.load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test = data_mod.load_idx(ds.test_images, ds.test_labels, ds.num_classes or train.num_classes)
    else:
        train = data_mod.load_csv(ds.train_path, ds.sample_shape, ds.num_classes)
        test = data_mod.load_csv(ds.test_path, ds.sample_shape, ds.num_classes or train.num_classes)
    if ds.standardize:
        train, test = data_mod.standardize(train, test)
    return train, test


def build_aux(model: ModelConfig):
    from .split import CnnMlp, MLP
    return MLP() if model.aux.kind == "mlp" else CnnMlp(model.aux.channels)


def build_arch(cfg: ExperimentConfig, sample_shape, num_classes):
    from . import split
    m = cfg.model
    aux = build_aux(m)
    if m.arch == "mlp":
        if len(sample_shape) != 1:
            raise ConfigurationError(f"model.arch: mlp needs flat samples, got shape {tuple(sample_shape)}")
        return split.build_mlp_arch(sample_shape[0], num_classes, m.cut_dim, m.server_hidden, aux, m.client_relu)
    if m.arch == "small_cnn":
        return split.build_small_cnn_arch(tuple(sample_shape), num_classes, m.channels, aux)
    if m.arch == "cifar10":
        return split.build_cifar10_arch(aux)
    return split.build_femnist_arch(aux)


def build_partition_plan(p: PartitionConfig):
    if p.kind == "iid":
        return data_mod.IID()
    if p.kind == "label_shards":
        return data_mod.LabelShards(p.shards_per_client)
    return data_mod.Dirichlet(p.concentration)


def build_profiles(cfg: ExperimentConfig) -> list[ClientProfile]:
    base = cfg.profiles.default.profile()
    return [cfg.profiles.per_client[i].profile() if i in cfg.profiles.per_client else base
            for i in range(cfg.run.n)]


def build_run_config(cfg: ExperimentConfig):
    from .algorithms import RunConfig
    r = cfg.run
    return RunConfig(
        method=r.method, n=r.n, T=r.T, B=r.B, h=r.h, C=r.C, K=r.K, lr=r.lr.schedule(),
        lr_client=r.lr_client.schedule() if r.lr_client else None,
        lr_server=r.lr_server.schedule() if r.lr_server else None,
        clip_threshold=r.clip_threshold, seed=cfg.seed, server_step_time=r.server_step_time,
        stale_policy=r.stale_policy, storage_convention=r.storage_convention, eval_server=r.eval_server,
        arrival_order=r.arrival_order, eval_every=r.eval_every, track_theory=r.track_theory)


def build_experiment(cfg: ExperimentConfig):
    """Datasets, architecture, shards, profiles and run config for one experiment."""
    train, test = build_datasets(cfg)
    arch = build_arch(cfg, train.sample_shape, train.num_classes)
    shards = data_mod.partition(train, build_partition_plan(cfg.partition), cfg.run.n, cfg.seed)
    return arch, train, test, shards, build_profiles(cfg), build_run_config(cfg)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path overrides such as ``{"run.h": 5}`` (re-validated)."""
    doc = cfg.model_dump()
    for dotted, value in changes.items():
        target = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            target = target[p]
        target[leaf] = value
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, {}, "<override>")) from None
