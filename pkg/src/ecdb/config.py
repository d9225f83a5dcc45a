"""Run configuration: one JSON document with a section per subsystem."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bridge import SamplerConfig
from .control import FusionSchedule
from .data import DataConfig, DegradationSpec
from .denoiser import DenoiserArch
from .errors import ConfigError
from .schedule import ProcessConfig
from .training import TrainConfig

# ablation switches live in their own section, not under "train"
_ABLATION_KEYS = ("chm", "dfm", "fusion_schedule")


@dataclass(frozen=True)
class Ablation:
    chm: bool = True
    dfm: bool = True
    fusion_schedule: bool = True
    # decay rate of the fusion weight
    fusion_a: float = 5.0

    @property
    def label(self) -> str:
        parts = [n for n, on in (("chm", self.chm), ("dfm", self.dfm), ("schedule", self.fusion_schedule)) if on]
        return "+".join(parts) or "none"


@dataclass
class RunConfig:
    process: ProcessConfig = field(default_factory=ProcessConfig)
    arch: DenoiserArch = field(default_factory=DenoiserArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def to_dict(self) -> dict:
        d = {
            "process": asdict(self.process),
            "arch": asdict(self.arch),
            "train": {k: v for k, v in asdict(self.train).items() if k not in _ABLATION_KEYS},
            "data": {k: v for k, v in asdict(self.data).items() if k != "degradation"},
            "degradation": asdict(self.data.degradation),
            "sampler": asdict(self.sampler),
            "ablation": asdict(self.ablation),
        }
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def fusion(self) -> FusionSchedule:
        a = self.ablation
        return FusionSchedule(a=a.fusion_a, T=self.process.T, chm=a.chm, dfm=a.dfm,
                              schedule=a.fusion_schedule)

    def train_config(self) -> TrainConfig:
        a = self.ablation
        return dataclasses.replace(self.train, chm=a.chm, dfm=a.dfm, fusion_schedule=a.fusion_schedule)

    def validate(self, check_process: bool = True) -> None:
        if check_process:
            self.process.validate()
        self.arch.validate()
        self.train.validate()
        self.data.degradation.validate()
        self.sampler.validate()
        self.fusion().validate()
        if self.arch.T != self.process.T:
            raise ConfigError(f"arch.T={self.arch.T} differs from process.T={self.process.T}")
        f = 2 ** (self.arch.n_scales - 1)
        if self.data.size % f:
            raise ConfigError(f"data.size={self.data.size} must be divisible by {f}")
        if self.data.channels != self.arch.image_channels:
            raise ConfigError("data.channels must equal arch.image_channels")


_TUPLE_FIELDS = {"theta_table", "lr_halve_at", "betas", "channel_mult"}


def _build(cls, section: str, values: dict, exclude=()):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    kw = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


SECTIONS = ("process", "arch", "train", "data", "degradation", "sampler", "ablation")


def config_from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    process = _build(ProcessConfig, "process", d.get("process", {}))
    arch_d = dict(d.get("arch", {}))
    arch_d.setdefault("T", process.T)
    arch = _build(DenoiserArch, "arch", arch_d)
    train = _build(TrainConfig, "train", d.get("train", {}), exclude=_ABLATION_KEYS)
    deg = _build(DegradationSpec, "degradation", d.get("degradation", {}))
    data = _build(DataConfig, "data", d.get("data", {}), exclude=("degradation",))
    data = dataclasses.replace(data, degradation=deg)
    sampler = _build(SamplerConfig, "sampler", d.get("sampler", {}))
    ablation = _build(Ablation, "ablation", d.get("ablation", {}))
    return RunConfig(process, arch, train, data, sampler, ablation)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    return config_from_dict(d)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every seed in the config with ``seed``."""
    return dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, seed=seed),
        data=dataclasses.replace(cfg.data, seed=seed),
        sampler=dataclasses.replace(cfg.sampler, rng_seed=seed),
    )
