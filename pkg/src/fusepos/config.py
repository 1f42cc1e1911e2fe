"""Run configuration: strict YAML loading into dataclasses and a resolved echo."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapt import AdaptConfig
from .encoders import InertialConfig, TrainConfig, WirelessConfig
from .filters import GridSpec, PerturbConfig
from .fusion import FusionConfig, FusionTrainConfig


class ConfigError(ValueError):
    pass


PRESETS = ("paper-sim", "testbed")


@dataclass
class SimulatorConfig:
    preset: str = "testbed"
    trajectories: int = 6
    duration: float = 300.0  # s per trajectory
    noise: str = "invariant"
    sigma: float = 1.0
    split: tuple[float, float, float] = (4 / 6, 1 / 6, 1 / 6)
    split_by: str = "trajectory"
    imu_rate: float = 50.0
    rss_rate: float = 10.0
    window: float = 1.0  # s of IMU and RSS per record
    stride: float = 1.0
    dropout: float = 0.0
    device_gain: float = 1.0
    device_offset: float = 0.0
    acc_noise: float = 0.15
    gyro_noise: float = 0.02

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"simulator.preset must be one of {PRESETS}, got {self.preset!r}")
        if self.trajectories < 1:
            raise ConfigError("simulator.trajectories must be >= 1")
        if not self.duration >= 0:
            raise ConfigError("simulator.duration must be >= 0")
        if self.split_by not in ("trajectory", "record"):
            raise ConfigError("simulator.split_by must be 'trajectory' or 'record'")
        if not 0 <= self.dropout < 1:
            raise ConfigError("simulator.dropout must lie in [0, 1)")


@dataclass
class EncodersConfig:
    inertial: InertialConfig = field(default_factory=lambda: InertialConfig(hidden=32))
    wireless: WirelessConfig = field(default_factory=WirelessConfig)
    inertial_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8))
    wireless_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15))


@dataclass
class MultitaskWeights:
    lam1: float = 0.1  # inertial sub-task
    lam2: float = 0.1  # wireless sub-task

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ConfigError("multitask weights must be non-negative")


@dataclass
class FusionSection:
    net: FusionConfig = field(default_factory=FusionConfig)
    train: FusionTrainConfig = field(default_factory=lambda: FusionTrainConfig(epochs=60))
    multitask: MultitaskWeights = field(default_factory=MultitaskWeights)


@dataclass
class FiltersConfig:
    noise: str = "grid"  # "grid" search on the validation split or "estimate" from encoder residuals
    grid: GridSpec = field(default_factory=GridSpec)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    particles: int = 700

    def __post_init__(self):
        if self.noise not in ("grid", "estimate"):
            raise ConfigError("filters.noise must be 'grid' or 'estimate'")
        if self.particles < 1:
            raise ConfigError("filters.particles must be >= 1")


@dataclass
class AllanConfig:
    dt: float = 0.02  # s between samples
    column: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("metrics.allan.dt must be positive")


@dataclass
class MetricsConfig:
    tolerance: float = 0.5  # s, prediction to ground-truth alignment
    allan: AllanConfig = field(default_factory=AllanConfig)


@dataclass
class InputsConfig:
    dataset: str | None = None
    target: str | None = None  # target-domain dataset for adaptation
    inertial: str | None = None
    wireless: str | None = None
    fusion: str | None = None
    series: str | None = None  # Allan input, CSV or whitespace-separated columns


STAGES = ("inertial", "wireless", "fusion", "multitask")
METHODS = ("fusion", "ekf", "ukf", "pf", "wireless-only", "inertial-only")


@dataclass
class TrainSection:
    stage: str = "wireless"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"train.stage must be one of {STAGES}, got {self.stage!r}")


@dataclass
class EvalSection:
    methods: tuple[str, ...] = METHODS
    split: str = "test"
    predictions: dict[str, str] = field(default_factory=dict)  # extra pred.csv files to score by name
    matrix: bool = False  # run the six-setting noise benchmark instead

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown eval methods {bad}; choose from {METHODS}")
        if self.split not in ("train", "val", "test", "all"):
            raise ConfigError("eval.split must be train, val, test or all")


@dataclass
class RunConfig:
    seed: int = 0
    inputs: InputsConfig = field(default_factory=InputsConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    encoders: EncodersConfig = field(default_factory=EncodersConfig)
    fusion: FusionSection = field(default_factory=FusionSection)
    filters: FiltersConfig = field(default_factory=FiltersConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)


# Per-stage seeds come from the global seed; setting them in a section would be ambiguous.
DERIVED_SEEDS = (TrainConfig, FusionTrainConfig, AdaptConfig)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, where) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, where) for a, v in zip(args, value))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_convert(args[0], v, where) for v in value]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return {str(k): _convert(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, where: str = "config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys and ill-typed values."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    if cls in DERIVED_SEEDS:
        known.discard("seed")
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    defaults = cls()
    for f in dataclasses.fields(cls):
        # nested sections keep non-default factory values (e.g. encoder epochs) when only partly given
        if f.name in kwargs and dataclasses.is_dataclass(hints[f.name]) and isinstance(data.get(f.name), dict):
            base = getattr(defaults, f.name)
            kwargs[f.name] = _merge(base, data[f.name], f"{where}.{f.name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge(base, data: dict, where: str):
    hints = typing.get_type_hints(type(base))
    known = {f.name for f in dataclasses.fields(base) if f.init}
    if type(base) in DERIVED_SEEDS:
        known.discard("seed")
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    changes = {}
    for k, v in data.items():
        cur = getattr(base, k)
        if dataclasses.is_dataclass(cur) and isinstance(v, dict):
            changes[k] = _merge(cur, v, f"{where}.{k}")
        else:
            changes[k] = _convert(hints[k], v, f"{where}.{k}")
    try:
        return dataclasses.replace(base, **changes)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj):
    """Plain-data view of a dataclass tree (tuples become lists) without derived seeds."""
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            if f.name == "seed" and type(obj) in DERIVED_SEEDS:
                continue
            out[f.name] = to_dict(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(RunConfig, data or {}, "config")


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def derive_seed(seed: int, stage: str) -> int:
    """Per-stage integer seed drawn from the global one."""
    from .tensor import RngStream

    return int(RngStream(seed).child(stage).integers(0, 2**31 - 1))
