"""
Experiment configuration: JSON files parsed into frozen dataclasses.
Missing keys take the desk-benchmark defaults (batch 20, client momentum 0.9, beta1 0.9,
beta2 0.999, eps 1e-8, no weight decay, seed 42). Unknown keys are rejected with their dotted path.
"""
import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from services.aggregator import ADAPTIVE, Strategy
from services.client import ClientConfig
from services.errors import ConfigError, FedSimError
from services.models import ModelSpec
from services.quant import QuantMode
from services.server_opt import OptimizerHyper

DATA_SOURCES = ("blobs", "csv")
PARTITIONERS = ("iid", "mixed", "dirichlet", "lq")
EVAL_POOLS = ("holdout", "train")
CLIENT_WEIGHTS = ("uniform", "proportional")


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    num_classes: int = 10
    dim: int = 20
    per_class: int = 100
    spread: float = 3.0
    csv_path: Optional[str] = None
    eval_csv_path: Optional[str] = None
    partitioner: str = "lq"
    beta: float = 0.5
    min_size: int = 10
    chunks: int = 1

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("data.csv_path is required when data.source is csv")
        if self.partitioner not in PARTITIONERS:
            raise ConfigError(f"data.partitioner must be one of {PARTITIONERS}")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedadavr"
    optimizer: Optional[OptimizerHyper] = None
    weighting: str = "unbiased"
    mode: str = "fp32"
    server_lr: float = 1.0
    fedvarp_scale_by_eta_c: bool = True
    client_weights: str = "uniform"
    z0: float = 0.0

    def __post_init__(self):
        if self.client_weights not in CLIENT_WEIGHTS:
            raise ConfigError(f"strategy.client_weights must be one of {CLIENT_WEIGHTS}")
        if self.mode not in [m.value for m in QuantMode]:
            raise ConfigError(f"strategy.mode must be one of {[m.value for m in QuantMode]}")
        if self.kind in ADAPTIVE and self.optimizer is None:
            object.__setattr__(self, "optimizer", OptimizerHyper())

    def build(self) -> Strategy:
        return Strategy(
            kind=self.kind,
            optimizer=self.optimizer,
            weighting=self.weighting,
            mode=QuantMode(self.mode),
            server_lr=self.server_lr,
            fedvarp_scale_by_eta_c=self.fedvarp_scale_by_eta_c,
        )


@dataclass(frozen=True)
class EvalConfig:
    pool: str = "holdout"
    every: int = 1
    per_class: int = 20
    tail_fraction: float = 0.1

    def __post_init__(self):
        if self.pool not in EVAL_POOLS:
            raise ConfigError(f"eval.pool must be one of {EVAL_POOLS}")
        if self.every < 1:
            raise ConfigError("eval.every must be >= 1")
        if self.per_class < 1:
            raise ConfigError("eval.per_class must be >= 1")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ConfigError("eval.tail_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class SimConfig:
    name: str = "run"
    seed: int = 42
    N: int = 50
    M: int = 5
    T: int = 100
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    snapshot: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not 1 <= self.M <= self.N:
            raise ConfigError(f"M must lie in [1, N]; got M={self.M}, N={self.N}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.data.source == "blobs":
            if self.model.input_dim != self.data.dim:
                raise ConfigError(f"model.input_dim {self.model.input_dim} != data.dim {self.data.dim}")
            if self.model.is_classifier and self.model.num_classes != self.data.num_classes:
                raise ConfigError(
                    f"model.num_classes {self.model.num_classes} != data.num_classes {self.data.num_classes}"
                )
        try:
            self.strategy.build()
        except FedSimError as exc:
            raise ConfigError(f"strategy: {exc}") from exc

    def with_overrides(self, **changes) -> "SimConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _check_scalar(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _coerce(value: Any, hint: Any, path: str) -> Any:
    if is_dataclass(hint):
        return _build(hint, value, path)
    return _check_scalar(value, hint, path)


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
    kwargs = {}
    for name in names:
        if name in raw:
            kwargs[name] = _coerce(raw[name], hints[name], f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except FedSimError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def parse_config(raw: Mapping[str, Any]) -> SimConfig:
    return _build(SimConfig, raw, "")


def load_config(path, default_seed: Optional[int] = None) -> SimConfig:
    """Parse a JSON config file; default_seed fills in a missing top-level seed."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if default_seed is not None and isinstance(raw, dict):
        raw.setdefault("seed", default_seed)
    return parse_config(raw)


def config_to_dict(cfg: SimConfig) -> Dict[str, Any]:
    return asdict(cfg)
