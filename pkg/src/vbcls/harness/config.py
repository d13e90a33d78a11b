from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from vbcls.errors import ConfigurationError, FileSystemError
from vbcls.model import LossWeights, TrainConfig
from vbcls.shiftgen import SCENARIOS

VARIANTS = ("vbcls", "vbcls_no_pa", "vbcls_no_lyhat", "uniform_yhat", "erm")
PRIOR_MODES = ("pooled", "oracle", "refined")


def _from_dict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {what} fields: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class DataSource:
    """Either a synthetic scenario or one feature CSV per domain."""

    scenario: str | None = "conditional_and_label"
    n_domains: int = 4
    n_classes: int = 3
    dim: int = 10
    n_per_domain: int = 2000
    severity: float = 1.0
    seed: int = 0
    class_sep: float = 1.5
    csv: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.csv is not None:
            object.__setattr__(self, "csv", tuple(self.csv))
            if not self.csv:
                raise ConfigurationError("csv list is empty")
        elif self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource = field(default_factory=DataSource)
    variant: str = "vbcls"
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    n_seeds: int = 1
    target_prior_mode: str = "pooled"
    output_dir: str | None = None
    train_fraction: float = 0.7
    refine_iters: int = 10
    refine_tol: float = 1e-6
    calibrate: bool = True
    targets: tuple[int, ...] | None = None
    source_domains: tuple[int, ...] | None = None
    holdout: int | None = None

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigurationError("n_seeds must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.target_prior_mode not in PRIOR_MODES:
            raise ConfigurationError(f"unknown target_prior_mode {self.target_prior_mode!r}")
        for name in ("targets", "source_domains"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(int(v) for v in value))

    @property
    def seeds(self) -> list[int]:
        return [self.train.seed + r for r in range(self.n_seeds)]

    def with_variant(self, variant: str) -> ExperimentConfig:
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("targets", "source_domains"):
            if d[key] is not None:
                d[key] = list(d[key])
        if d["data"]["csv"] is not None:
            d["data"]["csv"] = list(d["data"]["csv"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = dict(data)
        if "data" in data:
            data["data"] = _from_dict(DataSource, data["data"], "data")
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        if "weights" in data:
            data["weights"] = _from_dict(LossWeights, data["weights"], "weights")
        try:
            return _from_dict(cls, data, "experiment")
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileSystemError(f"cannot read config {path}: {exc.strerror}", path=str(path)) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    if cfg.data.csv is not None:
        # relative CSV paths are resolved against the config file's directory
        resolved = tuple(str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                         for p in cfg.data.csv)
        cfg = replace(cfg, data=replace(cfg.data, csv=resolved))
    return cfg
