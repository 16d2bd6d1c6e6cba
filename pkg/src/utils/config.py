"""Run configuration: nested JSON sections validated before any work starts."""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from utils.errors import ConfigError, StorageError

logger = logging.getLogger(__name__)

DIM_PRESETS = {
    "desk": {"n_queries": 8, "channels": 32, "heads": 4, "mlp_hidden": 32, "base_width": 8},
    "paper-dims": {"n_queries": 8, "channels": 128, "heads": 8, "mlp_hidden": 128, "base_width": 8},
}

SCHEDULE_PRESETS = {
    "desk": {"epochs": 40, "freeze_epochs": 5, "batch_size": 2, "pretrain_epochs": 10},
    # documentation only; far beyond desk budgets
    "paper-schedule": {"epochs": 1000, "freeze_epochs": 50, "batch_size": 2, "pretrain_epochs": 1000},
}

PRESETS = ("cimt", "unet-s4c", "unet-joint")


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    prevalence: float = 0.5
    base_seed: int = 0
    extents: List[int] = field(default_factory=lambda: [32, 32, 32])
    difficulty: Union[str, Dict[str, Any]] = "easy"

    def validate(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("data.prevalence must lie in (0, 1)")
        if len(self.extents) != 3 or min(self.extents) < 16:
            raise ConfigError(f"data.extents must be three values >= 16, got {self.extents}")
        from phantoms.phantom import DifficultyConfig

        DifficultyConfig.resolve(self.difficulty)


@dataclass
class ModelConfig:
    dims: str = "desk"
    n_queries: Optional[int] = None
    channels: Optional[int] = None
    heads: Optional[int] = None
    mlp_hidden: Optional[int] = None
    base_width: Optional[int] = None
    margin: List[int] = field(default_factory=lambda: [1, 2, 2])
    deep_supervision_weight: float = 0.25
    final_weight: float = 1.0
    query_init_std: float = 0.02
    scale_attention_logits: bool = True

    def validate(self):
        if self.dims not in DIM_PRESETS:
            raise ConfigError(f"model.dims must be one of {sorted(DIM_PRESETS)}, got {self.dims!r}")
        for key, value in DIM_PRESETS[self.dims].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.n_queries < 2:
            raise ConfigError("model.n_queries must be >= 2 (cluster-wise argmax is degenerate otherwise)")
        if self.channels % self.heads:
            raise ConfigError(f"model.channels ({self.channels}) must be divisible by model.heads ({self.heads})")
        if len(self.margin) != 3 or min(self.margin) < 0:
            raise ConfigError(f"model.margin must be three non-negative values, got {self.margin}")


@dataclass
class TrainConfig:
    schedule: str = "desk"
    epochs: Optional[int] = None
    pretrain_epochs: Optional[int] = None
    freeze_epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: float = 1e-4
    pretrain_lr: float = 1e-3
    backbone_lr_multiplier: float = 0.1
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    seed: int = 0
    augment_flips: bool = True
    augment_intensity: bool = True
    seg_weight: float = 1.0
    cls_weight: float = 1.0
    max_skipped_steps: int = 20

    def validate(self):
        if self.schedule not in SCHEDULE_PRESETS:
            raise ConfigError(f"train.schedule must be one of {sorted(SCHEDULE_PRESETS)}, got {self.schedule!r}")
        for key, value in SCHEDULE_PRESETS[self.schedule].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("train.lr and train.pretrain_lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.pretrain_epochs < 0:
            raise ConfigError("train.epochs and train.batch_size must be >= 1, train.pretrain_epochs >= 0")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ConfigError("train.freeze_epochs must lie in [0, train.epochs]")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas must be two values in [0, 1)")


@dataclass
class EvalConfig:
    bootstrap_replicas: int = 1000
    alpha: float = 0.05
    permutation_replicas: int = 10000
    seed: int = 0
    stratified_bootstrap: bool = False
    negative_cohort_size: int = 100
    spec_targets: List[float] = field(default_factory=lambda: [0.95])
    oracle_roi: bool = False

    def validate(self):
        if self.bootstrap_replicas < 100:
            raise ConfigError("eval.bootstrap_replicas must be >= 100")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("eval.alpha must lie in (0, 1)")
        if self.permutation_replicas < 1:
            raise ConfigError("eval.permutation_replicas must be >= 1")
        if any(not 0.0 <= t <= 1.0 for t in self.spec_targets):
            raise ConfigError("eval.spec_targets must lie in [0, 1]")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for section in (self.data, self.model, self.train, self.eval):
            section.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            section_cls = f.default_factory().__class__
            kwargs[f.name] = _section_from_dict(section_cls, raw.get(f.name, {}), f.name)
        return cls(**kwargs).validate()


def _coerce(value, default, dotted: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{dotted} must be a list")
        if default:
            return [_coerce(v, default[0], f"{dotted}[{i}]") for i, v in enumerate(value)]
        return list(value)
    return value


def _section_from_dict(section_cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    instance = section_cls()
    known = {f.name for f in dataclasses.fields(section_cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {name}.{key}")
        default = getattr(instance, key)
        if default is None:
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{name}.{key} must be an integer")
            setattr(instance, key, value)
        elif key == "difficulty":
            if not isinstance(value, (str, dict)):
                raise ConfigError(f"{name}.{key} must be a preset name or an object")
            setattr(instance, key, value)
        else:
            setattr(instance, key, _coerce(value, default, f"{name}.{key}"))
    return instance


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Parse and validate a run config; `None` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from None
    return RunConfig.from_dict(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Union[RunConfig, Dict[str, Any]]) -> str:
    payload = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def resolve_seed(cli_seed: Optional[int], config_seed: int) -> int:
    """--seed beats CIMT_SEED beats the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    load_dotenv()
    env = os.getenv("CIMT_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CIMT_SEED must be an integer, got {env!r}") from None
    return int(config_seed)
