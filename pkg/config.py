"""
Experiment configuration loader.

Reads one YAML or JSON file (JSON is valid YAML), deep-merges it over
``_DEFAULT`` and validates the result into an ``ExperimentConfig``.

Only ``dataset`` and ``seeds`` are required.  Every range violation is
reported as its own message in ``ConfigError.errors``.  No environment
variable changes an experiment.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ConfigError

try:
    import yaml as _yaml
except ImportError:
    _yaml = None  # type: ignore[assignment]

Method = Literal["proto_evfl", "local", "vanilla_vfl", "upper_boundary"]

_DEFAULT: dict = {
    "num_parties": 4,
    "split_spec": None,
    "aligned_ratio": 0.02,
    "imbalance": {"gamma": 1.0, "num_majority": None, "rare_classes": []},
    "hyperparameters": {
        "rounds": 30,
        "local_epochs": 1,
        "head_epochs": 20,
        "batch_size": 64,
        "lr": 0.002,
        "head_lr": 0.2,
        "phi": 0.1,
        "rho": 0.1,
        "confidence_threshold": None,
        "latent_dim": 8,
        "extractor_hidden": [],
        "classifier_hidden": [32, 32],
        "adaptor_depth": 1,
        "cost_mode": "cosine",
        "sample_weighting": "uniform",
        "renormalize_prototypes": True,
        "centre_prototypes": True,
        "transport_direction": "dual",
    },
    "noise": {"kappa": 0.0, "target": "off"},
    "ablation": {
        "prototype_update": True,
        "prototype_learning": True,
        "mixed_prior": True,
        "gated_aggregation": True,
    },
    "method": "proto_evfl",
    "compare_with": [],
    "inference": "softmax",
    "attack": False,
    "transport": "inproc",
    "timeout_seconds": 30.0,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    source: Literal["synth", "csv"] = "synth"
    # csv
    path: Optional[str] = None
    label_column: str = "label"
    id_column: str = "id"
    # synth (num_classes is optional for csv: inferred from labels)
    num_classes: Optional[int] = Field(default=None, ge=2)
    num_features: int = Field(default=16, ge=1)
    per_class: list[int] = Field(default_factory=lambda: [1000, 1000, 1000, 1000])
    class_separation: float = Field(default=4.0, ge=0.0)
    test_ratio: float = Field(default=0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetConfig":
        if self.source == "csv" and not self.path:
            raise ValueError("dataset.path is required when source is csv")
        if self.source == "synth":
            if any(c < 0 for c in self.per_class):
                raise ValueError("dataset.per_class counts must be >= 0")
            if self.num_classes is not None and self.num_classes != len(self.per_class):
                raise ValueError("dataset.num_classes must equal len(dataset.per_class)")
        return self

    @property
    def synth_classes(self) -> int:
        return self.num_classes if self.num_classes is not None else len(self.per_class)


class RareClassConfig(_Strict):
    class_id: int = Field(ge=0)
    mode: Literal["few_shot", "zero_shot"]
    keep_count: int = 1

    @model_validator(mode="after")
    def _check_keep(self) -> "RareClassConfig":
        if self.mode == "few_shot" and self.keep_count < 1:
            raise ValueError("keep_count must be >= 1 for few_shot")
        return self


class ImbalanceConfig(_Strict):
    gamma: float = Field(default=1.0, ge=1.0)
    num_majority: Optional[int] = Field(default=None, ge=1)
    rare_classes: list[RareClassConfig] = Field(default_factory=list)


class Hyperparameters(_Strict):
    rounds: int = Field(default=30, ge=0)
    local_epochs: int = Field(default=1, ge=0)
    head_epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.002, ge=0.0)
    head_lr: float = Field(default=0.2, ge=0.0)
    phi: float = Field(default=0.1, ge=0.0)
    rho: float = Field(default=0.1, ge=0.0)
    confidence_threshold: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    latent_dim: int = Field(default=8, ge=1)
    extractor_hidden: list[int] = Field(default_factory=list)
    classifier_hidden: list[int] = Field(default_factory=lambda: [32, 32])
    adaptor_depth: int = Field(default=1, ge=1)
    cost_mode: Literal["cosine", "neg_log_prob"] = "cosine"
    sample_weighting: Literal["uniform", "pseudo_prior"] = "uniform"
    renormalize_prototypes: bool = True
    centre_prototypes: bool = True
    transport_direction: Literal["dual", "f_to_mu", "mu_to_f"] = "dual"


class NoiseSettings(_Strict):
    kappa: float = Field(default=0.0, ge=0.0)
    target: Literal["representations", "prototypes", "off"] = "off"


class AblationConfig(_Strict):
    prototype_update: bool = True
    prototype_learning: bool = True
    mixed_prior: bool = True
    gated_aggregation: bool = True


class ExperimentConfig(_Strict):
    dataset: DatasetConfig
    seeds: list[int] = Field(min_length=1)
    num_parties: int = Field(default=4, ge=1)
    split_spec: Optional[list[list[int]]] = None
    aligned_ratio: float = Field(default=0.02, gt=0.0, le=1.0)
    imbalance: ImbalanceConfig = Field(default_factory=ImbalanceConfig)
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    method: Method = "proto_evfl"
    compare_with: list[Method] = Field(default_factory=list)
    inference: Literal["softmax", "prototype_nn"] = "softmax"
    attack: bool = False
    transport: Literal["inproc", "socket"] = "inproc"
    timeout_seconds: float = Field(default=30.0, gt=0.0)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "ExperimentConfig":
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be nonnegative")
        if self.split_spec is not None:
            if len(self.split_spec) != self.num_parties:
                raise ValueError("split_spec must list one column group per party")
            if any(not cols for cols in self.split_spec):
                raise ValueError("split_spec column lists must be nonempty")
        if self.dataset.source == "synth":
            z = self.dataset.synth_classes
            bad = [rc.class_id for rc in self.imbalance.rare_classes if rc.class_id >= z]
            if bad:
                raise ValueError(f"rare classes {bad} are outside [0, {z})")
        if self.method in self.compare_with:
            raise ValueError("compare_with must not repeat the primary method")
        return self


def _deep_merge(base: dict, override: dict) -> dict:
    result = dict(base)
    for key, val in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(val, dict):
            result[key] = _deep_merge(result[key], val)
        else:
            result[key] = val
    return result


def _format_error(err: dict[str, Any]) -> str:
    loc = ".".join(str(part) for part in err.get("loc", ())) or "config"
    return f"{loc}: {err.get('msg', 'invalid value')}"


def validate_config(raw: dict | None) -> ExperimentConfig:
    """Fill defaults and check every field; raise ``ConfigError`` listing each violation."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config must be a mapping, got {type(raw).__name__}"])
    merged = _deep_merge(_DEFAULT, raw)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError([_format_error(e) for e in exc.errors()]) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a YAML/JSON experiment file."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError([f"config file not found: {config_path}"])
    if _yaml is None:
        raise ConfigError(["PyYAML is required to read config files"])
    try:
        with open(config_path, encoding="utf-8") as fh:
            raw = _yaml.safe_load(fh)
    except _yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {config_path}: {exc}"]) from exc
    return validate_config(raw)


def config_echo(cfg: ExperimentConfig) -> dict:
    """JSON-ready dump that ``validate_config`` turns back into ``cfg``."""
    return cfg.model_dump(mode="json")
