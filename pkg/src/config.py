"""Run configuration: pydantic models, TOML experiment files and the JSON app defaults."""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from datagen import CalendarConfig, CapmConfig, PanelSimConfig
from errors import ConfigError
from nets import ModelDims
from options_bt import BacktestConfig
from probes import ProbeConfig
from two_step import TrainConfig

logger = logging.getLogger(__name__)

KINDS = ("synth1", "synth2", "capm", "panel")

# training schedule per data kind, used where the run config leaves them unset
TRAIN_DEFAULTS: Dict[str, Dict[str, int]] = {
    "synth1": {"stage1_epochs": 60, "stage2_iterations": 2000},
    "synth2": {"stage1_epochs": 60, "stage2_iterations": 2000},
    "capm": {"stage1_epochs": 30, "stage2_iterations": 3000},
    "panel": {"stage1_epochs": 30, "stage2_iterations": 3000},
}

APP_CONFIG = Path("config.json")
APP_CONFIG_LOCAL = Path("config.local.json")


class AppSettings(BaseModel):
    output_root: str = "runs"
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    probe_workers: int = Field(4, ge=1)


def load_app_config(path: Path = APP_CONFIG, local: Path = APP_CONFIG_LOCAL) -> AppSettings:
    """Application defaults from ``config.json``, overridden by an optional ``config.local.json``."""
    data: Dict[str, Any] = {}
    for candidate in (path, local):
        if not candidate.exists():
            continue
        try:
            with open(candidate) as f:
                data.update(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{candidate}: invalid JSON: {e}") from e
    try:
        return AppSettings(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid application config: {e}") from e


class SynthConfig(BaseModel):
    image_size: int = Field(32, ge=20)
    draws: int = Field(2000, ge=2)


class PanelConfig(BaseModel):
    source: Literal["simulate", "files"] = "simulate"
    returns_path: Optional[str] = None
    market_path: Optional[str] = None
    sim: PanelSimConfig = Field(default_factory=PanelSimConfig)
    calendar: CalendarConfig = Field(default_factory=CalendarConfig)
    noise_sigma: float = Field(0.04, ge=0.0)
    measure_window: int = Field(252, ge=2)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synth1", "synth2", "capm", "panel"] = "synth1"
    seed: int = Field(0, ge=0)
    preset: Optional[Literal["stocks", "synth"]] = None
    s_dim: Optional[int] = Field(None, ge=1)
    z_dim: Optional[int] = Field(None, ge=1)
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    capm: CapmConfig = Field(default_factory=CapmConfig)
    panel: PanelConfig = Field(default_factory=PanelConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    backtest: BacktestConfig = Field(default_factory=BacktestConfig)

    @model_validator(mode="before")
    @classmethod
    def _train_defaults_for_kind(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        train = data.get("train") or {}
        defaults = TRAIN_DEFAULTS.get(str(data.get("kind", "synth1")))
        if defaults is None or not isinstance(train, dict):
            return data
        train = dict(train)
        for key, value in defaults.items():
            train.setdefault(key, value)
        return {**data, "train": train}

    @property
    def is_synth(self) -> bool:
        return self.kind in ("synth1", "synth2")

    def effective_preset(self) -> str:
        return self.preset or ("synth" if self.is_synth else "stocks")

    def model_dims(self, input_dim: int, n_classes: int) -> ModelDims:
        s_default, z_default = (4, 4) if self.is_synth else (20, 50)
        return ModelDims(input_dim, self.s_dim or s_default, self.z_dim or z_default, n_classes)

    def echo(self) -> str:
        """Sorted, indented JSON of every effective field."""
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the TOML file, then dotted-key overrides (``train.lam``) from the command line."""
    data: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(p, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
