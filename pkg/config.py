"""
Run configuration for Gemini Lab.

Command configs are pydantic models loaded from JSON and validated in full
before any computation; unknown keys are rejected. Process-wide settings come
from the environment (a .env file is honoured):

- GEMINI_LAB_LOG_LEVEL: Optional - logging level name (default INFO)
- GEMINI_LAB_THREADS: Optional - worker threads for repeats and folds (default 1)
- GEMINI_LAB_OUT_DIR: Optional - default output directory (default ./gemini_lab_out)
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from campaign_tool import CampaignConfig, EvaluatorSpec
from gemini_model import BaselineVariant, GeminiHyperparams
from surface_tool import BIN_WIDTH, MAX_BIN_ATTEMPTS, DomainSpec

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class ConfigError(ValueError):
    """Raised when a config file cannot be read or does not validate."""


def setup_logging(level: Union[str, int] = logging.INFO) -> None:
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


class Settings(BaseModel):
    log_level: str = Field("INFO", description="Logging level name")
    threads: int = Field(1, ge=1, description="Worker threads for repeats and folds")
    out_dir: str = Field("gemini_lab_out", description="Default output directory")

    @classmethod
    def from_env(cls) -> "Settings":
        load_dotenv()
        values = {}
        if os.getenv("GEMINI_LAB_LOG_LEVEL"):
            values["log_level"] = os.getenv("GEMINI_LAB_LOG_LEVEL")
        if os.getenv("GEMINI_LAB_THREADS"):
            values["threads"] = os.getenv("GEMINI_LAB_THREADS")
        if os.getenv("GEMINI_LAB_OUT_DIR"):
            values["out_dir"] = os.getenv("GEMINI_LAB_OUT_DIR")
        return cls(**values)


class KernelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variance: float = Field(2.0, gt=0, description="RBF signal variance")
    lengthscale: float = Field(1.0, gt=0, description="RBF length scale")


class GenSurfacesConfig(BaseModel):
    """Binned pool of GP surface pairs."""

    model_config = ConfigDict(extra="forbid")

    domain: DomainSpec = Field(default_factory=DomainSpec)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    n_exp_surfaces: int = Field(20, ge=1, description="Expensive surfaces, each paired once per bin")
    n_train: Optional[int] = Field(None, ge=1, description="Anchor points per draw; null picks a tenth of the domain")
    bin_width: float = Field(BIN_WIDTH, gt=0, le=2, description="Spearman bin width on [-1, 1]")
    max_attempts: int = Field(MAX_BIN_ATTEMPTS, ge=1, description="Rejection cap per bin")
    seed: int = Field(0, ge=0)


class RegressSource(BaseModel):
    """Where regression data comes from."""

    model_config = ConfigDict(extra="forbid")

    kind: str = Field(..., pattern="^(trig|pair|analytic|csv)$", description="trig, pair, analytic or csv")
    name: Optional[str] = Field(None, description="Trig kind, or expensive analytic surface")
    cheap_name: Optional[str] = Field(None, description="Cheap analytic surface")
    dim: int = Field(2, ge=1, description="Analytic dimension")
    n_points: int = Field(1000, ge=2, description="Random analytic domain size")
    path: Optional[str] = Field(None, description="Pair file stem or descriptor CSV")
    expected_width: Optional[int] = Field(None, ge=1, description="Required descriptor width (14 for HOIP files)")

    @model_validator(mode="after")
    def _check_source(self):
        if self.kind == "trig" and not self.name:
            raise ValueError("a trig source needs name (constant, linear or nonlinear)")
        if self.kind == "analytic" and not (self.name and self.cheap_name):
            raise ValueError("an analytic source needs name and cheap_name")
        if self.kind in ("pair", "csv") and not self.path:
            raise ValueError(f"a {self.kind} source needs a path")
        return self


class RegressConfig(BaseModel):
    """Learning curves of Gemini against the single-network baselines."""

    model_config = ConfigDict(extra="forbid")

    source: RegressSource
    exp_sizes: List[int] = Field(default_factory=lambda: [2, 3, 5, 10, 20, 50, 75], description="Expensive training sizes")
    n_cheap: Optional[int] = Field(None, ge=0, description="Fixed cheap training size")
    cheap_ratio: Optional[float] = Field(None, gt=0, description="Cheap training size as a multiple of the expensive size")
    n_splits: int = Field(20, ge=1, description="Random splits per training size")
    models: List[str] = Field(default_factory=lambda: ["gemini"] + [v.value for v in BaselineVariant])
    gemini: GeminiHyperparams = Field(default_factory=GeminiHyperparams)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if any(n < 1 for n in self.exp_sizes):
            raise ValueError("exp_sizes must be positive")
        allowed = {"gemini"} | {v.value for v in BaselineVariant}
        unknown = [m for m in self.models if m not in allowed]
        if unknown:
            raise ValueError(f"unknown models {unknown}; choose from {sorted(allowed)}")
        if self.n_cheap is not None and self.cheap_ratio is not None:
            raise ValueError("give at most one of n_cheap and cheap_ratio")
        return self


class OptimizeConfig(BaseModel):
    """A suite of closed-loop campaigns on one evaluator pair."""

    model_config = ConfigDict(extra="forbid")

    campaigns: List[CampaignConfig] = Field(..., min_length=1)
    expensive: EvaluatorSpec
    cheap: Optional[EvaluatorSpec] = None
    n_repeats: int = Field(20, ge=2, description="Paired repeats per campaign")

    @model_validator(mode="after")
    def _check(self):
        if self.cheap is None and any(c.strategy.value == "bo_gemini" for c in self.campaigns):
            raise ValueError("bo_gemini campaigns need a cheap evaluator")
        return self


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    extra_quantiles: List[float] = Field(default_factory=lambda: [0.05, 0.1],
                                         description="Quantiles of measured expensive values used as looser targets")
    expected_seeds: Dict[str, List[int]] = Field(default_factory=dict,
                                                 description="Seeds each strategy label must have, e.g. {'bo_only': [0, 1]}")


COMMAND_CONFIGS: Dict[str, Type[BaseModel]] = {
    "gen-surfaces": GenSurfacesConfig,
    "regress": RegressConfig,
    "optimize": OptimizeConfig,
    "report": ReportConfig,
    "gemini": GeminiHyperparams,
}


def load_config(path: Optional[Union[str, Path]], model: Type[ConfigT], overrides: Optional[dict] = None) -> ConfigT:
    """
    Read and validate a JSON config file.

    Args:
        path: JSON file; None validates `overrides` alone
        model: Config class to validate against
        overrides: Top-level values that replace those in the file (e.g. seed)

    Raises:
        ConfigError: unreadable file, malformed JSON or failed validation
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return model(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def config_schema(command: str) -> dict:
    if command not in COMMAND_CONFIGS:
        raise ConfigError(f"no config schema for {command!r}; choose from {sorted(COMMAND_CONFIGS)}")
    return COMMAND_CONFIGS[command].model_json_schema()
