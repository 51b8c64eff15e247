"""Harness Configuration

Process-wide settings come from the environment (and an optional ``.env``);
experiment settings come from a TOML file.
"""
from pathlib import Path
from typing import Dict, List, Optional, Union
import logging
import tomllib

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .errors import ConfigError
from .models import Backend, Dialect, OptLevel, PassId

logger = logging.getLogger(__name__)

BUNDLED_MODELS = ("tinynet-A", "tinynet-B", "tinynet-C")
DESK_CORPUS = "desk"


class Settings(BaseSettings):
    """Harness settings loaded from environment variables"""

    # Execution
    DELTADIFF_THREADS: int = Field(0, ge=0)  # 0 = cpu count
    TRACE_BUDGET_MB: int = Field(256, ge=1)

    # Defaults for experiment configs
    DEFAULT_TOP_K: int = Field(5, ge=1)
    DEFAULT_REPEATS: int = Field(10, ge=1)
    DEFAULT_WARMUP: int = Field(1, ge=0)

    # Analysis
    RBO_P: float = Field(0.9, gt=0, lt=1)
    ACTIVATION_THRESHOLD: float = Field(1e-5, ge=0)
    SIGNIFICANCE_LEVEL: float = Field(0.05, gt=0, lt=1)

    # Application Settings
    LOG_LEVEL: str = "INFO"

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"


settings = Settings()


class OptConfig(BaseModel):
    levels: List[OptLevel] = Field(default_factory=lambda: [OptLevel.BASIC])
    enable: List[PassId] = Field(default_factory=list)
    disable: List[PassId] = Field(default_factory=list)

    @model_validator(mode="before")
    @classmethod
    def _single_level(cls, data):
        if isinstance(data, dict) and "level" in data and "levels" not in data:
            data = dict(data)
            data["levels"] = [data.pop("level")]
        return data

    @field_validator("enable", "disable", mode="before")
    @classmethod
    def _parse_passes(cls, v):
        return [PassId.parse(p) if isinstance(p, str) else p for p in (v or [])]


class NoiseConfig(BaseModel):
    """Noise axis; an empty sigma list means clean variants only"""
    sigma: List[float] = Field(default_factory=list)
    clamp: float = Field(0.011, ge=0)
    seed: Optional[int] = Field(None, ge=0)
    overrides: Dict[str, float] = Field(default_factory=dict)

    @field_validator("sigma", mode="before")
    @classmethod
    def _scalar_sigma(cls, v):
        if v is None:
            return []
        return [v] if isinstance(v, (int, float)) else v

    @field_validator("sigma")
    @classmethod
    def _non_negative(cls, v: List[float]) -> List[float]:
        if any(s < 0 for s in v):
            raise ValueError("noise sigma must be >= 0")
        return v


class CorpusConfig(BaseModel):
    path: str = DESK_CORPUS


class AnalysisConfig(BaseModel):
    rbo_p: float = Field(default_factory=lambda: settings.RBO_P, gt=0, lt=1)
    threshold: float = Field(default_factory=lambda: settings.ACTIVATION_THRESHOLD, ge=0)


class OutputConfig(BaseModel):
    dir: str = "out"


class ExperimentConfig(BaseModel):
    """One experiment: models crossed with the variant axes"""
    models: List[str] = Field(..., min_length=1)
    dialects: List[Dialect] = Field(default_factory=lambda: [Dialect.NATIVE])
    backends: List[Backend] = Field(default_factory=lambda: [Backend.REFERENCE])
    opt: OptConfig = Field(default_factory=OptConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    top_k: int = Field(default_factory=lambda: settings.DEFAULT_TOP_K, ge=1)
    repeats: int = Field(default_factory=lambda: settings.DEFAULT_REPEATS, ge=1)
    warmup: int = Field(default_factory=lambda: settings.DEFAULT_WARMUP, ge=0)
    seed: int = Field(0, ge=0)
    baseline: Optional[str] = None
    base_dir: Path = Field(default_factory=Path.cwd, exclude=True)

    @model_validator(mode="before")
    @classmethod
    def _single_model(cls, data):
        if isinstance(data, dict) and "model" in data:
            data = dict(data)
            model = data.pop("model")
            data.setdefault("models", [model] if isinstance(model, str) else model)
        return data

    @field_validator("dialects", "backends", mode="before")
    @classmethod
    def _default_axis(cls, v, info):
        if not v:
            return [Dialect.NATIVE] if info.field_name == "dialects" else [Backend.REFERENCE]
        return [v] if isinstance(v, str) else v

    @field_validator("dialects", "backends")
    @classmethod
    def _dedupe(cls, v):
        return list(dict.fromkeys(v))

    @property
    def noise_seed(self) -> int:
        return self.noise.seed if self.noise.seed is not None else self.seed

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output.dir)

    @property
    def corpus_is_desk(self) -> bool:
        return self.corpus.path == DESK_CORPUS

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def model_ref(self, model: str) -> Union[str, Path]:
        """Bundled model name, or a manifest path resolved against the config file"""
        if model in BUNDLED_MODELS:
            return model
        return self.resolve(model)

    def check_paths(self) -> None:
        for model in self.models:
            ref = self.model_ref(model)
            if isinstance(ref, Path) and not ref.exists():
                raise ConfigError(f"Model manifest not found: {ref}")
        if not self.corpus_is_desk and not self.resolve(self.corpus.path).is_dir():
            raise ConfigError(f"Corpus directory not found: {self.resolve(self.corpus.path)}")


def load_experiment_config(
    path: Union[str, Path],
    *,
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    """Parse and validate an experiment TOML file; CLI overrides win"""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Cannot parse config {path}: {e}") from e
    return experiment_config_from_dict(data, base_dir=path.parent, seed=seed, out=out)


def experiment_config_from_dict(
    data: dict,
    *,
    base_dir: Optional[Path] = None,
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output"] = {**data.get("output", {}), "dir": str(Path(out).absolute())}
    try:
        config = ExperimentConfig(base_dir=base_dir or Path.cwd(), **data)
    except (ValidationError, ValueError, TypeError) as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e
    logger.debug(f"Loaded experiment config with models {config.models}")
    return config
