import json
import os
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path

from dotenv import load_dotenv

from utils.errors import DataError
from utils.logger import get_logger

load_dotenv()

logger = get_logger("Config")

SCHEMA_VERSION = 1
__version__ = "0.3.0"


def _env(name: str, default, cast=float):
    raw = os.getenv(f"GRIDBP_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        logger.warning(f"Ignoring GRIDBP_{name}={raw!r}: not a valid {cast.__name__}")
        return default


@dataclass(frozen=True)
class NlpcaConfig:
    epochs: int = _env("NLPCA_EPOCHS", 2000, int)
    lr: float = _env("NLPCA_LR", 0.05)
    batch_size: int = _env("NLPCA_BATCH_SIZE", 0, int)  # 0 = full batch
    inversion_steps: int = _env("INVERSION_STEPS", 500, int)
    inversion_lr: float = _env("INVERSION_LR", 0.05)
    inversion_method: str = os.getenv("GRIDBP_INVERSION_METHOD", "gradient")
    weight_decay: float = _env("NLPCA_WEIGHT_DECAY", 0.0)
    tol: float = _env("NLPCA_TOL", 1e-5)  # relative loss improvement over `patience` epochs; 0 = off
    patience: int = _env("NLPCA_PATIENCE", 100, int)


@dataclass(frozen=True)
class InferenceConfig:
    max_outer: int = _env("MAX_OUTER", 20, int)
    tol: float = _env("TOL", 1e-6)
    damping: float = _env("DAMPING", 1.0)


@dataclass(frozen=True)
class EmConfig:
    em_iters: int = _env("EM_ITERS", 5, int)
    rollback: bool = True


@dataclass(frozen=True)
class DetectionConfig:
    threshold: float = _env("DETECT_THRESHOLD", 0.99)
    window: int = _env("DETECT_WINDOW", 0, int)  # 0 = full validation window
    block_hours: int = _env("DETECT_BLOCK_HOURS", 24, int)


@dataclass(frozen=True)
class BenchmarkConfig:
    buses_per_section: int = 3
    hours: int = 96
    repeats: int = 3


@dataclass(frozen=True)
class GridConfig:
    nlpca: NlpcaConfig = field(default_factory=NlpcaConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    em: EmConfig = field(default_factory=EmConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    threads: int = _env("THREADS", 1, int)

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, section: str, **values) -> "GridConfig":
        """Return a copy with non-None values replaced in one section."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "threads":
            return replace(self, threads=values["threads"])
        return replace(self, **{section: replace(getattr(self, section), **values)})


def load_config(path: str | Path | None = None) -> GridConfig:
    """
    Load configuration from a JSON file layered over the environment defaults.

    The file holds one object per section (``nlpca``, ``inference``, ``em``,
    ``detection``, ``benchmark``) plus an optional integer ``threads``.

    Raises
    ------
    DataError
        If the file is unreadable or names an unknown section or key.
    """
    config = GridConfig()
    if path is None:
        return config
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read config file {path}: {e}")
    if not isinstance(document, dict):
        raise DataError(f"Config file {path} must hold a JSON object")

    for section, values in document.items():
        if section.startswith("_"):
            continue  # comments
        if section == "threads":
            config = config.override("threads", threads=int(values))
            continue
        if section not in {f.name for f in fields(GridConfig)}:
            raise DataError(f"Unknown config section '{section}' in {path}")
        known = {f.name for f in fields(getattr(config, section))}
        unknown = set(values) - known
        if unknown:
            raise DataError(f"Unknown keys {sorted(unknown)} in config section '{section}'")
        config = config.override(section, **values)
    logger.info(f"Loaded configuration from {path}")
    return config
