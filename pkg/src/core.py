"""
Core configuration, errors, constants and logging for trustsync.
"""
from __future__ import annotations

import logging
import sys
from contextlib import contextmanager
from logging.handlers import BufferingHandler
from pathlib import Path
from typing import Any, ClassVar, Dict, Iterator, List, Optional, Sequence

import yaml
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- Logging ---

LOG_FILE = Path("trustsync.log")
ROOT_LOGGER = "trustsync"


def setup_logging(level: int = logging.WARNING, log_file: Optional[Path] = LOG_FILE) -> logging.Logger:
    """Configure and return the root application logger."""
    logger = logging.getLogger(ROOT_LOGGER)
    if logger.handlers:
        return logger
    logger.setLevel(logging.DEBUG)
    fmt = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s", datefmt="%Y-%m-%d %H:%M:%S")
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(fmt)
    logger.addHandler(console)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(fmt)
        logger.addHandler(file_handler)
    return logger


def reset_logging() -> None:
    """Detach and close every handler of the root application logger."""
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


def get_logger(name: str) -> logging.Logger:
    """Return a child logger under the application root."""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


class _RecordBuffer(BufferingHandler):
    """Keeps records in a picklable form: message rendered, traceback as text."""

    def emit(self, record: logging.LogRecord) -> None:
        if record.exc_info:
            record.exc_text = logging.Formatter().formatException(record.exc_info)
        record.msg, record.args, record.exc_info = record.getMessage(), None, None
        super().emit(record)


@contextmanager
def capture_logs() -> Iterator[List[logging.LogRecord]]:
    """Buffer application records while no handler is attached.

    joblib worker processes never run `setup_logging`; their records are
    collected here, returned with the result and passed to `replay_logs` in
    the parent. Where handlers exist the records are emitted as usual and the
    yielded list stays empty.
    """
    root = logging.getLogger(ROOT_LOGGER)
    if root.handlers:
        yield []
        return
    buffer = _RecordBuffer(capacity=sys.maxsize)
    level, propagate = root.level, root.propagate
    root.addHandler(buffer)
    root.setLevel(logging.DEBUG)
    root.propagate = False
    try:
        yield buffer.buffer
    finally:
        root.removeHandler(buffer)
        root.setLevel(level)
        root.propagate = propagate


def replay_logs(records: Sequence[logging.LogRecord]) -> None:
    for record in records:
        target = logging.getLogger(record.name)
        if target.isEnabledFor(record.levelno):
            target.handle(record)


# --- Errors ---

class TrustSyncError(Exception):
    """Base class for every error raised by trustsync."""


class SchemaError(TrustSyncError, ValueError):
    """Input file does not follow the expected layout."""


class DegenerateSessionError(TrustSyncError, ValueError):
    """Session too short for the requested operation."""


class UndefinedLossError(TrustSyncError, ValueError):
    pass


class LabelError(TrustSyncError, ValueError):
    """Trust amounts or class labels unusable for the requested operation."""


class AlignmentError(TrustSyncError):
    pass


class ArtifactMissingError(TrustSyncError, FileNotFoundError):
    pass


class EmptyInputError(TrustSyncError, ValueError):
    pass


# --- Constants ---

AU_COLUMNS: List[str] = [
    "AU01_r", "AU02_r", "AU04_r", "AU05_r", "AU06_r", "AU07_r", "AU09_r",
    "AU10_r", "AU12_r", "AU14_r", "AU15_r", "AU17_r", "AU20_r", "AU23_r",
    "AU25_r", "AU26_r", "AU45_r",
]

AU_NAMES: List[str] = [
    "Inner Brow", "Outer Brow", "Brow Lower", "Lid Raise", "Cheek Raise",
    "Lid Tighten", "Nose Wrinkle", "Lip Raise", "Lip Pull", "Dimple",
    "Lip Corner", "Chin Raise", "Lip Stretch", "Lip Tighten", "Lip Part",
    "Jaw Drop", "Blink",
]

K_AU = len(AU_COLUMNS)

AU_INTENSITY_MAX = 5.0

TRUST_AMOUNTS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

DEFAULT_SIGMAS = (2.0, 4.0, 8.0, 16.0, 32.0)

# --- Module configs ---


class PreprocessConfig(BaseModel):
    """Quality gate, smoothing and imputation settings."""
    model_config = ConfigDict(frozen=True)

    tau: float = Field(default=0.7, gt=0.0, lt=1.0)
    exclusion_fraction: float = Field(default=0.30, ge=0.0, le=1.0)
    impute: bool = False
    d_max_cap_divisor: int = Field(default=10, ge=1)


class WCCParams(BaseModel):
    """Windowed cross-correlation settings, all in seconds except the threshold."""
    model_config = ConfigDict(frozen=True)

    window_seconds: float = Field(default=5.0, gt=0.0)
    increment_seconds: float = Field(default=1.0, gt=0.0)
    max_lag_seconds: float = Field(default=5.0, gt=0.0)
    sync_threshold: float = Field(default=0.4, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def increment_within_window(self) -> "WCCParams":
        if self.increment_seconds > self.window_seconds:
            raise ValueError("increment_seconds must not exceed window_seconds")
        return self


# --- Run config ---


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class RunConfig(BaseModel):
    """Every tunable of a pipeline run; loaded from a flat key = value file or YAML."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    tau: float = Field(default=0.7, gt=0.0, lt=1.0)
    exclusion_fraction: float = Field(default=0.30, ge=0.0, le=1.0)
    impute: bool = False
    d_max_cap_divisor: int = Field(default=10, ge=1)
    theta_seconds: float = Field(default=5.0, gt=0.0)
    mp_atoms: int = Field(default=25, ge=1)
    mp_sigmas: List[float] = Field(default_factory=lambda: list(DEFAULT_SIGMAS))
    lam: float = Field(default=0.0518, ge=0.0, alias="lambda")
    alpha: float = Field(default=0.802, ge=0.0, le=1.0)
    folds: int = Field(default=5, ge=2)
    min_repeats: int = Field(default=50, ge=1)
    seed: int = 0
    n_trees: int = Field(default=20, ge=1)
    wcc_window_seconds: float = Field(default=5.0, gt=0.0)
    wcc_increment_seconds: float = Field(default=1.0, gt=0.0)
    wcc_max_lag_seconds: float = Field(default=5.0, gt=0.0)
    wcc_threshold: float = Field(default=0.4, gt=0.0, lt=1.0)
    shuffle_interval_seconds: float = Field(default=10.0, gt=0.0)
    jobs: int = Field(default=1, ge=1)
    synth_sessions: int = Field(default=72, ge=2)
    synth_frames: int = Field(default=1800, ge=10)
    synth_frame_rate: float = Field(default=30.0, gt=0.0)
    synth_bump_rate: float = Field(default=12.0, gt=0.0)
    synth_bump_width: float = Field(default=10.0, gt=0.0)
    synth_noise_sd: float = Field(default=0.05, ge=0.0)
    synth_lag_frames: int = Field(default=10, ge=0)
    synth_coupled_channels: List[int] = Field(default_factory=lambda: [0, 2, 4, 8, 14, 16])
    synth_dropouts: int = Field(default=0, ge=0)

    _instance: ClassVar[Optional["RunConfig"]] = None

    @field_validator("mp_sigmas", mode="before")
    @classmethod
    def parse_sigmas(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("synth_coupled_channels", mode="before")
    @classmethod
    def parse_channels(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("mp_sigmas")
    @classmethod
    def sigmas_positive(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("mp_sigmas must be a non-empty list")
        if any(s <= 0 for s in v):
            raise ValueError("mp_sigmas must all be positive")
        return v

    @field_validator("synth_coupled_channels")
    @classmethod
    def channels_in_range(cls, v: List[int]) -> List[int]:
        if any(k < 0 or k >= K_AU for k in v):
            raise ValueError(f"synth_coupled_channels must lie in [0, {K_AU - 1}]")
        return v

    @model_validator(mode="after")
    def wcc_increment_within_window(self) -> "RunConfig":
        if self.wcc_increment_seconds > self.wcc_window_seconds:
            raise ValueError("wcc_increment_seconds must not exceed wcc_window_seconds")
        return self

    @classmethod
    def load(cls, config_path: Optional[Path] = None) -> "RunConfig":
        if config_path is None:
            config_path = Path("trustsync.conf")
        config_path = Path(config_path)
        if not config_path.exists():
            return cls()
        if config_path.suffix.lower() in {".yaml", ".yml"}:
            with open(config_path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        else:
            data = {k: v for k, v in dotenv_values(config_path).items() if v is not None}
        return cls._from_dict(data)

    @classmethod
    def _from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls.model_validate({k: v for k, v in data.items() if v is not None})

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a copy with non-None overrides applied and re-validated."""
        data = self.model_dump(by_alias=True)
        for key, value in overrides.items():
            if value is None:
                continue
            data["lambda" if key == "lam" else key] = value
        return RunConfig.model_validate(data)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            tau=self.tau,
            exclusion_fraction=self.exclusion_fraction,
            impute=self.impute,
            d_max_cap_divisor=self.d_max_cap_divisor,
        )

    def wcc_params(self) -> WCCParams:
        return WCCParams(
            window_seconds=self.wcc_window_seconds,
            increment_seconds=self.wcc_increment_seconds,
            max_lag_seconds=self.wcc_max_lag_seconds,
            sync_threshold=self.wcc_threshold,
        )

    def synth_spec(self):
        from .controls import SynthSpec

        return SynthSpec.from_config(self)

    @classmethod
    def get_instance(cls, config_path: Optional[Path] = None) -> "RunConfig":
        if cls._instance is None:
            cls._instance = cls.load(config_path)
        return cls._instance

    @classmethod
    def reset_instance(cls) -> None:
        cls._instance = None


def get_config(config_path: Optional[Path] = None) -> RunConfig:
    return RunConfig.get_instance(config_path)
