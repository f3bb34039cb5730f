"""
Configuration models and process-level settings.

Settings are read from OAM_* environment variables (and an optional .env
file); CLI flags override them through RunConfig.
"""

import os
from functools import lru_cache
from pathlib import Path
from typing import ClassVar, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

SAMPLE_RATE_HZ = 16000
SUPPORTED_WINDOWS_MS = tuple(range(60, 201, 20))
DEFAULT_WINDOW_MS = 160


class FeatureConfig(BaseModel):
    """Mel front-end parameters"""

    model_config = ConfigDict(frozen=True)

    sample_rate_hz: int = SAMPLE_RATE_HZ
    frame_length: int = 320  # 20 ms
    frame_shift: int = 80  # 5 ms
    n_fft: int = 512
    n_mels: int = 40
    fmin_hz: float = 100.0
    fmax_hz: float = 7800.0
    log_floor: float = 1e-10

    @field_validator("sample_rate_hz", "frame_length", "frame_shift", "n_fft", "n_mels")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    def n_frames(self, window_ms: int) -> int:
        """Frame count for a window: one frame per shift"""
        return window_ms * self.sample_rate_hz // 1000 // self.frame_shift


class TrainConfig(BaseModel):
    """Optimizer and batching recipe"""

    model_config = ConfigDict(frozen=True)

    epochs: int = 10
    learning_rate: float = 0.001
    sentences_per_batch: int = 8
    # When set, batches hold this many segments instead of whole sentences
    fixed_batch_segments: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 42
    micro_batch_size: int = 32

    @field_validator("epochs", "sentences_per_batch", "micro_batch_size")
    @classmethod
    def _positive_int(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("fixed_batch_segments")
    @classmethod
    def _positive_optional(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("learning_rate", "epsilon")
    @classmethod
    def _positive_float(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("beta1", "beta2")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("must lie in (0, 1)")
        return value


class SelectionConfig(BaseModel):
    """Forward feature selection for the speaker-level linear models"""

    model_config = ConfigDict(frozen=True)

    max_features: int = 10
    min_improvement: float = 1e-3
    ridge: float = 1e-6

    @field_validator("max_features")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("ridge", "min_improvement")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative")
        return value


class Settings(BaseSettings):
    """Process-level defaults"""

    model_config = SettingsConfigDict(
        env_prefix="OAM_",
        env_file=".env",
        env_nested_delimiter="__",
        extra="ignore",
    )

    log_level: str = "INFO"
    seed: int = 42
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1)
    window_ms: int = DEFAULT_WINDOW_MS
    tier_name: str = "phones"
    inference_batch_size: int = 16
    train: TrainConfig = TrainConfig()
    selection: SelectionConfig = SelectionConfig()
    features: FeatureConfig = FeatureConfig()


@lru_cache
def get_settings() -> Settings:
    return Settings()


def validate_window(window_ms: int) -> int:
    if window_ms not in SUPPORTED_WINDOWS_MS:
        raise ValueError(
            f"window_ms must be one of {list(SUPPORTED_WINDOWS_MS)}, got {window_ms}"
        )
    return window_ms


class RunConfig(BaseModel):
    """Validated view of one CLI invocation"""

    command: str
    inputs: dict[str, Path] = Field(default_factory=dict)
    model_path: Optional[Path] = None
    window_ms: int = DEFAULT_WINDOW_MS
    seed: int = 42
    threads: int = 1
    out_dir: Path = Path(".")
    train: TrainConfig = TrainConfig()
    selection: SelectionConfig = SelectionConfig()

    REQUIRED_INPUTS: ClassVar[dict[str, tuple[str, ...]]] = {
        "train": ("manifest",),
        "eval": ("manifest",),
        "score": ("manifest",),
        "correlate": ("scores", "ratings"),
        "fit": ("scores", "ratings"),
        "sweep": ("train_manifest", "test_manifest"),
        "saliency": ("wav", "alignment"),
        "cov": ("scores",),
        "jitter": ("manifest",),
        "align-error": ("reference", "hypothesis"),
    }
    NEEDS_MODEL: ClassVar[set[str]] = {"eval", "score", "saliency"}

    @field_validator("window_ms")
    @classmethod
    def _window(cls, value: int) -> int:
        return validate_window(value)

    @field_validator("threads")
    @classmethod
    def _threads(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @model_validator(mode="after")
    def _required_paths(self) -> "RunConfig":
        missing = [
            name for name in self.REQUIRED_INPUTS.get(self.command, ())
            if name not in self.inputs
        ]
        if missing:
            raise ValueError(f"{self.command}: missing input(s) {missing}")
        if self.command in self.NEEDS_MODEL and self.model_path is None:
            raise ValueError(f"{self.command}: --model is required")
        return self
