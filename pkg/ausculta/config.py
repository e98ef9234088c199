"""
Configuration: .env loading, AUSCULTA_* environment defaults and the pydantic models
behind the training / probing config files. Relative paths in a config file resolve
against the directory of that file.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ausculta.errors import ConfigError
from ausculta.fileio import sha256_text

logger = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent.parent

try:
    from dotenv import load_dotenv
    load_dotenv(ROOT / ".env")
except ImportError:
    pass

LOG_LEVEL = (os.environ.get("AUSCULTA_LOG_LEVEL") or "INFO").strip().upper()
DATA_DIR = Path(os.environ.get("AUSCULTA_DATA_DIR") or str(ROOT / "data"))
DEFAULT_JOBS = int(os.environ.get("AUSCULTA_JOBS", "1"))


def _env_flag(name: str) -> bool:
    return (os.environ.get(name) or "").strip().lower() in ("1", "true", "yes")


def strict_default() -> bool:
    return _env_flag("AUSCULTA_STRICT")


def seed_override() -> Optional[int]:
    """AUSCULTA_SEED, read at call time so tests can patch the environment."""
    raw = (os.environ.get("AUSCULTA_SEED") or "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"AUSCULTA_SEED must be an integer, got {raw!r}") from e


class IngestConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    target_rate: int = Field(16000, gt=0)
    silence_threshold_db: float = Field(-60.0, lt=0)
    silence_frame_ms: float = Field(25.0, gt=0)


class FeatureConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_mels: int = Field(64, ge=1)
    win_ms: float = Field(64.0, gt=0)
    hop_ms: float = Field(32.0, gt=0)
    f_min: float = 0.0
    f_max: Optional[float] = None
    mel_scale: Literal["htk", "slaney"] = "htk"
    per_band_norm: bool = False


class SpecAugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_time_masks: int = Field(2, ge=0)
    # None: 10% of the spectrogram's frames
    max_time_frames: Optional[int] = Field(None, ge=0)
    n_freq_masks: int = Field(2, ge=0)
    max_freq_bands: int = Field(8, ge=0)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    loudness_range: tuple[float, float] = (0.9, 1.1)
    spec_aug: SpecAugmentConfig = SpecAugmentConfig()
    seed: Optional[int] = None

    @field_validator("loudness_range")
    @classmethod
    def _bounds(cls, v: tuple[float, float]) -> tuple[float, float]:
        lo, hi = v
        if not (0 < lo <= hi):
            raise ValueError(f"loudness bounds must satisfy 0 < lo <= hi, got {v}")
        return v


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    encoder: Literal["conv", "melpool"] = "conv"
    d_e: int = Field(128, ge=1)
    d_p: int = Field(32, ge=1)
    channels: tuple[int, int] = (8, 16)


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus: Path
    out_dir: Path = Path("runs/pretrain")
    cache_dir: Optional[Path] = None
    batch_size: int = 8
    epochs: int = Field(200, ge=1)
    lr: float = Field(1e-4, ge=0)
    lr_decay: float = Field(0.99, gt=0)
    dims: ModelDims = ModelDims()
    # dataset_id -> crop length in ms; merged over the built-in crop table
    crop_table: dict[str, int] = {}
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    ingest: IngestConfig = IngestConfig()
    features: FeatureConfig = FeatureConfig()

    @model_validator(mode="after")
    def _crop_lengths(self) -> "PretrainConfig":
        bad = {k: v for k, v in self.crop_table.items() if v <= 0}
        if bad:
            raise ValueError(f"crop lengths must be positive: {bad}")
        return self


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(64, ge=1)
    lr: float = Field(1e-4, ge=0)
    lr_decay: float = Field(0.99, gt=0)
    batch_size: int = Field(32, ge=1)
    space: Literal["encoder", "projector"] = "encoder"
    seed: int = 0


def _resolve(base: Path, p: Optional[Path]) -> Optional[Path]:
    if p is None or p.is_absolute():
        return p
    return (base / p).resolve()


def load_pretrain_config(path: Path | str, seed: Optional[int] = None) -> PretrainConfig:
    """
    Read a training config JSON. Seed precedence: explicit `seed` argument, then
    AUSCULTA_SEED, then the file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    try:
        cfg = PretrainConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid training config:\n{e}") from e

    base = path.resolve().parent
    updates: dict = {
        "corpus": _resolve(base, cfg.corpus),
        "out_dir": _resolve(base, cfg.out_dir),
        "cache_dir": _resolve(base, cfg.cache_dir),
    }
    env_seed = seed_override()
    if seed is not None:
        updates["seed"] = seed
    elif env_seed is not None:
        logger.info("AUSCULTA_SEED=%d overrides config seed %d", env_seed, cfg.seed)
        updates["seed"] = env_seed
    return cfg.model_copy(update=updates)


def config_hash(model: BaseModel) -> str:
    return sha256_text(model.model_dump_json())
