"""
Overlap — Central configuration.
Environment settings, tuning parameters and format constants.

Three layers:
1. `Settings`: process-level values read from the environment (.env aware)
2. `PeerConfig`: tuning parameters of one camera peer (JSON config file)
3. `SceneConfig`: synthetic-world generation (JSON config file)
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from overlap.core.errors import ConfigError

load_dotenv()


@dataclass
class Settings:
    """Process configuration, loaded from the environment / .env"""

    # --- Application ---
    APP_NAME: str = "overlap"
    APP_VERSION: str = "0.1.0"
    LOG_LEVEL: str = os.getenv("OVERLAP_LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("OVERLAP_LOG_FILE", "")

    # --- Transport ---
    DEFAULT_HOST: str = os.getenv("OVERLAP_HOST", "127.0.0.1")
    DEFAULT_PORT: int = int(os.getenv("OVERLAP_PORT", "5555"))
    CONNECT_RETRIES: int = 20
    CONNECT_RETRY_DELAY: float = 0.1  # seconds

    # --- Outputs ---
    OUTPUT_DIR: str = os.getenv("OVERLAP_OUTPUT_DIR", "out")
    DEFAULT_CONFIG_PATH: str = os.getenv(
        "OVERLAP_CONFIG", str(Path(__file__).resolve().parents[2] / "config" / "defaults.json")
    )


# Singleton
settings = Settings()


# --- Descriptors ---
DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
FEATURE_RECORD_BYTES = 8 + DESCRIPTOR_BYTES  # x f32, y f32, descriptor

# --- File formats ---
FRAME_FEATURES_MAGIC = b"XVFF"
GROUND_TRUTH_MAGIC = b"XVGT"
VOCABULARY_MAGIC = b"XVVC"
FILE_FORMAT_VERSION = 1

# --- Wire protocol ---
WIRE_MAGIC = b"XVQP"
WIRE_VERSION = 1
NO_FRAME = 0xFFFFFFFF

# --- Annotation ---
HISTOGRAM_ANGLE_BIN_DEG = 15.0
NO_INTERSECTION_BIN = "no_intersection"


# ============================================================
# Peer tuning parameters
# ============================================================

class PeerConfig(BaseModel):
    """
    All tuning symbols of one camera in one place.

    Defaults are the published parameter values; a run without a config
    file uses exactly these.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    camera_id: int = Field(1, ge=1, le=2)
    acquisition_rate: int = Field(30, gt=0)        # r (fps)
    sharing_rate: int = Field(6, gt=0)             # f (fps)
    init_window: int = Field(30, ge=0)             # L (frames)
    max_features: int = Field(1000, gt=0, le=0xFFFF)  # F

    # View-feature retrieval
    alpha: float = Field(0.03, ge=0.0, le=1.0)     # minimum view score
    beta: float = Field(3.0, gt=0.0)               # group span in seconds (beta * r frames)
    n_candidates: int = Field(50, gt=0)            # N (N * r candidates)
    min_group_size: int = Field(1, ge=1)

    # Local-feature matching
    gamma: int = Field(50, gt=0, le=256)           # max Hamming distance
    delta: float = Field(0.6, gt=0.0, lt=1.0)      # Lowe ratio
    use_direct_index: bool = False
    direct_index_level: int = Field(2, ge=0)

    # Geometric validation
    geometric_validation: bool = True
    mu: int = Field(8, ge=8)                       # minimum matches
    rho: int = Field(12, ge=0)                     # minimum inliers (strict >)
    max_iterations: int = Field(500, gt=0)
    success_probability: float = Field(0.99, gt=0.0, lt=1.0)
    tau: float = Field(2.0, gt=0.0)                # pixels
    error_metric: Literal["symmetric", "sampson"] = "symmetric"

    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_rates(self) -> "PeerConfig":
        if self.sharing_rate > self.acquisition_rate:
            raise ValueError("sharing_rate must not exceed acquisition_rate")
        if self.acquisition_rate % self.sharing_rate != 0:
            raise ValueError("acquisition_rate / sharing_rate must be a positive integer")
        return self

    @property
    def sharing_period(self) -> int:
        """Frames between two shared queries (r / f)."""
        return self.acquisition_rate // self.sharing_rate

    @property
    def group_span(self) -> float:
        """Maximum frame distance inside one candidate group (beta * r)."""
        return self.beta * self.acquisition_rate

    @property
    def candidate_cap(self) -> int:
        """Maximum number of scored candidates kept (N * r)."""
        return self.n_candidates * self.acquisition_rate


# ============================================================
# Synthetic scene configuration
# ============================================================

Vec3 = Tuple[float, float, float]


class BoundsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min: Vec3 = (-10.0, -6.0, 6.0)
    max: Vec3 = (70.0, 6.0, 14.0)

    @model_validator(mode="after")
    def _check_order(self) -> "BoundsConfig":
        if any(lo >= hi for lo, hi in zip(self.min, self.max)):
            raise ValueError("bounds.min must be strictly below bounds.max on every axis")
        return self


class IntrinsicsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float = Field(500.0, gt=0)
    fy: float = Field(500.0, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)


class TrajectoryConfig(BaseModel):
    """Piecewise-linear camera path with a constant viewing direction."""

    model_config = ConfigDict(extra="forbid")

    waypoints: List[Vec3] = Field(default_factory=lambda: [(0.0, 0.0, 0.0), (60.0, 0.0, 0.0)])
    forward: Vec3 = (0.0, 0.0, 1.0)
    up: Vec3 = (0.0, -1.0, 0.0)
    n_frames: int = Field(300, gt=0)
    alias_fraction: float = Field(0.0, ge=0.0, lt=1.0)

    @field_validator("waypoints")
    @classmethod
    def _at_least_one(cls, value: List[Vec3]) -> List[Vec3]:
        if not value:
            raise ValueError("a trajectory needs at least one waypoint")
        return value


class SceneConfig(BaseModel):
    """Keys of the scene/trajectory config file."""

    model_config = ConfigDict(extra="forbid")

    n_points: int = Field(2000, ge=1)
    bounds: BoundsConfig = Field(default_factory=BoundsConfig)
    intrinsics: IntrinsicsConfig = Field(default_factory=IntrinsicsConfig)
    camera_a: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    camera_b: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    shared_world: bool = True
    separate_world_offset: Vec3 = (1000.0, 0.0, 0.0)
    bit_flip_prob: float = Field(0.02, ge=0.0, lt=0.5)  # epsilon
    max_features: int = Field(1000, gt=0, le=0xFFFF)
    hamming_floor: int = Field(64, ge=0, le=256)
    seed: int = Field(0, ge=0)


# ============================================================
# Loaders
# ============================================================

def _read_json(path: Union[str, Path]) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _explain(exc: ValidationError) -> str:
    """Name the offending key of the first validation error."""
    first = exc.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "<root>"
    if first["type"] == "extra_forbidden":
        return f"unknown config key '{key}'"
    return f"invalid value for '{key}': {first['msg']}"


def load_peer_config(path: Optional[Union[str, Path]] = None, **overrides) -> PeerConfig:
    """Load a PeerConfig from JSON (defaults file when path is None)."""
    data = _read_json(path or settings.DEFAULT_CONFIG_PATH)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PeerConfig(**data)
    except ValidationError as exc:
        raise ConfigError(_explain(exc)) from exc


def load_scene_config(path: Optional[Union[str, Path]] = None, **overrides) -> SceneConfig:
    """Load a SceneConfig from JSON (built-in defaults when path is None)."""
    data = _read_json(path) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SceneConfig(**data)
    except ValidationError as exc:
        raise ConfigError(_explain(exc)) from exc
