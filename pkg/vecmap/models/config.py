"""
Run configuration for vecmap.

This module provides:
- SceneConfig / NoiseConfig / DataConfig: synthetic data generation knobs
- ModelConfig: network dimensions (presets: desk, paper, tiny)
- TrainConfig: two-stage training schedule and augmentation
- EvalRun: evaluation request
- RunConfig: all of the above, resolved from a flat key-value file

Resolution order for every key: CLI flag > VECMAP_<KEY> environment
variable > config file > preset default.
"""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vecmap.models.schemas import GridSpec, KeypointRepr, MetricKind
from vecmap.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "VECMAP_"

M = TypeVar("M", bound=BaseModel)


class TargetSampling(str, Enum):
    """How training target polylines are sampled before tokenization."""

    NONE = "none"
    CURVATURE = "curvature"
    FIXED_INTERVAL = "fixed_interval"


class SceneConfig(BaseModel):
    """Procedural scene generation parameters."""

    model_config = ConfigDict(frozen=True)

    extent_w_m: float = Field(30.0, gt=0.0)
    extent_h_m: float = Field(15.0, gt=0.0)
    boundaries_min: int = Field(1, ge=0)
    boundaries_max: int = Field(2, ge=0)
    dividers_min: int = Field(1, ge=0)
    dividers_max: int = Field(2, ge=0)
    crossings_min: int = Field(0, ge=0)
    crossings_max: int = Field(1, ge=0)
    step_m: float = Field(1.0, gt=0.0)
    heading_sigma_rad: float = Field(0.08, ge=0.0)
    max_heading_rad: float = Field(0.5, gt=0.0, lt=1.5)
    divider_offset_min_m: float = Field(2.5, gt=0.0)
    divider_offset_max_m: float = Field(4.0, gt=0.0)
    crossing_width_m: float = Field(3.0, gt=0.0)
    crossing_depth_m: float = Field(4.0, gt=0.0)
    rdp_epsilon_m: float = Field(0.05, ge=0.0)
    n_v_max: int = Field(20, ge=2)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_ranges(self) -> "SceneConfig":
        """Count ranges and offset ranges must be ordered."""
        for name in ("boundaries", "dividers", "crossings"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if lo > hi:
                raise ValueError(f"{name}_min ({lo}) exceeds {name}_max ({hi})")
        if self.divider_offset_min_m > self.divider_offset_max_m:
            raise ValueError("divider_offset_min_m exceeds divider_offset_max_m")
        return self

    @property
    def origin(self) -> Tuple[float, float]:
        """Lower-left corner; the extent is centered on the ego position."""
        return (-self.extent_w_m / 2.0, -self.extent_h_m / 2.0)


class NoiseConfig(BaseModel):
    """Rasterization noise parameters."""

    model_config = ConfigDict(frozen=True)

    stroke_cells: float = Field(2.0, gt=0.0)
    pixel_sigma: float = Field(0.05, ge=0.0)
    occlusions: int = Field(2, ge=0)
    occlusion_max_frac: float = Field(0.15, ge=0.0, le=1.0)

    @classmethod
    def clean(cls, stroke_cells: float = 2.0) -> "NoiseConfig":
        """Noise-free, occlusion-free configuration."""
        return cls(stroke_cells=stroke_cells, pixel_sigma=0.0, occlusions=0)


class DataConfig(BaseModel):
    """Dataset size and split."""

    model_config = ConfigDict(frozen=True)

    n_scenes: int = Field(8, ge=1)
    train_fraction: float = Field(1.0, ge=0.0, le=1.0)


class ModelConfig(BaseModel):
    """Network dimensions."""

    model_config = ConfigDict(frozen=True)

    hidden: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    ffn_mult: int = Field(2, ge=1)
    encoder_layers: int = Field(2, ge=0)
    detector_layers: int = Field(2, ge=1)
    generator_layers: int = Field(2, ge=1)
    n_max: int = Field(12, ge=1)
    patch: int = Field(4, ge=1)
    n_points: int = Field(4, ge=1)
    in_channels: int = Field(3, ge=1)
    n_v_max: int = Field(20, ge=2)
    grid_width_cells: int = Field(100, ge=2)
    grid_height_cells: int = Field(50, ge=2)
    cell_m: float = Field(0.3, gt=0.0)
    repr_kind: KeypointRepr = KeypointRepr.SME
    dropout: float = Field(0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        """Hidden size must split evenly across heads."""
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")
        return self

    @property
    def k(self) -> int:
        """Keypoints per element."""
        return self.repr_kind.k

    @property
    def grid(self) -> GridSpec:
        """Quantization grid, centered on the ego position."""
        return GridSpec(
            width_cells=self.grid_width_cells,
            height_cells=self.grid_height_cells,
            cell_m=self.cell_m,
            origin=(
                -self.grid_width_cells * self.cell_m / 2.0,
                -self.grid_height_cells * self.cell_m / 2.0,
            ),
        )

    @property
    def max_seq_len(self) -> int:
        """Longest vertex token sequence including EOS."""
        return 2 * self.n_v_max + 1


class TrainConfig(BaseModel):
    """Two-stage training parameters."""

    model_config = ConfigDict(frozen=True)

    dataset_dir: str = "data"
    batch_size: int = Field(8, ge=1)
    steps_stage1: int = Field(500, ge=0)
    steps_stage2: int = Field(100, ge=0)
    base_lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(200, ge=0)
    decay_frac: float = Field(0.9, ge=0.0, le=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    aug_prob: float = Field(0.3, ge=0.0, le=1.0)
    aug_sigma_m: float = Field(0.15, ge=0.0)
    seed: int = Field(0, ge=0)
    repr_kind: KeypointRepr = KeypointRepr.SME
    sampling: TargetSampling = TargetSampling.NONE
    curvature_deg: float = Field(5.0, gt=0.0)
    interval_m: float = Field(2.0, gt=0.0)
    log_every: int = Field(10, ge=1)

    def decay_step(self, total_steps: int) -> int:
        """Step at which the learning rate drops by 10x."""
        return int(round(self.decay_frac * total_steps))


class EvalRun(BaseModel):
    """One evaluation request."""

    checkpoint: Optional[str] = None
    dataset_dir: str = "data"
    split: str = "val"
    thresholds: Tuple[float, ...] = (0.5, 1.0, 1.5)
    metrics: Tuple[MetricKind, ...] = (MetricKind.CHAMFER, MetricKind.FRECHET)
    score_threshold: float = Field(0.3, ge=0.0)
    n_pts: int = Field(100, ge=2)
    oracle: bool = False

    @field_validator("thresholds")
    @classmethod
    def check_thresholds(cls, v):
        """Thresholds must be positive and strictly ascending."""
        if not v:
            raise ValueError("at least one threshold is required")
        if any(t <= 0 for t in v):
            raise ValueError(f"thresholds must be positive: {v}")
        if any(b <= a for a, b in zip(v[:-1], v[1:])):
            raise ValueError(f"thresholds must be strictly ascending: {v}")
        return v

    @field_validator("split")
    @classmethod
    def check_split(cls, v):
        """Split must be one the dataset manifest defines."""
        if v not in ("train", "val", "all"):
            raise ValueError(f"unknown split {v!r}")
        return v


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "hidden": 64,
        "heads": 4,
        "encoder_layers": 2,
        "detector_layers": 2,
        "generator_layers": 2,
        "n_max": 12,
        "extent_w_m": 30.0,
        "extent_h_m": 15.0,
        "grid_width_cells": 100,
        "grid_height_cells": 50,
        "cell_m": 0.3,
        "n_v_max": 20,
        "batch_size": 8,
        "warmup_steps": 200,
        "interval_m": 2.0,
    },
    "paper": {
        "hidden": 256,
        "heads": 8,
        "encoder_layers": 2,
        "detector_layers": 6,
        "generator_layers": 6,
        "n_max": 100,
        "extent_w_m": 60.0,
        "extent_h_m": 30.0,
        "grid_width_cells": 200,
        "grid_height_cells": 100,
        "cell_m": 0.3,
        "n_v_max": 50,
        "batch_size": 32,
        "warmup_steps": 5000,
        "base_lr": 1e-4,
        "interval_m": 1.0,
        "boundaries_max": 4,
        "dividers_max": 4,
        "crossings_max": 2,
    },
    "tiny": {
        "hidden": 8,
        "heads": 2,
        "encoder_layers": 1,
        "detector_layers": 1,
        "generator_layers": 1,
        "n_max": 4,
        "boundaries_max": 1,
        "extent_w_m": 16.0,
        "extent_h_m": 8.0,
        "grid_width_cells": 16,
        "grid_height_cells": 8,
        "cell_m": 1.0,
        "n_v_max": 6,
        "batch_size": 2,
        "warmup_steps": 2,
        "step_m": 2.0,
        "divider_offset_min_m": 2.0,
        "divider_offset_max_m": 2.5,
        "crossing_width_m": 2.0,
        "crossing_depth_m": 2.5,
        "interval_m": 2.0,
    },
}


class RunConfig(BaseModel):
    """Fully resolved configuration of one run."""

    model_config = ConfigDict(frozen=True)

    preset: str = "desk"
    scene: SceneConfig = Field(default_factory=SceneConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def check_grid_covers_extent(self) -> "RunConfig":
        """The token grid must span the scene extent."""
        grid = self.model.grid
        too_narrow = grid.width_m + 1e-9 < self.scene.extent_w_m
        too_short = grid.height_m + 1e-9 < self.scene.extent_h_m
        if too_narrow or too_short:
            raise ValueError(
                f"grid {grid.width_m:.2f}x{grid.height_m:.2f} m does not cover extent "
                f"{self.scene.extent_w_m:.2f}x{self.scene.extent_h_m:.2f} m"
            )
        return self

    @model_validator(mode="after")
    def check_query_budget(self) -> "RunConfig":
        """A scene can never hold more elements than there are element queries."""
        s = self.scene
        most = s.boundaries_max + s.dividers_max + s.crossings_max
        if most > self.model.n_max:
            raise ValueError(f"scenes may hold {most} elements but n_max is {self.model.n_max}")
        return self

    @property
    def grid(self) -> GridSpec:
        return self.model.grid

    def to_flat(self) -> Dict[str, Any]:
        """Flat key-value view (enum values as strings)."""
        flat: Dict[str, Any] = {"preset": self.preset}
        for section in (self.scene, self.noise, self.data, self.model, self.train):
            for key, value in section.model_dump().items():
                flat[key] = value.value if isinstance(value, Enum) else value
        return flat

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any]) -> "RunConfig":
        """
        Build from a flat mapping; keys shared by sections feed all of them.

        Args:
            flat: Key-value mapping (strings are coerced by pydantic)

        Returns:
            Validated RunConfig

        Raises:
            ConfigError: On unknown keys or failed validation
        """
        unknown = sorted(set(flat) - known_keys())
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(
                preset=str(flat.get("preset", "desk")),
                scene=_pick(SceneConfig, flat),
                noise=_pick(NoiseConfig, flat),
                data=_pick(DataConfig, flat),
                model=_pick(ModelConfig, flat),
                train=_pick(TrainConfig, flat),
            )
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {_first_error(e)}") from e


_SECTIONS: Tuple[Type[BaseModel], ...] = (
    SceneConfig,
    NoiseConfig,
    DataConfig,
    ModelConfig,
    TrainConfig,
)


def _pick(model_cls: Type[M], flat: Mapping[str, Any]) -> M:
    return model_cls(**{k: v for k, v in flat.items() if k in model_cls.model_fields})


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{loc}: {err['msg']}" if loc else err["msg"]


def known_keys() -> set:
    """Every key accepted in a flat configuration."""
    keys = {"preset"}
    for section in _SECTIONS:
        keys.update(section.model_fields)
    return keys


def validated(model_cls: Type[M], **values: Any) -> M:
    """
    Construct a config model, raising ConfigError instead of ValidationError.

    Args:
        model_cls: Pydantic model class
        **values: Field values

    Returns:
        Model instance
    """
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {_first_error(e)}") from e


def load_flat_config(path: Path) -> Dict[str, str]:
    """
    Parse a flat `key = value` file.

    Blank lines and `#` comments are ignored.

    Args:
        path: Config file path

    Returns:
        Raw string values by key

    Raises:
        ConfigError: On unreadable files or malformed lines
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Values of VECMAP_<KEY> variables for every known key."""
    environ = os.environ if environ is None else environ
    found = {}
    for key in known_keys():
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            found[key] = environ[env_key]
    return found


def resolve_config(
    config_path: Optional[Path] = None,
    cli_overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """
    Resolve a RunConfig from preset, file, environment and CLI values.

    Args:
        config_path: Optional flat config file
        cli_overrides: Values given on the command line (None values ignored)
        environ: Environment mapping (defaults to os.environ)
        preset: Preset name overriding every other source

    Returns:
        Validated RunConfig
    """
    file_values = load_flat_config(config_path) if config_path else {}
    env_values = env_overrides(environ)
    cli_values = {k: v for k, v in (cli_overrides or {}).items() if v is not None}

    name = preset or cli_values.get("preset") or env_values.get("preset")
    name = str(name or file_values.get("preset", "desk"))
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")

    merged: Dict[str, Any] = dict(PRESETS[name])
    merged.update(file_values)
    merged.update(env_values)
    merged.update(cli_values)
    merged["preset"] = name
    logger.debug(f"Resolved configuration from preset {name} with {len(merged)} keys")
    return RunConfig.from_flat(merged)


def preset_config(name: str, **overrides: Any) -> RunConfig:
    """Preset configuration with optional flat overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return RunConfig.from_flat({**PRESETS[name], **overrides, "preset": name})
