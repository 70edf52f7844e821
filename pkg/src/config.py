"""Configuration management for the pipeline stages.

Every stage config is a dataclass whose defaults are the built-in values.
``with_runtime`` applies ``OGG_THREADS``/``OGG_SEED`` from the environment,
``from_file`` layers a KEY=VALUE file on top and ``with_overrides`` layers CLI
flags on top of that (CLI > file > environment > defaults).
"""

import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, TypeVar, Union, get_type_hints

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError
from .occupancy import PriorMode


logger = logging.getLogger(__name__)

C = TypeVar("C", bound="_StageConfig")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
PRIOR_MODES = tuple(mode.value for mode in PriorMode)


def _coerce(name: str, raw: Any, kind: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if getattr(kind, "__origin__", None) is tuple:
            return tuple(float(part) for part in text.split(","))
        if getattr(kind, "__origin__", None) is Union:
            inner = [arg for arg in kind.__args__ if arg is not type(None)][0]
            return None if text.lower() in ("", "none") else _coerce(name, text, inner)
    except ValueError as e:
        raise ConfigError(f"config key {name}: {e}") from e
    return text


class _StageConfig:
    """File and override layering shared by the stage configs."""

    @classmethod
    def from_file(cls: type, path: Optional[Union[str, Path]] = None, base: Optional[C] = None) -> C:
        """Load a KEY=VALUE config file over ``base`` (the defaults if omitted).

        Keys are case-insensitive; unknown keys are reported and ignored.

        Raises:
            ConfigError: If the file is missing or a value does not parse.
        """
        config = base if base is not None else cls()
        if path is None:
            return config
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = {key.lower(): value for key, value in dotenv_values(path).items()}
        return config._apply(values, source=str(path))

    def with_runtime(self: C, runtime: "RuntimeConfig") -> C:
        """Copy with the environment's thread count and seed, where the config has them."""
        known = {f.name for f in dataclasses.fields(self)}
        values = {key: getattr(runtime, key) for key in ("threads", "seed") if key in known}
        return self._apply(values, source="environment")

    def with_overrides(self: C, **overrides: Any) -> C:
        """Copy with CLI values applied; ``None`` means "not given"."""
        given = {key: value for key, value in overrides.items() if value is not None}
        return self._apply(given, source="command line")

    def _apply(self: C, values: Dict[str, Any], source: str) -> C:
        hints = get_type_hints(type(self))
        known = {f.name for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                logger.warning("ignoring unknown config key %r from %s", key, source)
                continue
            if raw is None:
                continue
            changes[key] = _coerce(key, raw, hints[key])
        config = dataclasses.replace(self, **changes)
        config.validate()
        return config

    def validate(self) -> None:
        """Raise :class:`ConfigError` on out-of-range values."""

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class RuntimeConfig:
    """Process-wide settings from the environment."""

    log_level: str = "INFO"
    threads: int = 1
    seed: int = 0

    @classmethod
    def from_env(cls) -> "RuntimeConfig":
        """Load configuration from environment variables (and ``.env``)."""
        load_dotenv()
        try:
            return cls(
                log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
                threads=int(os.getenv("OGG_THREADS", "1")),
                seed=int(os.getenv("OGG_SEED", "0")),
            )
        except ValueError as e:
            raise ConfigError(f"invalid environment setting: {e}") from e


@dataclass
class ConvertConfig(_StageConfig):
    """Occupancy-prior conversion settings."""

    tau: float = 0.5
    mu_th: float = 0.5
    match_radius: float = 2.0
    target_voxel: float = 0.05
    vehicle_classes: str = "vehicle"
    colorize_static: bool = True
    prior_mode: str = "occupancy_sfm"
    random_points: int = 0
    seed: int = 0

    def validate(self) -> None:
        _require(0.0 < self.tau < 1.0, f"tau must lie in (0, 1), got {self.tau}")
        _require(self.mu_th >= 0.0, "mu_th must be non-negative")
        _require(self.match_radius > 0.0, "match_radius must be positive")
        _require(self.target_voxel > 0.0, "target_voxel must be positive")
        _require(
            self.prior_mode in PRIOR_MODES,
            f"prior_mode must be one of {', '.join(PRIOR_MODES)}, got {self.prior_mode!r}",
        )
        _require(self.random_points >= 0, "random_points must be non-negative")

    @property
    def vehicle_class_names(self) -> Tuple[str, ...]:
        return tuple(name.strip() for name in self.vehicle_classes.split(",") if name.strip())


@dataclass
class TrainConfig(_StageConfig):
    """Photometric optimisation settings."""

    iterations: int = 30000
    lambda_dssim: float = 0.2
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_semantic: float = 2.5e-3
    lr_delta_rotation: float = 1e-3
    lr_delta_translation: float = 5e-3
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    densify_grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    scale_split_fraction: float = 0.01
    sh_increase_interval: int = 1000
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    street_sh_degree: int = 3
    vehicle_sh_degree: int = 1
    fourier_k: int = 5
    initial_opacity: float = 0.1
    holdout_every: int = 8
    log_interval: int = 100
    checkpoint_interval: int = 5000
    literal_rotation: bool = False
    log_wall_time: bool = False
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        _require(self.iterations >= 0, "iterations must be non-negative")
        _require(0.0 <= self.lambda_dssim <= 1.0, f"lambda_dssim must lie in [0, 1], got {self.lambda_dssim}")
        for name in (
            "lr_position", "lr_position_final", "lr_rotation", "lr_scale", "lr_opacity",
            "lr_sh", "lr_semantic", "lr_delta_rotation", "lr_delta_translation",
        ):
            _require(getattr(self, name) > 0.0, f"{name} must be positive")
        for name in ("densify_interval", "sh_increase_interval", "opacity_reset_interval", "log_interval", "checkpoint_interval"):
            _require(getattr(self, name) > 0, f"{name} must be positive")
        _require(0.0 < self.opacity_reset_value < 1.0, "opacity_reset_value must lie in (0, 1)")
        _require(0.0 < self.initial_opacity < 1.0, "initial_opacity must lie in (0, 1)")
        _require(self.fourier_k >= 1, "fourier_k must be at least 1")
        _require(0 <= self.street_sh_degree <= 3 and 0 <= self.vehicle_sh_degree <= 3, "SH degrees must lie in [0, 3]")
        _require(self.holdout_every >= 2, "holdout_every must be at least 2")
        _require(self.threads >= 1, "threads must be at least 1")


@dataclass
class SynthConfig(_StageConfig):
    """Synthetic driving-scene generator settings."""

    seed: int = 0
    frames: int = 10
    width: int = 128
    height: int = 96
    focal: float = 110.0
    cell_size: float = 0.4
    street_length: float = 40.0
    road_half_width: float = 6.0
    building_offset: float = 8.0
    building_height: float = 6.0
    ground_spacing: float = 0.5
    camera_height: float = 1.5
    camera_speed: float = 0.5
    moving_vehicles: int = 1
    static_vehicles: int = 1
    vehicle_speed: float = 1.0
    trajectory: str = "straight"
    arc_radius: float = 20.0
    gaussians_per_vehicle: int = 100
    sfm_points: int = 200
    centroid_noise: float = 0.0
    threads: int = 1

    def validate(self) -> None:
        _require(self.frames >= 1, "frames must be at least 1")
        _require(self.width > 0 and self.height > 0, "image size must be positive")
        _require(self.focal > 0.0, "focal must be positive")
        _require(self.cell_size > 0.0, "cell_size must be positive")
        _require(self.ground_spacing > 0.0, "ground_spacing must be positive")
        _require(self.moving_vehicles >= 0 and self.static_vehicles >= 0, "vehicle counts must be non-negative")
        _require(50 <= self.gaussians_per_vehicle <= 200, "gaussians_per_vehicle must lie in [50, 200]")
        _require(self.trajectory in ("straight", "arc"), f"unknown trajectory {self.trajectory!r}")
        _require(self.arc_radius > 0.0, "arc_radius must be positive")
        _require(self.sfm_points >= 0, "sfm_points must be non-negative")
        _require(self.centroid_noise >= 0.0, "centroid_noise must be non-negative")


@dataclass
class RenderConfig(_StageConfig):
    """Rendering settings for ``render``."""

    background: Tuple[float, ...] = (0.0, 0.0, 0.0)
    threads: int = 1
    depth: bool = False
    semantic: bool = False
    depth_max: float = 100.0
    vehicle_class: str = "vehicle"

    def validate(self) -> None:
        _require(len(self.background) == 3, "background must have three components")
        _require(all(0.0 <= c <= 1.0 for c in self.background), "background components must lie in [0, 1]")
        _require(self.threads >= 1, "threads must be at least 1")
        _require(self.depth_max > 0.0, "depth_max must be positive")
