"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    total_steps: int = 1200
    # loss weight maxima, ramped linearly from 0 over total_steps
    lambda1: float = 10000.0
    lambda2: float = 1000.0
    lambda3: float = 4000.0
    lambda4: float = 200.0
    lambda5: float = 100.0
    lambda6: float = 4000.0
    lambda7: float = 200.0
    alpha1: float = 200.0
    stage2_start: int = 600
    untrusted_interval: int = 200
    tau: float = 0.05
    # cameras
    radius: float = 2.0
    fov_y: float = 49.1
    image_size: int = 256
    background: str = "1,1,1"
    # optimizer
    lr_position_init: float = 2e-4
    lr_position_final: float = 1e-6
    lr_color: float = 0.0025
    lr_opacity: float = 0.05
    lr_scaling: float = 0.0025
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # adaptive density control
    densify_grad_threshold: float = 0.1
    densify_max_scale: float = 0.05
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: int = 1000
    prune_min_opacity: float = 0.025
    prune_max_scale: float = 0.1
    max_gaussians: int = 20000
    # initialization
    geometry_count: int = 5000
    perception_count: int = 5000
    noise_count: int = 5000
    noise_radius: float = 0.5
    geometry_radius: float = 1.0
    seed: int = 0
    seed_branch0: int = 0
    seed_branch1: int = 1
    seed_branch2: int = 2
    # reprojection
    proj_mode: str = "cross"
    proj_delta_azimuth: float = 5.0
    # diffusion prior
    prior: str = "mock"
    prior_endpoint: str = ""
    prior_timeout: float = 30.0
    prior_retries: int = 3
    max_prior_failures: int = 100
    prior_max_timestep: int = 1000
    t_max_fraction: float = 0.98
    t_min_fraction: float = 0.02
    sds_weight: float = 1.0
    co_sds_beta: float = 0.5
    mock_kappa: float = 1.0
    # bookkeeping
    checkpoint_interval: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.total_steps and not 0 <= self.stage2_start < self.total_steps:
            raise ConfigError("stage2_start must be < total_steps")
        positive = [
            "tau", "radius", "fov_y", "image_size", "densify_grad_threshold", "densify_max_scale",
            "densify_interval", "prune_min_opacity", "prune_max_scale", "max_gaussians",
            "untrusted_interval", "lr_position_init", "lr_position_final", "prior_max_timestep",
            "checkpoint_interval", "noise_radius", "geometry_radius",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.proj_mode not in ("cross", "literal"):
            raise ConfigError(f"proj_mode must be 'cross' or 'literal', got {self.proj_mode!r}")
        if self.prior not in ("mock", "remote", "none"):
            raise ConfigError(f"prior must be 'mock', 'remote' or 'none', got {self.prior!r}")
        if self.prior == "remote" and not self.prior_endpoint:
            raise ConfigError("prior = remote needs prior_endpoint")
        if not 0 <= self.co_sds_beta <= 1:
            raise ConfigError("co_sds_beta must be in [0, 1]")
        self.background_rgb()

    @property
    def lambda_max(self) -> dict[str, float]:
        return {f"lambda{i}": getattr(self, f"lambda{i}") for i in range(1, 8)} | {"alpha1": self.alpha1}

    def background_rgb(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(v) for v in str(self.background).split(","))
        except ValueError:
            raise ConfigError(f"background must be 'r,g,b', got {self.background!r}") from None
        if len(parts) == 1:
            parts = parts * 3
        if len(parts) != 3:
            raise ConfigError(f"background must be 'r,g,b', got {self.background!r}")
        return parts

    def branch_seeds(self) -> tuple[int, int, int]:
        return self.seed_branch0, self.seed_branch1, self.seed_branch2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(key: str, value: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return str(value)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults < file < overrides."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: TrainConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.to_dict().items()) + "\n"
