"""Pipeline configuration: one flat TOML file, every tunable with a default.

``dynamic_mass_assumption`` is documentation for scene design (the separation
stage assumes no ray is blocked by moving objects more than this fraction of
the time); nothing in the processing path reads it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


@dataclass
class RegistrationConfig:
    max_iterations: int = 60
    convergence_translation_m: float = 1e-4
    convergence_rotation_rad: float = 1e-4
    gmm_sigma_m: float = 0.10


@dataclass
class OptimizationConfig:
    knot_spacing_s: float = 0.1
    max_alternations: int = 20
    convergence_m: float = 0.005


@dataclass
class PipelineConfig:
    revolution_rate_hz: float = 10.0
    mode_min_fraction: float = 0.20
    mode_bin_width_m: float = 0.05
    dynamic_mass_assumption: float = 0.15
    static_distance_threshold_m: float = 0.30
    accumulation_window_s: float = 5.0
    grid_cell_xyz_m: float = 0.30
    grid_cell_t_s: float = 0.150
    min_component_points: int = 50
    min_component_duration_s: float = 0.5
    occlusion_cone_half_angle_rad: float = 0.005
    occlusion_min_depth_gap_m: float = 0.5
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)

    def __post_init__(self) -> None:
        if not 0.0 < self.mode_min_fraction < 1.0:
            raise ValueError("mode_min_fraction must lie in (0, 1)")
        for name in (
            "revolution_rate_hz",
            "mode_bin_width_m",
            "static_distance_threshold_m",
            "accumulation_window_s",
            "grid_cell_xyz_m",
            "grid_cell_t_s",
            "min_component_duration_s",
            "occlusion_cone_half_angle_rad",
            "occlusion_min_depth_gap_m",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_component_points < 1:
            raise ValueError("min_component_points must be >= 1")


def _update_dataclass(obj, data: dict, context: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"unknown config key {context}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"config key {context}{key} must be a table")
            _update_dataclass(current, value, context=f"{key}.")
        elif isinstance(current, int) and not isinstance(current, bool):
            setattr(obj, key, int(value))
        else:
            setattr(obj, key, float(value))
    return obj


def load_config(path: str | Path) -> PipelineConfig:
    """Read a config file; keys not present keep their defaults."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    cfg = PipelineConfig()
    _update_dataclass(cfg, data, context="")
    cfg.__post_init__()
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def dump_config(cfg: PipelineConfig) -> str:
    """Serialise a config to TOML text (the exact inverse of ``load_config``)."""
    lines = []
    tables = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            tables.append((f.name, value))
        else:
            lines.append(f"{f.name} = {_toml_value(value)}")
    for name, table in tables:
        lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(table):
            lines.append(f"{f.name} = {_toml_value(getattr(table, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
