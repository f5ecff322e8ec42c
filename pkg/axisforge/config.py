import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterable, Optional

from sqlblock.utils.json import json_loads

from .camera import CameraIntrinsics
from .diffusion.mlp import ArchConfig, OptConfig
from .diffusion.schedule import make_schedule, DiffusionSchedule
from .exceptions import ConfigError
from .metrics import Thresholds
from .utils import load_json

logger = logging.getLogger("axisforge.config")

CONFIG_SCHEMA = 1


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    zeta_start: float = 1e-4
    zeta_end: float = 0.02
    steps: int = 50
    sigma: float = 0.0
    spacing: str = "uniform"

    def build(self) -> DiffusionSchedule:
        return make_schedule(self.T, self.zeta_start, self.zeta_end)


@dataclass(frozen=True)
class GuidanceParams:
    enabled: bool = True
    rho_base: float = 1.0
    sharpness: float = 50.0
    normalize: bool = True


@dataclass(frozen=True)
class RenderConfig:
    size: int = 32
    thickness: float = 1.0
    axis_len: float = 1.5
    depth_min: float = 3.0
    depth_max: float = 4.5
    lateral: float = 0.2
    # axes projecting shorter than this are rejected when sampling poses
    min_axis_px: float = 6.0
    occlusion_frac: float = 0.25
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    export_ppm: bool = False

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.reference(self.size)


@dataclass(frozen=True)
class EvalConfig:
    add_frac: float = 0.2
    reproj_px: float = 15.0
    # reproj_px is stated for 128 px images; scale it with the image size
    reference_size: int = 128
    scale_with_size: bool = True

    def thresholds(self, size: int) -> Thresholds:
        px = self.reproj_px
        if self.scale_with_size:
            px = px * size / self.reference_size
        return Thresholds(self.add_frac, px)


@dataclass(frozen=True)
class SeedConfig:
    seed: int = 0
    deterministic: bool = False


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    render: RenderConfig = field(default_factory=RenderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def __post_init__(self):
        if self.arch.size != self.render.size:
            raise ConfigError(
                f"arch.size={self.arch.size} must equal render.size={self.render.size}")
        if not (1 <= self.schedule.steps <= self.schedule.T):
            raise ConfigError(f"schedule.steps must be in 1..{self.schedule.T}")
        if self.render.depth_min <= 1.8 or self.render.depth_max < self.render.depth_min:
            raise ConfigError("render depth band must lie beyond the cuboid, depth_min > 1.8")
        if self.guidance.rho_base < 0 or self.guidance.sharpness <= 0:
            raise ConfigError("guidance needs rho_base >= 0 and sharpness > 0")
        if not (0.0 <= self.schedule.sigma <= 1.0):
            raise ConfigError(f"schedule.sigma must be in [0, 1], got {self.schedule.sigma}")

    def to_record(self) -> Dict:
        rec = {"schema": CONFIG_SCHEMA}
        for f in fields(self):
            rec[f.name] = asdict(getattr(self, f.name))
        return rec

    @classmethod
    def from_record(cls, rec: Dict) -> "RunConfig":
        rec = dict(rec)
        schema = rec.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema}")

        sections = {f.name: f for f in fields(cls)}
        unknown = set(rec) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

        kwargs = {}
        for name, values in rec.items():
            section_type = sections[name].default_factory
            kwargs[name] = _build_section(name, section_type, values)
        return cls(**kwargs)

    def override(self, assignments: Iterable[str]) -> "RunConfig":
        """Apply `section.key=value` assignments; values parse as json when they can."""
        rec = self.to_record()
        for item in assignments:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"expected section.key=value, got '{item}'")
            path, raw = item.split("=", 1)
            section, key = path.split(".", 1)
            if section not in rec or not isinstance(rec[section], dict):
                raise ConfigError(f"unknown config section '{section}'")
            if key not in rec[section]:
                raise ConfigError(f"unknown config key '{path}'")
            try:
                value = json_loads(raw)
            except ValueError:
                value = raw
            rec[section][key] = value
        return RunConfig.from_record(rec)


def _build_section(name, section_type, values):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    known = {f.name: f for f in fields(section_type)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {', '.join(sorted(unknown))}")

    base = section_type()
    converted = {k: _checked(f"{name}.{k}", getattr(base, k), v) for k, v in values.items()}
    return replace(base, **converted)


def _checked(path: str, default, value):
    """`value` typed like `default`; ints widen to float, nothing else converts."""
    expected = type(default)
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if type(value) is not expected:
        raise ConfigError(f"'{path}' must be {expected.__name__}, got {value!r}")
    return value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    config = RunConfig() if path is None else RunConfig.from_record(load_json(path))
    overrides = list(overrides)
    if overrides:
        config = config.override(overrides)
    return config
