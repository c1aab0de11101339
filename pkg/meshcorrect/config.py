"""Run configuration: INI-style sections of ``key = value`` lines.

Defaults are the full-scale hyperparameters. The bundled ``desk`` profile
(``meshcorrect/data/desk.cfg``) overrides them for CPU-sized runs.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .camera_geometry import EPS_MODES, Intrinsics
from .datagen import SPLIT_MODES, CorruptionSpec, SceneSpec, derive_seed
from .errors import ConfigError
from .losses import NEARBY_POLICIES, LossWeights
from .network import NetworkSpec
from .training import Objective, TrainConfig

OUT_DIR_ENV = "MESHCORRECT_OUT_DIR"
DEFAULT_PROFILE = "desk"
DTYPES = ("float32", "float64")


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{key}: {message}", key=key)


@dataclass(frozen=True)
class RenderSection:
    width: int = 288
    height: int = 96
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 144.0
    cy: float = 48.0
    near: float = 0.01

    def __post_init__(self) -> None:
        _require(self.near > 0, "render.near", "must be positive")
        try:
            self.intrinsics()
        except ValueError as exc:
            raise ConfigError(f"render: {exc}", key="render") from exc

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class GeometrySection:
    eps: float = 1e-6
    eps_mode: str = "additive"

    def __post_init__(self) -> None:
        _require(self.eps > 0, "geometry.eps", "must be positive")
        _require(self.eps_mode in EPS_MODES, "geometry.eps_mode", f"must be one of {EPS_MODES}")


@dataclass(frozen=True)
class LossSection:
    lambda_data: float = 1.0
    lambda_grad: float = 0.1
    lambda_gc: float = 0.1
    lambda_reg: float = 1e-6
    w_min: float = 0.1
    w_max: float = 5.0
    canny_sigma: float = 1.0
    canny_low_percentile: float = 70.0
    canny_high_percentile: float = 90.0
    gc_both_views: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda_data", "lambda_grad", "lambda_gc", "lambda_reg"):
            _require(getattr(self, name) >= 0, f"loss.{name}", "must be non-negative")
        _require(0 <= self.w_min <= self.w_max, "loss.w_min", "need 0 <= w_min <= w_max")
        _require(self.canny_sigma > 0, "loss.canny_sigma", "must be positive")
        _require(
            0 <= self.canny_low_percentile <= self.canny_high_percentile <= 100,
            "loss.canny_low_percentile",
            "need 0 <= low <= high <= 100",
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_data, self.lambda_grad, self.lambda_gc, self.lambda_reg)


@dataclass(frozen=True)
class NetworkSection:
    multiplier: int = 8
    use_attention: bool = True
    skip_connections: bool = True
    topology: str = "desk"
    bottleneck_blocks: int = 2
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        _require(self.dtype in DTYPES, "network.dtype", f"must be one of {DTYPES}")
        try:
            self.spec()
        except ValueError as exc:
            raise ConfigError(f"network: {exc}", key="network.multiplier") from exc

    def spec(self) -> NetworkSpec:
        return NetworkSpec(
            multiplier=self.multiplier,
            use_attention=self.use_attention,
            skip_connections=self.skip_connections,
            topology=self.topology,
            bottleneck_blocks=self.bottleneck_blocks,
        )


@dataclass(frozen=True)
class TrainSection:
    eta_max: float = 1e-4
    eta_min: float = 5e-6
    t_max: int = 120_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 80.0
    batch_size: int = 16
    total_steps: int = 500_000
    checkpoint_every: int = 500
    seed: int = 0
    nearby_policy: str = "all"

    def __post_init__(self) -> None:
        _require(self.nearby_policy in NEARBY_POLICIES, "train.nearby_policy", f"must be one of {NEARBY_POLICIES}")
        _require(self.checkpoint_every >= 0, "train.checkpoint_every", "must be non-negative")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}", key="train") from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            eta_max=self.eta_max,
            eta_min=self.eta_min,
            t_max=self.t_max,
            clip_norm=self.clip_norm,
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
        )


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    scenes: int = 5
    extent: float = 24.0
    resolution: float = 0.2
    boxes: int = 6
    panels: int = 4
    clearance: float = 4.0
    trajectory_length: float = 12.0
    camera_height: float = 1.6
    spacing: float = 0.3
    noise_sigma: float = 0.05
    hole_rate: float = 0.05
    bulge_rate: float = 0.001
    bulge_amplitude: float = 0.3
    bulge_radius: float = 1.0
    spurious_rate: float = 0.0005
    split_mode: str = "sequential"
    holdout_scenes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        _require(self.scenes >= 1, "data.scenes", "must be at least 1")
        _require(self.spacing > 0, "data.spacing", "must be positive")
        _require(self.split_mode in SPLIT_MODES, "data.split_mode", f"must be one of {SPLIT_MODES}")
        _require(
            all(0 <= s < self.scenes for s in self.holdout_scenes),
            "data.holdout_scenes",
            "scene indices must lie in [0, scenes)",
        )
        try:
            self.scene_specs()
            self.corruption_spec()
        except ValueError as exc:
            raise ConfigError(f"data: {exc}", key="data") from exc

    def scene_specs(self) -> list[SceneSpec]:
        return [
            SceneSpec(
                seed=derive_seed(self.seed, i),
                extent=self.extent,
                resolution=self.resolution,
                boxes=self.boxes,
                panels=self.panels,
                clearance=self.clearance,
                trajectory_length=self.trajectory_length,
                camera_height=self.camera_height,
            )
            for i in range(self.scenes)
        ]

    def corruption_spec(self) -> CorruptionSpec:
        return CorruptionSpec(
            noise_sigma=self.noise_sigma,
            hole_rate=self.hole_rate,
            bulge_rate=self.bulge_rate,
            bulge_amplitude=self.bulge_amplitude,
            bulge_radius=self.bulge_radius,
            spurious_rate=self.spurious_rate,
        )


SECTIONS = {
    "render": RenderSection,
    "geometry": GeometrySection,
    "loss": LossSection,
    "network": NetworkSection,
    "train": TrainSection,
    "data": DataSection,
}


def _parse_value(kind: Any, raw: str, key: str) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if kind is int:
            try:
                return int(raw)
            except ValueError:
                value = float(raw)
                if not value.is_integer():
                    raise
                return int(value)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", key=key) from exc
    raise ConfigError(f"{key}: unsupported option type {kind!r}", key=key)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    render: RenderSection = field(default_factory=RenderSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    loss: LossSection = field(default_factory=LossSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def to_text(self) -> str:
        lines: list[str] = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")

    def updated(self, values: dict[str, dict[str, str]]) -> "RunConfig":
        """Copy with ``{section: {key: raw text}}`` applied; unknown names raise ConfigError."""
        changes: dict[str, Any] = {}
        for section_name, entries in values.items():
            if section_name not in SECTIONS:
                raise ConfigError(f"unknown config section [{section_name}]", key=section_name)
            cls = SECTIONS[section_name]
            hints = typing.get_type_hints(cls)
            parsed = {}
            for key, raw in entries.items():
                full = f"{section_name}.{key}"
                if key not in hints:
                    raise ConfigError(f"unknown config key '{full}'", key=full)
                parsed[key] = _parse_value(hints[key], raw, full)
            changes[section_name] = dataclasses.replace(getattr(self, section_name), **parsed)
        return dataclasses.replace(self, **changes)

    def with_text(self, text: str, source: str = "<text>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        return self.updated({s: dict(parser.items(s, raw=True)) for s in parser.sections()})

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings."""
        values: dict[str, dict[str, str]] = {}
        for item in overrides:
            name, sep, raw = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override '{item}' is not of the form section.key=value", key=name)
            values.setdefault(section, {})[key] = raw
        return self.updated(values)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        return cls().with_text(text, source)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    def objective(self) -> Objective:
        return Objective(
            weights=self.loss.weights(),
            nearby_policy=self.train.nearby_policy,
            gc_both_views=self.loss.gc_both_views,
            eps=self.geometry.eps,
            eps_mode=self.geometry.eps_mode,
        )

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.network.dtype)


def profile_text(name: str) -> str:
    resource = resources.files("meshcorrect").joinpath("data", f"{name}.cfg")
    if not resource.is_file():
        raise ConfigError(f"unknown config profile '{name}'", key="profile")
    return resource.read_text(encoding="utf-8")


def load_config(
    path: str | Path | None = None,
    profile: str | None = DEFAULT_PROFILE,
    overrides: Iterable[str] = (),
) -> RunConfig:
    """Defaults, then the named profile, then ``path``, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if profile:
        cfg = cfg.with_text(profile_text(profile), f"profile:{profile}")
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg = cfg.with_text(text, str(p))
    return cfg.with_overrides(overrides)


def _resolve(path_str: str | None) -> Path | None:
    if not path_str:
        return None
    return Path(path_str).expanduser().resolve()


def resolve_out_dir(arg: str | Path | None, default: str | Path = "runs") -> Path:
    """``--out`` if given, else ``$MESHCORRECT_OUT_DIR``, else ``default``."""
    return _resolve(str(arg) if arg else None) or _resolve(os.environ.get(OUT_DIR_ENV)) or Path(default).resolve()
