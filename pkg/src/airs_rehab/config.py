from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .alignment import DEFAULT_TRIPLES, AngleTriple, DeviationMetric, FrameMetric
from .client import EndpointConfig
from .env_model import DEFAULT_MIN_HITS, DEFAULT_RESOLUTION, DEFAULT_Z_BAND
from .errors import ConfigError
from .footprint import DEFAULT_MARGIN, DEFAULT_TRIPOD_RADIUS, ELLIPSE_MAX_ITER, ELLIPSE_TOL, CameraSpec
from .navigation import DEFAULT_INFLATION_RADIUS
from .placement import DEFAULT_ROTATION_COUNT, DEFAULT_SCORE_CAP, MAX_ALTERNATIVES
from .prompts import PromptTemplates

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )


@dataclass(frozen=True)
class GridSettings:
    resolution: float = DEFAULT_RESOLUTION
    z_min: float = DEFAULT_Z_BAND[0]
    z_max: float = DEFAULT_Z_BAND[1]
    min_hits: int = DEFAULT_MIN_HITS

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ConfigError(f"grid.resolution must be > 0, got {self.resolution}.")
        if not self.z_min < self.z_max:
            raise ConfigError(f"grid.z_min must be below grid.z_max, got {self.z_min} >= {self.z_max}.")
        if self.min_hits < 1:
            raise ConfigError(f"grid.min_hits must be >= 1, got {self.min_hits}.")

    @property
    def z_band(self) -> tuple[float, float]:
        return (self.z_min, self.z_max)


@dataclass(frozen=True)
class FootprintSettings:
    margin: float = DEFAULT_MARGIN
    tripod_radius: float = DEFAULT_TRIPOD_RADIUS
    view_direction: tuple[float, float] = (1.0, 0.0)
    tol: float = ELLIPSE_TOL
    max_iter: int = ELLIPSE_MAX_ITER

    def __post_init__(self) -> None:
        object.__setattr__(self, "view_direction", tuple(float(v) for v in self.view_direction))
        if self.margin < 0 or self.tripod_radius <= 0:
            raise ConfigError("footprint.margin must be >= 0 and footprint.tripod_radius > 0.")
        if len(self.view_direction) != 2 or not math.isclose(math.hypot(*self.view_direction), 1.0, abs_tol=1e-6):
            raise ConfigError(f"footprint.view_direction must be a 2D unit vector, got {self.view_direction}.")
        if not self.tol > 0 or self.max_iter < 1:
            raise ConfigError("footprint.tol must be > 0 and footprint.max_iter >= 1.")


@dataclass(frozen=True)
class CameraSettings:
    hfov_deg: float = 60.0
    vfov_deg: float = 45.0
    mount_height: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.hfov_deg < 180 and 0 < self.vfov_deg < 180):
            raise ConfigError("camera.hfov_deg and camera.vfov_deg must lie in (0, 180).")
        if not self.mount_height > 0:
            raise ConfigError(f"camera.mount_height must be > 0, got {self.mount_height}.")

    def spec(self) -> CameraSpec:
        return CameraSpec.from_degrees(self.hfov_deg, self.vfov_deg, self.mount_height)


@dataclass(frozen=True)
class PlacementSettings:
    rotation_count: int = DEFAULT_ROTATION_COUNT
    score_cap: float = DEFAULT_SCORE_CAP
    max_alternatives: int = MAX_ALTERNATIVES
    workers: int = 1

    def __post_init__(self) -> None:
        if self.rotation_count < 1 or self.workers < 1 or self.max_alternatives < 0:
            raise ConfigError("placement.rotation_count and placement.workers must be >= 1.")
        if not self.score_cap > 0:
            raise ConfigError(f"placement.score_cap must be > 0, got {self.score_cap}.")


@dataclass(frozen=True)
class NavigationSettings:
    inflation_radius: float = DEFAULT_INFLATION_RADIUS

    def __post_init__(self) -> None:
        if self.inflation_radius < 0:
            raise ConfigError(f"navigation.inflation_radius must be >= 0, got {self.inflation_radius}.")


@dataclass(frozen=True)
class AlignmentSettings:
    frame_metric: str = FrameMetric.L2.value
    deviation_metric: str = DeviationMetric.MSE.value
    band: int = 0
    triples: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "triples", tuple(self.triples))
        try:
            FrameMetric(self.frame_metric)
            DeviationMetric(self.deviation_metric)
        except ValueError as exc:
            raise ConfigError(f"alignment: {exc}.") from None
        if self.band < 0:
            raise ConfigError(f"alignment.band must be >= 0 (0 disables it), got {self.band}.")
        self.angle_triples()

    def angle_triples(self) -> tuple[AngleTriple, ...]:
        """Triples written as "a,pivot,c"; empty means the default set."""
        if not self.triples:
            return DEFAULT_TRIPLES
        parsed = []
        for text in self.triples:
            parts = [part.strip() for part in text.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"alignment.triples entry '{text}' must read 'a,pivot,c'.")
            parsed.append(AngleTriple(*parts))
        return tuple(parsed)

    @property
    def band_or_none(self) -> int | None:
        return self.band or None


@dataclass(frozen=True)
class EvaluationSettings:
    case_count: int = 15
    review_total: int = 0
    review_agreed: int = 0
    review_consensus: int = 0
    review_undetected: int = 0

    def __post_init__(self) -> None:
        if self.case_count < 1:
            raise ConfigError(f"evaluation.case_count must be >= 1, got {self.case_count}.")


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSettings = field(default_factory=GridSettings)
    footprint: FootprintSettings = field(default_factory=FootprintSettings)
    camera: CameraSettings = field(default_factory=CameraSettings)
    placement: PlacementSettings = field(default_factory=PlacementSettings)
    navigation: NavigationSettings = field(default_factory=NavigationSettings)
    alignment: AlignmentSettings = field(default_factory=AlignmentSettings)
    prompts: PromptTemplates = field(default_factory=PromptTemplates)
    generator: EndpointConfig = field(default_factory=EndpointConfig)
    judge: EndpointConfig = field(default_factory=EndpointConfig)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    cross_judges: tuple[EndpointConfig, ...] = ()

    def __post_init__(self) -> None:
        models = [self.judge.model] + [judge.model for judge in self.cross_judges]
        if len(set(models)) != len(models):
            raise ConfigError(f"Judge models must be distinct, got {models}.")


_TUPLE_FIELDS = {"view_direction", "triples"}


def _build_section(name: str, cls: type, values: Any, base_dir: Path | None) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table.")
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(unknown)}")
    kwargs = {key: tuple(value) if key in _TUPLE_FIELDS else value for key, value in values.items()}
    if base_dir is not None:
        # relative paths in the file resolve against the file's directory
        for key in ("replay_dir", "image_root"):
            if kwargs.get(key) and not Path(kwargs[key]).is_absolute():
                kwargs[key] = str(base_dir / kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(payload: dict[str, Any], base_dir: Path | None = None) -> PipelineConfig:
    sections = {item.name: item for item in fields(PipelineConfig)}
    unknown = sorted(set(payload) - set(sections))
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
    overrides: dict[str, Any] = {}
    for name, values in payload.items():
        if name == "cross_judges":
            # array of tables: [[cross_judges]]
            if not isinstance(values, list):
                raise ConfigError("cross_judges must be an array of tables ([[cross_judges]]).")
            overrides[name] = tuple(
                _build_section(f"cross_judges.{index}", EndpointConfig, item, base_dir) for index, item in enumerate(values)
            )
            continue
        default = getattr(PipelineConfig(), name)
        overrides[name] = _build_section(name, type(default), values, base_dir)
    return replace(PipelineConfig(), **overrides)


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with path.open("rb") as handle:
            payload = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc}).") from exc
    config = config_from_dict(payload, base_dir=path.resolve().parent)
    logger.debug("Loaded config from %s", path)
    return config
