from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from .errors import EmptyCloud, MalformedRecord, UnsupportedFormat, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.05
DEFAULT_Z_BAND = (0.10, 2.00)
DEFAULT_MIN_HITS = 3

PGM_FREE = 0
PGM_OCCUPIED = 255


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise MalformedRecord("Point cloud contains non-finite coordinates.")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class OccupancyGrid:
    """Top-down raster; cells[row, col], row 0 at origin y, True means occupied."""

    resolution: float
    origin: tuple[float, float]
    cells: np.ndarray

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ValidationError(f"Grid resolution must be > 0, got {self.resolution}.")
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise ValidationError("Grid cells must be a non-empty 2D raster.")
        cells.setflags(write=False)
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "cells", cells)

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    def in_bounds(self, col: int, row: int) -> bool:
        return 0 <= col < self.width and 0 <= row < self.height

    def is_free(self, col: int, row: int) -> bool:
        return self.in_bounds(col, row) and not bool(self.cells[row, col])

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.origin[0]) / self.resolution)),
            int(math.floor((y - self.origin[1]) / self.resolution)),
        )

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        return (
            self.origin[0] + (col + 0.5) * self.resolution,
            self.origin[1] + (row + 0.5) * self.resolution,
        )

    def cell_corner(self, col: int, row: int) -> tuple[float, float]:
        return (
            self.origin[0] + col * self.resolution,
            self.origin[1] + row * self.resolution,
        )

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(resolution=self.resolution, origin=self.origin, cells=cells)


@dataclass(frozen=True)
class LabelRegion:
    label: str
    col_min: int
    row_min: int
    col_max: int
    row_max: int


@dataclass(frozen=True)
class SemanticLabelMap:
    """Optional labeled cell rectangles (inclusive bounds) on a grid."""

    regions: tuple[LabelRegion, ...]
    resolution: float
    origin: tuple[float, float]

    def centroids(self) -> list[tuple[str, tuple[float, float]]]:
        result = []
        for region in self.regions:
            col = (region.col_min + region.col_max + 1) / 2.0
            row = (region.row_min + region.row_max + 1) / 2.0
            result.append(
                (
                    region.label,
                    (self.origin[0] + col * self.resolution, self.origin[1] + row * self.resolution),
                )
            )
        return result


# ----------------------------------------------------------------------
# Point clouds
# ----------------------------------------------------------------------


def load_point_cloud(path: Path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        points = _read_ascii_ply(path)
    elif suffix in {".csv", ".xyz", ".txt"}:
        points = _read_xyz_csv(path)
    else:
        raise UnsupportedFormat(f"{path}: unsupported point cloud format '{suffix}' (use .ply or .csv/.xyz).")
    if not points:
        raise EmptyCloud(f"{path}: point cloud has no points.")
    cloud = PointCloud(points=np.asarray(points, dtype=np.float64))
    logger.info("Loaded point cloud: points=%s file=%s", len(cloud), path)
    return cloud


def _read_ascii_ply(path: Path) -> list[list[float]]:
    lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise UnsupportedFormat(f"{path}: missing 'ply' magic line.")

    vertex_count: int | None = None
    properties: list[str] = []
    in_vertex = False
    header_end: int | None = None
    for index, raw in enumerate(lines[1:], start=1):
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise UnsupportedFormat(f"{path}: only ASCII PLY is supported, got '{raw.strip()}'.")
        elif tokens[0] == "element":
            in_vertex = len(tokens) >= 3 and tokens[1] == "vertex"
            if in_vertex:
                try:
                    vertex_count = int(tokens[2])
                except ValueError as exc:
                    raise MalformedRecord(f"{path}:{index + 1}: bad vertex count.") from exc
        elif tokens[0] == "property" and in_vertex:
            properties.append(tokens[-1])
        elif tokens[0] == "end_header":
            header_end = index
            break

    if header_end is None or vertex_count is None:
        raise MalformedRecord(f"{path}: incomplete PLY header.")
    try:
        axes = [properties.index(name) for name in ("x", "y", "z")]
    except ValueError as exc:
        raise MalformedRecord(f"{path}: PLY vertex element lacks x/y/z properties.") from exc

    body = [line for line in lines[header_end + 1 :] if line.strip()]
    if len(body) < vertex_count:
        raise MalformedRecord(f"{path}: header announces {vertex_count} vertices, found {len(body)}.")
    points: list[list[float]] = []
    for offset, line in enumerate(body[:vertex_count]):
        tokens = line.split()
        try:
            points.append([float(tokens[axis]) for axis in axes])
        except (IndexError, ValueError) as exc:
            raise MalformedRecord(f"{path}:{header_end + 2 + offset}: bad vertex '{line.strip()}'.") from exc
    return points


def _read_xyz_csv(path: Path) -> list[list[float]]:
    points: list[list[float]] = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        sample = fh.read(2048)
        fh.seek(0)
        delimiter = "," if "," in sample else " "
        reader = csv.reader(fh, delimiter=delimiter, skipinitialspace=True)
        for number, row in enumerate(reader, start=1):
            fields = [field for field in row if field.strip()]
            if not fields:
                continue
            if number == 1 and [f.strip().lower() for f in fields[:3]] == ["x", "y", "z"]:
                continue
            if len(fields) < 3:
                raise MalformedRecord(f"{path}:{number}: expected 3 fields, got {len(fields)}.")
            try:
                points.append([float(field) for field in fields[:3]])
            except ValueError as exc:
                raise MalformedRecord(f"{path}:{number}: non-numeric field in {fields[:3]}.") from exc
    return points


# ----------------------------------------------------------------------
# Projection
# ----------------------------------------------------------------------


def project_occupancy(
    cloud: PointCloud,
    resolution: float = DEFAULT_RESOLUTION,
    z_band: tuple[float, float] = DEFAULT_Z_BAND,
    min_hits: int = DEFAULT_MIN_HITS,
    origin: tuple[float, float] | None = None,
    size: tuple[int, int] | None = None,
) -> OccupancyGrid:
    """Bin cloud points inside z_band into a top-down grid; a cell is occupied at >= min_hits points."""
    if len(cloud) == 0:
        raise EmptyCloud("Cannot project an empty point cloud.")
    if not resolution > 0:
        raise ValidationError(f"Resolution must be > 0, got {resolution}.")
    z_min, z_max = float(z_band[0]), float(z_band[1])
    if not z_min < z_max:
        raise ValidationError(f"z_band must satisfy z_min < z_max, got {z_band}.")
    if min_hits < 1:
        raise ValidationError(f"min_hits must be >= 1, got {min_hits}.")

    xy = cloud.points[:, :2]
    if origin is None:
        origin = (
            math.floor(float(xy[:, 0].min()) / resolution) * resolution,
            math.floor(float(xy[:, 1].min()) / resolution) * resolution,
        )
    cols_all = np.floor((xy[:, 0] - origin[0]) / resolution).astype(np.int64)
    rows_all = np.floor((xy[:, 1] - origin[1]) / resolution).astype(np.int64)
    if cols_all.min() < 0 or rows_all.min() < 0:
        raise ValidationError(f"Grid origin {origin} does not cover the cloud's xy extent.")

    if size is None:
        width, height = int(cols_all.max()) + 1, int(rows_all.max()) + 1
    else:
        width, height = int(size[0]), int(size[1])
        if cols_all.max() >= width or rows_all.max() >= height:
            raise ValidationError(f"Grid size {size} does not cover the cloud's xy extent.")

    in_band = (cloud.points[:, 2] >= z_min) & (cloud.points[:, 2] <= z_max)
    flat = rows_all[in_band] * width + cols_all[in_band]
    counts = np.bincount(flat, minlength=width * height).reshape(height, width)
    cells = counts >= min_hits

    grid = OccupancyGrid(resolution=resolution, origin=origin, cells=cells)
    logger.info(
        "Projection done: grid=%sx%s resolution=%.3f occupied=%s band_points=%s",
        width,
        height,
        resolution,
        int(cells.sum()),
        int(in_band.sum()),
    )
    return grid


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------


def grid_to_dict(grid: OccupancyGrid) -> dict[str, Any]:
    return {
        "resolution": grid.resolution,
        "origin_x": grid.origin[0],
        "origin_y": grid.origin[1],
        "width": grid.width,
        "height": grid.height,
        "rows": ["".join("1" if cell else "0" for cell in row) for row in grid.cells],
    }


def grid_from_dict(payload: dict[str, Any]) -> OccupancyGrid:
    try:
        rows = payload["rows"]
        cells = np.array([[char == "1" for char in row] for row in rows], dtype=bool)
        grid = OccupancyGrid(
            resolution=float(payload["resolution"]),
            origin=(float(payload["origin_x"]), float(payload["origin_y"])),
            cells=cells,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"Invalid grid JSON: {exc}") from exc
    if grid.width != int(payload.get("width", grid.width)) or grid.height != int(
        payload.get("height", grid.height)
    ):
        raise MalformedRecord("Grid JSON width/height disagree with its rows.")
    return grid


def save_grid(grid: OccupancyGrid, path: Path) -> None:
    """Write `.json` single-file form, or `.pgm` (P5) with a `.json` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, np.where(grid.cells, PGM_OCCUPIED, PGM_FREE).astype(np.uint8))
        sidecar = {"resolution": grid.resolution, "origin_x": grid.origin[0], "origin_y": grid.origin[1]}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(json.dumps(grid_to_dict(grid), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_grid(path: Path) -> OccupancyGrid:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        pixels = read_pgm(path)
        sidecar_path = path.with_suffix(".json")
        try:
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
            return OccupancyGrid(
                resolution=float(sidecar["resolution"]),
                origin=(float(sidecar["origin_x"]), float(sidecar["origin_y"])),
                cells=pixels >= 128,
            )
        except FileNotFoundError as exc:
            raise MalformedRecord(f"{path}: missing sidecar {sidecar_path.name}.") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"{sidecar_path}: invalid sidecar ({exc}).") from exc
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}: invalid JSON ({exc.msg}).") from exc
    if not isinstance(payload, dict):
        raise MalformedRecord(f"{path}: grid JSON must be an object.")
    return grid_from_dict(payload)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Binary PGM, top image row = highest grid row so the map displays north-up."""
    image = np.ascontiguousarray(np.flipud(np.asarray(pixels, dtype=np.uint8)))
    if not cv2.imwrite(str(path), image, [cv2.IMWRITE_PXM_BINARY, 1]):
        raise UnsupportedFormat(f"{path}: could not write PGM image.")


def read_pgm(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise MalformedRecord(f"{path}: not a readable PGM image.")
    if image.ndim != 2:
        raise UnsupportedFormat(f"{path}: expected a single-channel image, got shape {image.shape}.")
    if image.dtype != np.uint8:
        raise UnsupportedFormat(f"{path}: 16-bit PGM is not supported.")
    return np.flipud(image).copy()


def load_label_map(path: Path, grid: OccupancyGrid) -> SemanticLabelMap:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        raw_regions = payload["regions"] if isinstance(payload, dict) else payload
        regions = tuple(
            LabelRegion(
                label=str(item["label"]),
                col_min=int(item["col_min"]),
                row_min=int(item["row_min"]),
                col_max=int(item["col_max"]),
                row_max=int(item["row_max"]),
            )
            for item in raw_regions
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{path}: invalid label map ({exc}).") from exc

    for region in regions:
        if not (
            0 <= region.col_min <= region.col_max < grid.width
            and 0 <= region.row_min <= region.row_max < grid.height
        ):
            raise ValidationError(f"{path}: region '{region.label}' lies outside the grid bounds.")
    return SemanticLabelMap(regions=regions, resolution=grid.resolution, origin=grid.origin)
