from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage, signal

from .env_model import PGM_FREE, PGM_OCCUPIED, OccupancyGrid, write_pgm
from .errors import EmptyMask, NoPlacement, ResolutionMismatch, ValidationError
from .footprint import PlacementFootprint

logger = logging.getLogger(__name__)

DEFAULT_ROTATION_COUNT = 16
DEFAULT_SCORE_CAP = 10
MAX_ALTERNATIVES = 20
PGM_PLACEMENT = 128


def default_rotations(count: int = DEFAULT_ROTATION_COUNT) -> tuple[float, ...]:
    if count < 1:
        raise ValidationError(f"Rotation count must be >= 1, got {count}.")
    return tuple(2.0 * math.pi * k / count for k in range(count))


@dataclass(frozen=True)
class BinaryMask:
    """Required-free cells; cells[row, col]. The ellipse center sits on the lower-left corner of the anchor cell."""

    cells: np.ndarray
    resolution: float
    anchor: tuple[int, int]
    footprint: PlacementFootprint | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or not cells.any():
            raise EmptyMask("Mask has no required-free cells.")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    def rotated(self, theta: float) -> "BinaryMask":
        if theta == 0.0:
            return self
        if self.footprint is not None:
            return rasterize(self.footprint.rotated(theta), self.resolution)
        return _rotate_raster(self, theta)

    def boundary_offsets(self) -> np.ndarray:
        """(col, row) offsets from the anchor of true cells with a 4-neighbor outside the mask."""
        padded = np.pad(self.cells, 1, constant_values=False)
        interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
        boundary = (padded & ~interior)[1:-1, 1:-1]
        rows, cols = np.nonzero(boundary)
        return np.stack([cols - self.anchor[0], rows - self.anchor[1]], axis=1)


@dataclass(frozen=True)
class PlacementCandidate:
    position: tuple[int, int]
    rotation: float
    score: float = 0.0
    rotation_index: int = 0


@dataclass(frozen=True)
class PlacementPlan:
    best: PlacementCandidate
    alternatives: tuple[PlacementCandidate, ...]
    patient_pose: tuple[tuple[float, float], float]
    camera_pose: tuple[tuple[float, float], float, float]
    candidates_total: int = 0
    mask: BinaryMask | None = field(default=None, compare=False, repr=False)


def rasterize(footprint: PlacementFootprint, resolution: float) -> BinaryMask:
    """A cell is required-free iff its center lies inside the footprint geometry."""
    if not resolution > 0:
        raise ValidationError(f"Resolution must be > 0, got {resolution}.")
    min_x, min_y, max_x, max_y = footprint.bounds()
    cx, cy = (float(v) for v in footprint.center)
    col_lo = math.floor((min_x - cx) / resolution) - 1
    col_hi = math.ceil((max_x - cx) / resolution) + 1
    row_lo = math.floor((min_y - cy) / resolution) - 1
    row_hi = math.ceil((max_y - cy) / resolution) + 1

    cols = np.arange(col_lo, col_hi + 1)
    rows = np.arange(row_lo, row_hi + 1)
    grid_cols, grid_rows = np.meshgrid(cols, rows)
    centers = np.stack(
        [cx + (grid_cols + 0.5) * resolution, cy + (grid_rows + 0.5) * resolution],
        axis=-1,
    ).reshape(-1, 2)
    inside = footprint.contains(centers).reshape(grid_rows.shape)
    if not inside.any():
        raise EmptyMask(f"Resolution {resolution} m is coarser than the footprint; no cell center falls inside.")

    hit_rows, hit_cols = np.nonzero(inside)
    r0, r1 = int(hit_rows.min()), int(hit_rows.max())
    c0, c1 = int(hit_cols.min()), int(hit_cols.max())
    cells = inside[r0 : r1 + 1, c0 : c1 + 1]
    # offset 0 in both axes is the cell whose lower-left corner is the ellipse center
    anchor = (int(-(cols[c0])), int(-(rows[r0])))
    return BinaryMask(cells=cells, resolution=resolution, anchor=anchor, footprint=footprint)


def _rotate_raster(mask: BinaryMask, theta: float) -> BinaryMask:
    """Nearest-cell resampling for masks that carry no source geometry."""
    rows, cols = np.nonzero(mask.cells)
    offsets = np.stack([cols - mask.anchor[0] + 0.5, rows - mask.anchor[1] + 0.5], axis=1)
    radius = int(math.ceil(float(np.max(np.hypot(offsets[:, 0], offsets[:, 1]))))) + 1
    span = np.arange(-radius, radius)
    out_cols, out_rows = np.meshgrid(span, span)
    c, s = math.cos(-theta), math.sin(-theta)
    px = out_cols + 0.5
    py = out_rows + 0.5
    src_x = c * px - s * py
    src_y = s * px + c * py
    src_cols = np.floor(src_x).astype(int) + mask.anchor[0]
    src_rows = np.floor(src_y).astype(int) + mask.anchor[1]
    valid = (src_cols >= 0) & (src_cols < mask.width) & (src_rows >= 0) & (src_rows < mask.height)
    inside = np.zeros(out_cols.shape, dtype=bool)
    inside[valid] = mask.cells[src_rows[valid], src_cols[valid]]
    if not inside.any():
        raise EmptyMask("Rotated mask lost every cell.")
    hit_rows, hit_cols = np.nonzero(inside)
    r0, c0 = int(hit_rows.min()), int(hit_cols.min())
    cells = inside[r0 : int(hit_rows.max()) + 1, c0 : int(hit_cols.max()) + 1]
    return BinaryMask(
        cells=cells,
        resolution=mask.resolution,
        anchor=(int(-span[c0]), int(-span[r0])),
    )


# ----------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------


def _free_anchors(grid: OccupancyGrid, mask: BinaryMask) -> list[tuple[int, int]]:
    """Sliding window: anchors where mask AND occupied is empty; out-of-bounds counts as occupied."""
    if mask.height > grid.height or mask.width > grid.width:
        return []
    overlap = signal.correlate(
        grid.cells.astype(np.float64),
        mask.cells.astype(np.float64),
        mode="valid",
    )
    rows, cols = np.nonzero(overlap < 0.5)
    order = np.lexsort((cols, rows))
    return [(int(cols[i]) + mask.anchor[0], int(rows[i]) + mask.anchor[1]) for i in order]


def search(
    grid: OccupancyGrid,
    mask: BinaryMask,
    rotations: Sequence[float] = (0.0,),
    workers: int = 1,
) -> list[PlacementCandidate]:
    """Every collision-free (position, rotation), ordered by rotation index then row-major anchor."""
    if not math.isclose(mask.resolution, grid.resolution, rel_tol=1e-9):
        raise ResolutionMismatch(
            f"Mask resolution {mask.resolution} differs from grid resolution {grid.resolution}."
        )

    def evaluate(item: tuple[int, float]) -> list[PlacementCandidate]:
        index, theta = item
        try:
            rotated = mask.rotated(theta)
        except EmptyMask:
            return []
        return [
            PlacementCandidate(position=anchor, rotation=float(theta), rotation_index=index)
            for anchor in _free_anchors(grid, rotated)
        ]

    items = list(enumerate(rotations))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(evaluate, items))
    else:
        batches = [evaluate(item) for item in items]

    candidates = [candidate for batch in batches for candidate in batch]
    candidates.sort(key=lambda c: (c.rotation_index, c.position[1], c.position[0]))
    for index, batch in enumerate(batches):
        logger.debug("Search rotation=%.4f candidates=%s", items[index][1], len(batch))
    return candidates


# ----------------------------------------------------------------------
# Scoring and ranking
# ----------------------------------------------------------------------


def clearance_map(grid: OccupancyGrid) -> np.ndarray:
    """Chebyshev distance (cells) from each cell to the nearest occupied or out-of-bounds cell."""
    padded = np.pad(~grid.cells, 1, constant_values=False)
    distance = ndimage.distance_transform_cdt(padded, metric="chessboard")
    return distance[1:-1, 1:-1].astype(np.float64)


def score(
    grid: OccupancyGrid,
    candidate: PlacementCandidate,
    mask: BinaryMask,
    cap: float = DEFAULT_SCORE_CAP,
    clearance: np.ndarray | None = None,
) -> float:
    """Mean capped clearance over the mask's boundary cells; higher means more free space around."""
    if clearance is None:
        clearance = clearance_map(grid)
    offsets = mask.boundary_offsets()
    cols = offsets[:, 0] + candidate.position[0]
    rows = offsets[:, 1] + candidate.position[1]
    valid = (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height)
    values = np.zeros(offsets.shape[0], dtype=np.float64)
    values[valid] = clearance[rows[valid], cols[valid]]
    return float(np.mean(np.minimum(values, cap)))


def plan(
    grid: OccupancyGrid,
    footprint: PlacementFootprint,
    rotations: Sequence[float] | None = None,
    resolution: float | None = None,
    *,
    user_position: Sequence[float] | None = None,
    cap: float = DEFAULT_SCORE_CAP,
    max_alternatives: int = MAX_ALTERNATIVES,
    workers: int = 1,
) -> PlacementPlan:
    resolution = grid.resolution if resolution is None else float(resolution)
    if rotations is None:
        rotations = default_rotations()
    mask = rasterize(footprint, resolution)
    logger.info(
        "Placement start: grid=%sx%s mask=%sx%s rotations=%s",
        grid.width,
        grid.height,
        mask.width,
        mask.height,
        len(rotations),
    )
    candidates = search(grid, mask, rotations, workers=workers)
    if not candidates:
        raise NoPlacement("no placement found at any rotation")

    clearance = clearance_map(grid)
    masks = {index: mask.rotated(theta) for index, theta in enumerate(rotations)}
    scored = [
        PlacementCandidate(
            position=c.position,
            rotation=c.rotation,
            score=score(grid, c, masks[c.rotation_index], cap=cap, clearance=clearance),
            rotation_index=c.rotation_index,
        )
        for c in candidates
    ]

    def rank_key(c: PlacementCandidate) -> tuple[float, float, int, int]:
        user_distance = 0.0
        if user_position is not None:
            x, y = grid.cell_corner(*c.position)
            user_distance = math.hypot(x - float(user_position[0]), y - float(user_position[1]))
        return (-c.score, user_distance, c.position[1] * grid.width + c.position[0], c.rotation_index)

    scored.sort(key=rank_key)
    best = scored[0]
    patient_pose, camera_pose = world_poses(grid, footprint, best)
    logger.info(
        "Placement done: candidates=%s best=%s rotation=%.4f score=%.3f",
        len(scored),
        best.position,
        best.rotation,
        best.score,
    )
    return PlacementPlan(
        best=best,
        alternatives=tuple(scored[1 : 1 + max_alternatives]),
        patient_pose=patient_pose,
        camera_pose=camera_pose,
        candidates_total=len(scored),
        mask=masks[best.rotation_index],
    )


def world_poses(
    grid: OccupancyGrid,
    footprint: PlacementFootprint,
    candidate: PlacementCandidate,
) -> tuple[tuple[tuple[float, float], float], tuple[tuple[float, float], float, float]]:
    """Patient at the ellipse center facing the camera; camera facing the patient."""
    center = np.asarray(grid.cell_corner(*candidate.position))
    c, s = math.cos(candidate.rotation), math.sin(candidate.rotation)
    direction = np.array(
        [
            c * footprint.view_direction[0] - s * footprint.view_direction[1],
            s * footprint.view_direction[0] + c * footprint.view_direction[1],
        ]
    )
    camera = center - footprint.standoff * direction
    camera_heading = math.atan2(direction[1], direction[0])
    patient_heading = math.atan2(-direction[1], -direction[0])
    return (
        ((float(center[0]), float(center[1])), patient_heading),
        ((float(camera[0]), float(camera[1])), camera_heading, footprint.mount_height),
    )


def plan_to_dict(result: PlacementPlan) -> dict[str, Any]:
    (px, py), patient_heading = result.patient_pose
    (cx, cy), camera_heading, mount_height = result.camera_pose
    return {
        "patient_pose": {"x": px, "y": py, "heading": patient_heading},
        "camera_pose": {"x": cx, "y": cy, "heading": camera_heading, "mount_height": mount_height},
        "position": list(result.best.position),
        "rotation": result.best.rotation,
        "score": result.best.score,
        "candidates_total": result.candidates_total,
        "alternatives": [
            {"position": list(c.position), "rotation": c.rotation, "score": c.score}
            for c in result.alternatives[:MAX_ALTERNATIVES]
        ],
    }


def render_overlay(grid: OccupancyGrid, result: PlacementPlan, path: Path) -> None:
    """Debug PGM: free 0, occupied 255, cells covered by the best placement 128."""
    pixels = np.where(grid.cells, PGM_OCCUPIED, PGM_FREE).astype(np.uint8)
    if result.mask is not None:
        rows, cols = np.nonzero(result.mask.cells)
        grid_cols = cols - result.mask.anchor[0] + result.best.position[0]
        grid_rows = rows - result.mask.anchor[1] + result.best.position[1]
        valid = (grid_cols >= 0) & (grid_cols < grid.width) & (grid_rows >= 0) & (grid_rows < grid.height)
        pixels[grid_rows[valid], grid_cols[valid]] = PGM_PLACEMENT
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(Path(path), pixels)
