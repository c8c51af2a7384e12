from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
import pathlib
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .env_model import OccupancyGrid, SemanticLabelMap
from .errors import GoalOccupied, MalformedRecord, NoPath, StartOccupied, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_INFLATION_RADIUS = 0.30
TURN_QUANTUM_DEG = 15.0
DISTANCE_QUANTUM_M = 0.1
LANDMARK_CONE_DEG = 20.0
MIN_TURN_DEG = 1e-6
SQRT2 = math.sqrt(2.0)

_NEIGHBORS = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (-1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, -1, SQRT2),
)


def normalize_angle(angle: float) -> float:
    """Map to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2D:
    position: tuple[float, float]
    heading: float

    def __post_init__(self) -> None:
        x, y = (float(v) for v in self.position)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(self.heading)):
            raise ValidationError(f"Pose must be finite, got {self.position}, {self.heading}.")
        object.__setattr__(self, "position", (x, y))
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))


@dataclass(frozen=True)
class Path:
    cells: tuple[tuple[int, int], ...]
    cost: float
    resolution: float

    @property
    def length(self) -> float:
        return self.cost * self.resolution


class InstructionKind(str, Enum):
    TURN = "turn"
    WALK = "walk"
    ARRIVE = "arrive"


@dataclass(frozen=True)
class Instruction:
    kind: InstructionKind
    text: str
    turn_degrees: float | None = None
    walk_meters: float | None = None
    raw_turn_degrees: float | None = None
    raw_walk_meters: float | None = None
    landmark: str | None = None

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"kind": self.kind.value, "text": self.text}
        if self.kind is InstructionKind.TURN:
            payload["turn_degrees"] = self.turn_degrees
            payload["raw_turn_degrees"] = self.raw_turn_degrees
        elif self.kind is InstructionKind.WALK:
            payload["walk_meters"] = self.walk_meters
            payload["raw_walk_meters"] = self.raw_walk_meters
            if self.raw_turn_degrees is not None:
                payload["raw_turn_degrees"] = self.raw_turn_degrees
        if self.landmark is not None:
            payload["landmark"] = self.landmark
        return payload


# ----------------------------------------------------------------------
# Planning
# ----------------------------------------------------------------------


def inflate(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Occupied iff a cell center lies within radius of an originally occupied cell center."""
    if radius < 0:
        raise ValidationError(f"Inflation radius must be >= 0, got {radius}.")
    if radius == 0 or not grid.cells.any():
        return grid.with_cells(grid.cells.copy())
    distance = ndimage.distance_transform_edt(~grid.cells) * grid.resolution
    return grid.with_cells(distance <= radius + 1e-9)


def _passable(cells: np.ndarray, col: int, row: int) -> bool:
    height, width = cells.shape
    return 0 <= col < width and 0 <= row < height and not cells[row, col]


def _octile(col: int, row: int, goal: tuple[int, int]) -> float:
    dx, dy = abs(col - goal[0]), abs(row - goal[1])
    return (SQRT2 - 1.0) * min(dx, dy) + max(dx, dy)


def plan_path(grid: OccupancyGrid, start: Pose2D, goal: Sequence[float]) -> Path:
    """A* over 8-connected free cells; diagonal steps may not cut an occupied corner."""
    cells = grid.cells
    start_cell = grid.world_to_cell(*start.position)
    goal_cell = grid.world_to_cell(float(goal[0]), float(goal[1]))
    if not _passable(cells, *start_cell):
        raise StartOccupied(f"Start {start.position} maps to blocked cell {start_cell}.")
    if not _passable(cells, *goal_cell):
        raise GoalOccupied(f"Goal {tuple(goal)} maps to blocked cell {goal_cell}.")

    width = grid.width
    g_score: dict[tuple[int, int], float] = {start_cell: 0.0}
    came_from: dict[tuple[int, int], tuple[int, int]] = {}
    closed: set[tuple[int, int]] = set()
    h0 = _octile(*start_cell, goal_cell)
    # (f, h, row-major index) orders the frontier deterministically
    frontier = [(h0, h0, start_cell[1] * width + start_cell[0], start_cell)]

    while frontier:
        _, _, _, current = heapq.heappop(frontier)
        if current in closed:
            continue
        if current == goal_cell:
            break
        closed.add(current)
        col, row = current
        for dc, dr, step in _NEIGHBORS:
            neighbor = (col + dc, row + dr)
            if neighbor in closed or not _passable(cells, *neighbor):
                continue
            if dc and dr and not (_passable(cells, col + dc, row) and _passable(cells, col, row + dr)):
                continue
            tentative = g_score[current] + step
            if tentative < g_score.get(neighbor, math.inf):
                g_score[neighbor] = tentative
                came_from[neighbor] = current
                h = _octile(*neighbor, goal_cell)
                heapq.heappush(frontier, (tentative + h, h, neighbor[1] * width + neighbor[0], neighbor))
    else:
        raise NoPath(f"No path from {start_cell} to {goal_cell}.")

    path = [goal_cell]
    while path[-1] != start_cell:
        path.append(came_from[path[-1]])
    path.reverse()
    return Path(cells=tuple(path), cost=g_score[goal_cell], resolution=grid.resolution)


def supercover(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Every cell the segment between two cell centers touches, corners included."""
    (x0, y0), (x1, y1) = start, end
    dx, dy = x1 - x0, y1 - y0
    nx, ny = abs(dx), abs(dy)
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    x, y = x0, y0
    cells = [(x, y)]
    ix = iy = 0
    while ix < nx or iy < ny:
        decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx
        if decision == 0:
            # passes exactly through a corner: both side cells are touched
            cells.append((x + sx, y))
            cells.append((x, y + sy))
            x += sx
            y += sy
            ix += 1
            iy += 1
        elif decision < 0:
            x += sx
            ix += 1
        else:
            y += sy
            iy += 1
        cells.append((x, y))
    return cells


def line_of_sight(grid: OccupancyGrid, start: tuple[int, int], end: tuple[int, int]) -> bool:
    return all(_passable(grid.cells, col, row) for col, row in supercover(start, end))


def segment_cells(grid: OccupancyGrid, start: Sequence[float], end: Sequence[float]) -> set[tuple[int, int]]:
    """Cells whose closed square meets the world-space segment; edge and corner contacts count."""
    u0 = (float(start[0]) - grid.origin[0]) / grid.resolution
    v0 = (float(start[1]) - grid.origin[1]) / grid.resolution
    u1 = (float(end[0]) - grid.origin[0]) / grid.resolution
    v1 = (float(end[1]) - grid.origin[1]) / grid.resolution
    u_lo, u_hi = min(u0, u1), max(u0, u1)
    touched: set[tuple[int, int]] = set()
    for col in range(math.ceil(u_lo) - 1, math.floor(u_hi) + 1):
        if u0 == u1:
            va, vb = v0, v1
        else:
            ua, ub = max(u_lo, float(col)), min(u_hi, float(col + 1))
            va = v0 + (ua - u0) * (v1 - v0) / (u1 - u0)
            vb = v0 + (ub - u0) * (v1 - v0) / (u1 - u0)
        lo, hi = min(va, vb), max(va, vb)
        for row in range(math.ceil(lo) - 1, math.floor(hi) + 1):
            touched.add((col, row))
    return touched


def segment_clear(grid: OccupancyGrid, start: Sequence[float], end: Sequence[float]) -> bool:
    return all(_passable(grid.cells, col, row) for col, row in segment_cells(grid, start, end))


def simplify(path: Path, grid: OccupancyGrid) -> list[tuple[float, float]]:
    """Greedy line-of-sight shortcutting; returns world waypoints at cell centers."""
    cells = list(path.cells)
    if len(cells) <= 2:
        return [grid.cell_center(*cell) for cell in cells]
    kept = [0]
    i = 0
    while i < len(cells) - 1:
        j = len(cells) - 1
        while j > i + 1 and not line_of_sight(grid, cells[i], cells[j]):
            j -= 1
        kept.append(j)
        i = j
    return [grid.cell_center(*cells[index]) for index in kept]


# ----------------------------------------------------------------------
# Instructions
# ----------------------------------------------------------------------


def _quantize(value: float, quantum: float) -> float:
    return round(value / quantum) * quantum


def _turn_text(quantized: float) -> str:
    if abs(quantized) >= 180.0:
        return "Turn around"
    side = "left" if quantized > 0 else "right"
    return f"Turn {side} {int(abs(quantized))} degrees"


def _landmark_for(
    origin: tuple[float, float],
    heading: float,
    labels: SemanticLabelMap | None,
) -> str | None:
    if labels is None:
        return None
    best: tuple[float, str] | None = None
    for label, (lx, ly) in labels.centroids():
        bearing = math.atan2(ly - origin[1], lx - origin[0])
        offset = abs(math.degrees(normalize_angle(bearing - heading)))
        if offset <= LANDMARK_CONE_DEG and (best is None or (offset, label) < best):
            best = (offset, label)
    return best[1] if best else None


def instructions(
    waypoints: Sequence[Sequence[float]],
    start: Pose2D,
    labels: SemanticLabelMap | None = None,
) -> list[Instruction]:
    """Egocentric turn/walk steps from the start pose through each waypoint, ending with arrive.

    Waypoints that coincide with the current position are skipped.
    """
    if not waypoints:
        raise ValidationError("instructions need at least one waypoint.")
    steps: list[Instruction] = []
    position = start.position
    heading = start.heading
    for waypoint in waypoints:
        dx, dy = float(waypoint[0]) - position[0], float(waypoint[1]) - position[1]
        distance = math.hypot(dx, dy)
        if distance < 1e-9:
            continue
        target = math.atan2(dy, dx)
        raw_turn = math.degrees(normalize_angle(target - heading))
        quantized = max(-180.0, min(180.0, _quantize(raw_turn, TURN_QUANTUM_DEG)))
        # turns that round to zero are not spoken; the walk carries the exact heading change
        folded_turn = raw_turn if quantized == 0 and abs(raw_turn) > MIN_TURN_DEG else None
        if quantized != 0:
            steps.append(
                Instruction(
                    kind=InstructionKind.TURN,
                    text=_turn_text(quantized),
                    turn_degrees=quantized,
                    raw_turn_degrees=raw_turn,
                )
            )
        heading = target
        landmark = _landmark_for(position, heading, labels)
        meters = round(_quantize(distance, DISTANCE_QUANTUM_M), 1)
        text = f"Walk {meters:.1f} meters"
        if landmark:
            text += f" towards the {landmark}"
        steps.append(
            Instruction(
                kind=InstructionKind.WALK,
                text=text,
                walk_meters=meters,
                raw_walk_meters=distance,
                raw_turn_degrees=folded_turn,
                landmark=landmark,
            )
        )
        position = (float(waypoint[0]), float(waypoint[1]))
    steps.append(Instruction(kind=InstructionKind.ARRIVE, text="You have arrived at the exercise area"))
    return steps


def replay_instructions(start: Pose2D, steps: Sequence[Instruction]) -> Pose2D:
    """Kinematic replay with the raw values: turn in place, then walk straight.

    A walk may carry the unspoken sub-quantum turn that precedes it.
    """
    x, y = start.position
    heading = start.heading
    for step in steps:
        if step.kind is InstructionKind.TURN:
            heading += math.radians(step.raw_turn_degrees or 0.0)
        elif step.kind is InstructionKind.WALK:
            heading += math.radians(step.raw_turn_degrees or 0.0)
            distance = step.raw_walk_meters or 0.0
            x += distance * math.cos(heading)
            y += distance * math.sin(heading)
    return Pose2D(position=(x, y), heading=heading)


def replan(
    grid: OccupancyGrid,
    current: Pose2D,
    goal: Sequence[float],
    labels: SemanticLabelMap | None = None,
) -> list[Instruction]:
    """Fresh instructions from the current pose; no state carried from earlier requests."""
    path = plan_path(grid, current, goal)
    waypoints = simplify(path, grid)
    # the walk starts from the measured pose; keep the cell center as a first stop
    # when the straight leg from the pose to the next waypoint crosses blocked cells
    if len(waypoints) > 1 and segment_clear(grid, current.position, waypoints[1]):
        waypoints[0] = current.position
    else:
        waypoints.insert(0, current.position)
    steps = instructions(waypoints, current, labels)
    logger.info(
        "Replan done: pose=(%.2f, %.2f, %.1f deg) path_cells=%s waypoints=%s steps=%s",
        current.position[0],
        current.position[1],
        math.degrees(current.heading),
        len(path.cells),
        len(waypoints),
        len(steps),
    )
    return steps


def load_pose_stream(path: pathlib.Path | str) -> list[tuple[float, Pose2D]]:
    """JSONL of {t, x, y, heading}; heading in radians."""
    path = pathlib.Path(path)
    poses: list[tuple[float, Pose2D]] = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            pose = Pose2D(position=(float(record["x"]), float(record["y"])), heading=float(record["heading"]))
            t = float(record.get("t", 0.0))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"{path}:{number}: invalid pose record ({exc}).") from exc
        poses.append((t, pose))
    if not poses:
        raise MalformedRecord(f"{path}: pose stream is empty.")
    return poses
