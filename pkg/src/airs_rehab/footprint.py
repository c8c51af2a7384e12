from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateFootprint,
    EmptyInput,
    ImpossibleGeometry,
    NoConvergence,
    ValidationError,
)
from .motion_data import SkeletonSequence, max_height

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.25
DEFAULT_TRIPOD_RADIUS = 0.35
ELLIPSE_TOL = 1e-6
ELLIPSE_MAX_ITER = 10_000
INFLATION_RADIUS = 0.01
MIN_FOOTPRINT_AREA = 1e-6
HULL_TOL = 1e-9


@dataclass(frozen=True)
class Polygon2D:
    """Counter-clockwise vertex loop."""

    vertices: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if vertices.shape[0] < 3:
            raise DegenerateFootprint("A polygon needs at least 3 vertices.")
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, point: Sequence[float], tol: float = HULL_TOL) -> bool:
        p = np.asarray(point, dtype=np.float64)
        a = self.vertices
        b = np.roll(self.vertices, -1, axis=0)
        edge = b - a
        rel = p - a
        cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
        lengths = np.hypot(edge[:, 0], edge[:, 1])
        return bool(np.all(cross >= -tol * lengths))


@dataclass(frozen=True)
class Ellipse2D:
    """Region (x - c)^T A (x - c) <= 1."""

    center: np.ndarray
    shape_matrix: np.ndarray

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=np.float64).reshape(2)
        matrix = np.array(self.shape_matrix, dtype=np.float64).reshape(2, 2)
        matrix = 0.5 * (matrix + matrix.T)
        if not np.all(np.isfinite(matrix)) or np.any(np.linalg.eigvalsh(matrix) <= 0):
            raise ValidationError("Ellipse shape matrix must be symmetric positive-definite.")
        center.setflags(write=False)
        matrix.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape_matrix", matrix)

    @classmethod
    def from_axes(cls, center: Sequence[float], a: float, b: float, orientation: float) -> "Ellipse2D":
        rotation = _rotation(orientation)
        diagonal = np.diag([1.0 / (a * a), 1.0 / (b * b)])
        return cls(center=np.asarray(center, dtype=np.float64), shape_matrix=rotation @ diagonal @ rotation.T)

    @property
    def semi_axes(self) -> tuple[float, float]:
        eigenvalues = np.linalg.eigvalsh(self.shape_matrix)
        return float(1.0 / math.sqrt(eigenvalues[0])), float(1.0 / math.sqrt(eigenvalues[1]))

    @property
    def orientation(self) -> float:
        """Major-axis angle in (-pi/2, pi/2]."""
        _, vectors = np.linalg.eigh(self.shape_matrix)
        major = vectors[:, 0]
        angle = math.atan2(major[1], major[0])
        if angle <= -math.pi / 2:
            angle += math.pi
        elif angle > math.pi / 2:
            angle -= math.pi
        return angle

    @property
    def half_extents(self) -> tuple[float, float]:
        """Half-width and half-height of the tight axis-aligned box."""
        inverse = np.linalg.inv(self.shape_matrix)
        return float(math.sqrt(inverse[0, 0])), float(math.sqrt(inverse[1, 1]))

    @property
    def area(self) -> float:
        return math.pi / math.sqrt(float(np.linalg.det(self.shape_matrix)))

    def level(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64).reshape(-1, 2) - self.center
        return np.einsum("ni,ij,nj->n", rel, self.shape_matrix, rel)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.level(points) <= 1.0 + tol

    def dilate(self, margin: float) -> "Ellipse2D":
        a, b = self.semi_axes
        return Ellipse2D.from_axes(self.center, a + margin, b + margin, self.orientation)

    def rotated(self, theta: float, pivot: Sequence[float] | None = None) -> "Ellipse2D":
        rotation = _rotation(theta)
        pivot_arr = self.center if pivot is None else np.asarray(pivot, dtype=np.float64)
        center = pivot_arr + rotation @ (self.center - pivot_arr)
        return Ellipse2D(center=center, shape_matrix=rotation @ self.shape_matrix @ rotation.T)

    def translated(self, offset: Sequence[float]) -> "Ellipse2D":
        return Ellipse2D(center=self.center + np.asarray(offset, dtype=np.float64), shape_matrix=self.shape_matrix)


@dataclass(frozen=True)
class ExerciseVolume:
    ellipse: Ellipse2D
    height: float

    def __post_init__(self) -> None:
        if not self.height > 0:
            raise ValidationError(f"Exercise volume height must be > 0, got {self.height}.")


@dataclass(frozen=True)
class CameraSpec:
    hfov: float
    vfov: float
    mount_height: float

    def __post_init__(self) -> None:
        if not 0 < self.hfov < math.pi:
            raise ValidationError(f"hfov must be in (0, pi), got {self.hfov}.")
        if not 0 < self.vfov < math.pi:
            raise ValidationError(f"vfov must be in (0, pi), got {self.vfov}.")
        if not self.mount_height > 0:
            raise ValidationError(f"mount_height must be > 0, got {self.mount_height}.")

    @classmethod
    def from_degrees(cls, hfov_deg: float, vfov_deg: float, mount_height: float) -> "CameraSpec":
        return cls(hfov=math.radians(hfov_deg), vfov=math.radians(vfov_deg), mount_height=mount_height)


@dataclass(frozen=True)
class PlacementFootprint:
    """Exercise ellipse, tripod disc at camera_point and the sight corridor joining them."""

    exercise_region: Ellipse2D
    camera_point: np.ndarray
    view_direction: np.ndarray
    margin: float
    tripod_radius: float = DEFAULT_TRIPOD_RADIUS
    standoff: float = 0.0
    height: float = 0.0
    mount_height: float = 0.0

    def __post_init__(self) -> None:
        camera = np.array(self.camera_point, dtype=np.float64).reshape(2)
        direction = np.array(self.view_direction, dtype=np.float64).reshape(2)
        camera.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "camera_point", camera)
        object.__setattr__(self, "view_direction", direction)

    @property
    def center(self) -> np.ndarray:
        return self.exercise_region.center

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        inside = self.exercise_region.contains(pts)
        rel_camera = pts - self.camera_point
        inside |= np.einsum("ni,ni->n", rel_camera, rel_camera) <= self.tripod_radius**2
        # corridor: rectangle from the camera to the ellipse center, width 2 * tripod radius
        axis = self.center - self.camera_point
        length = float(np.hypot(axis[0], axis[1]))
        if length > 0:
            unit = axis / length
            along = rel_camera @ unit
            across = np.abs(rel_camera[:, 0] * unit[1] - rel_camera[:, 1] * unit[0])
            inside |= (along >= 0) & (along <= length) & (across <= self.tripod_radius)
        return inside

    def bounds(self) -> tuple[float, float, float, float]:
        """Axis-aligned box around the ellipse, the tripod disc and the corridor rectangle."""
        half_x, half_y = self.exercise_region.half_extents
        cx, cy = (float(v) for v in self.center)
        px, py = (float(v) for v in self.camera_point)
        r = self.tripod_radius
        xs = [cx - half_x, cx + half_x, px - r, px + r]
        ys = [cy - half_y, cy + half_y, py - r, py + r]
        axis = self.center - self.camera_point
        length = float(np.hypot(axis[0], axis[1]))
        if length > 0:
            perp = np.array([-axis[1], axis[0]]) / length * r
            for end in (self.camera_point, self.center):
                for corner in (end + perp, end - perp):
                    xs.append(float(corner[0]))
                    ys.append(float(corner[1]))
        return (min(xs), min(ys), max(xs), max(ys))

    def rotated(self, theta: float) -> "PlacementFootprint":
        """Rotate about the ellipse center."""
        rotation = _rotation(theta)
        center = self.center
        return PlacementFootprint(
            exercise_region=self.exercise_region.rotated(theta),
            camera_point=center + rotation @ (self.camera_point - center),
            view_direction=rotation @ self.view_direction,
            margin=self.margin,
            tripod_radius=self.tripod_radius,
            standoff=self.standoff,
            height=self.height,
            mount_height=self.mount_height,
        )


# ----------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------


def floor_projection(seqs: Sequence[SkeletonSequence]) -> np.ndarray:
    if not seqs:
        raise EmptyInput("floor_projection needs at least one sequence.")
    return np.concatenate([seq.positions()[:, :, :2].reshape(-1, 2) for seq in seqs], axis=0)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def convex_hull(points: np.ndarray) -> Polygon2D:
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if pts.shape[0] < 3:
        raise DegenerateFootprint(f"Convex hull needs 3 distinct points, got {pts.shape[0]}.")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    ordered = pts[order]

    lower: list[np.ndarray] = []
    for p in ordered:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in ordered[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)

    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateFootprint("All footprint points are collinear.")
    return Polygon2D(vertices=np.array(hull))


def _inflate(points: np.ndarray, radius: float = INFLATION_RADIUS) -> np.ndarray:
    offsets = np.array([[radius, 0.0], [0.0, radius], [-radius, 0.0], [0.0, -radius]])
    return (points[:, None, :] + offsets[None, :, :]).reshape(-1, 2)


def _support_points(points: np.ndarray) -> np.ndarray:
    """Hull vertices, inflating degenerate (collinear or near-zero area) sets first."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise DegenerateFootprint("Cannot enclose an empty point set.")
    if not np.all(np.isfinite(pts)):
        raise DegenerateFootprint("Footprint points must be finite.")
    try:
        hull = convex_hull(pts)
        if hull.area >= MIN_FOOTPRINT_AREA:
            return hull.vertices
    except DegenerateFootprint:
        pass
    logger.debug("Footprint is degenerate (%s points); inflating by %.2f m", pts.shape[0], INFLATION_RADIUS)
    return convex_hull(_inflate(np.unique(pts, axis=0))).vertices


def min_enclosing_ellipse(
    points: np.ndarray,
    tol: float = ELLIPSE_TOL,
    max_iter: int = ELLIPSE_MAX_ITER,
) -> Ellipse2D:
    """Minimum-area enclosing ellipse by Khachiyan's iteration with Todd-Yildirim away steps.

    Stops once every support point satisfies (x-c)^T A (x-c) <= 1 + tol, then
    rescales A so the containment holds exactly.
    """
    if not tol > 0:
        raise ValidationError(f"tol must be > 0, got {tol}.")
    support = _support_points(points)
    n, d = support.shape
    # work relative to the centroid for conditioning
    shift = support.mean(axis=0)
    p = support - shift
    q = np.vstack([p.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    target = d * tol / (d + 1)

    for iteration in range(max_iter + 1):
        x = (q * u) @ q.T
        m = np.einsum("in,ij,jn->n", q, np.linalg.inv(x), q)
        j = int(np.argmax(m))
        eps_plus = m[j] / (d + 1) - 1.0
        support_mask = u > 0
        k = int(np.flatnonzero(support_mask)[np.argmin(m[support_mask])])
        eps_minus = 1.0 - m[k] / (d + 1)
        if eps_plus <= target:
            break
        if iteration == max_iter:
            raise NoConvergence(f"Enclosing ellipse did not converge in {max_iter} iterations.")
        if eps_plus > eps_minus or m[k] <= 1.0 or u[k] >= 1.0:
            step = (m[j] - d - 1) / ((d + 1) * (m[j] - 1))
            u *= 1.0 - step
            u[j] += step
        else:
            step = min((d + 1 - m[k]) / ((d + 1) * (m[k] - 1)), u[k] / (1.0 - u[k]))
            u *= 1.0 + step
            u[k] -= step
            u[k] = max(u[k], 0.0)
        u /= u.sum()

    center = u @ p
    scatter = (p.T * u) @ p - np.outer(center, center)
    matrix = np.linalg.inv(scatter) / d
    rel = p - center
    worst = float(np.max(np.einsum("ni,ij,nj->n", rel, matrix, rel)))
    if worst > 1.0:
        matrix = matrix / worst
    ellipse = Ellipse2D(center=center + shift, shape_matrix=matrix)
    logger.debug("Enclosing ellipse: iterations=%s axes=%s", iteration, ellipse.semi_axes)
    return ellipse


def exercise_volume(
    seqs: Sequence[SkeletonSequence],
    margin: float = DEFAULT_MARGIN,
    tol: float = ELLIPSE_TOL,
    max_iter: int = ELLIPSE_MAX_ITER,
) -> ExerciseVolume:
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}.")
    points = floor_projection(seqs)
    try:
        hull_points = convex_hull(points).vertices
    except DegenerateFootprint:
        hull_points = points
    ellipse = min_enclosing_ellipse(hull_points, tol=tol, max_iter=max_iter)
    if margin > 0:
        ellipse = ellipse.dilate(margin)
    height = max(max_height(seq) for seq in seqs) + margin
    return ExerciseVolume(ellipse=ellipse, height=height)


def camera_standoff(volume: ExerciseVolume, cam: CameraSpec) -> float:
    """Distance from the ellipse center at which the bounding cylinder fits the camera frustum."""
    radius = max(volume.ellipse.semi_axes)
    vertical_extent = max(volume.height - cam.mount_height, cam.mount_height)
    horizontal = radius / math.tan(cam.hfov / 2.0)
    vertical = vertical_extent / math.tan(cam.vfov / 2.0)
    distance = radius + max(horizontal, vertical)
    if not math.isfinite(distance) or distance <= 0:
        raise ImpossibleGeometry(f"Camera standoff evaluated to {distance}.")
    return distance


def build_placement_footprint(
    volume: ExerciseVolume,
    cam: CameraSpec,
    view_direction: Sequence[float] = (1.0, 0.0),
    tripod_radius: float = DEFAULT_TRIPOD_RADIUS,
    margin: float = DEFAULT_MARGIN,
) -> PlacementFootprint:
    direction = np.asarray(view_direction, dtype=np.float64).reshape(2)
    norm = float(np.hypot(direction[0], direction[1]))
    if not math.isclose(norm, 1.0, abs_tol=1e-6):
        raise ValidationError(f"view_direction must be a unit vector, got norm {norm:.6f}.")
    distance = camera_standoff(volume, cam)
    camera_point = volume.ellipse.center - distance * direction
    return PlacementFootprint(
        exercise_region=volume.ellipse,
        camera_point=camera_point,
        view_direction=direction,
        margin=margin,
        tripod_radius=tripod_radius,
        standoff=distance,
        height=volume.height,
        mount_height=cam.mount_height,
    )


def footprint_to_dict(footprint: PlacementFootprint) -> dict[str, Any]:
    a, b = footprint.exercise_region.semi_axes
    return {
        "center": [float(v) for v in footprint.center],
        "shape_matrix": [[float(v) for v in row] for row in footprint.exercise_region.shape_matrix],
        "semi_axes": [a, b],
        "orientation": footprint.exercise_region.orientation,
        "height": footprint.height,
        "camera_point": [float(v) for v in footprint.camera_point],
        "view_direction": [float(v) for v in footprint.view_direction],
        "standoff": footprint.standoff,
        "margin": footprint.margin,
        "tripod_radius": footprint.tripod_radius,
        "mount_height": footprint.mount_height,
    }


def footprint_from_dict(payload: dict[str, Any]) -> PlacementFootprint:
    try:
        return PlacementFootprint(
            exercise_region=Ellipse2D(
                center=np.asarray(payload["center"], dtype=np.float64),
                shape_matrix=np.asarray(payload["shape_matrix"], dtype=np.float64),
            ),
            camera_point=np.asarray(payload["camera_point"], dtype=np.float64),
            view_direction=np.asarray(payload["view_direction"], dtype=np.float64),
            margin=float(payload.get("margin", DEFAULT_MARGIN)),
            tripod_radius=float(payload.get("tripod_radius", DEFAULT_TRIPOD_RADIUS)),
            standoff=float(payload.get("standoff", 0.0)),
            height=float(payload.get("height", 0.0)),
            mount_height=float(payload.get("mount_height", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"Invalid footprint JSON: {exc}") from exc


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])
