from __future__ import annotations

import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = PROJECT_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from airs_rehab.env_model import OccupancyGrid, read_pgm
from airs_rehab.errors import EmptyMask, NoPlacement, ResolutionMismatch
from airs_rehab.footprint import CameraSpec, Ellipse2D, ExerciseVolume, PlacementFootprint, build_placement_footprint
from airs_rehab.placement import (
    PGM_PLACEMENT,
    BinaryMask,
    PlacementCandidate,
    default_rotations,
    plan,
    plan_to_dict,
    rasterize,
    render_overlay,
    score,
    search,
)


def disc_footprint(radius: float) -> PlacementFootprint:
    """Bare exercise disc: the camera sits on the center with no tripod area."""
    return PlacementFootprint(
        exercise_region=Ellipse2D.from_axes((0.0, 0.0), radius, radius, 0.0),
        camera_point=(0.0, 0.0),
        view_direction=(1.0, 0.0),
        margin=0.0,
        tripod_radius=0.0,
    )


def empty_grid(width: int, height: int, resolution: float = 0.1) -> OccupancyGrid:
    return OccupancyGrid(resolution=resolution, origin=(0.0, 0.0), cells=np.zeros((height, width), dtype=bool))


def solid_mask(size: int = 3, resolution: float = 0.1) -> BinaryMask:
    return BinaryMask(cells=np.ones((size, size), dtype=bool), resolution=resolution, anchor=(size // 2, size // 2))


def oracle_candidates(grid: OccupancyGrid, mask: BinaryMask, rotations: list[float]) -> list[tuple[int, tuple[int, int]]]:
    found: list[tuple[int, tuple[int, int]]] = []
    for index, theta in enumerate(rotations):
        try:
            rotated = mask.rotated(theta)
        except EmptyMask:
            continue
        rows, cols = np.nonzero(rotated.cells)
        for y0 in range(grid.height - rotated.height + 1):
            for x0 in range(grid.width - rotated.width + 1):
                if not grid.cells[rows + y0, cols + x0].any():
                    found.append((index, (x0 + rotated.anchor[0], y0 + rotated.anchor[1])))
    return found


class RasterizeTest(unittest.TestCase):
    def brute_force_count(self, radius: float, resolution: float) -> int:
        reach = int(math.ceil(radius / resolution)) + 1
        count = 0
        for col in range(-reach, reach):
            for row in range(-reach, reach):
                x = (col + 0.5) * resolution
                y = (row + 0.5) * resolution
                count += x * x + y * y <= radius * radius
        return count

    def test_disc_matches_cell_center_scan(self) -> None:
        mask = rasterize(disc_footprint(1.0), 0.5)
        self.assertEqual(int(mask.cells.sum()), self.brute_force_count(1.0, 0.5))
        np.testing.assert_array_equal(mask.cells, np.flipud(mask.cells))
        np.testing.assert_array_equal(mask.cells, np.fliplr(mask.cells))
        self.assertTrue(mask.cells[0].any() and mask.cells[:, 0].any())

    def test_halving_resolution_roughly_quadruples(self) -> None:
        coarse = int(rasterize(disc_footprint(1.0), 0.5).cells.sum())
        fine = int(rasterize(disc_footprint(1.0), 0.25).cells.sum())
        self.assertEqual(fine, self.brute_force_count(1.0, 0.25))
        self.assertGreaterEqual(fine / coarse, 3.5)
        self.assertLessEqual(fine / coarse, 4.5)

    def covered_offsets(self, footprint: PlacementFootprint, resolution: float, reach: int) -> set[tuple[int, int]]:
        cx, cy = (float(v) for v in footprint.center)
        span = np.arange(-reach, reach)
        cols, rows = np.meshgrid(span, span)
        centers = np.stack([cx + (cols + 0.5) * resolution, cy + (rows + 0.5) * resolution], axis=-1).reshape(-1, 2)
        inside = footprint.contains(centers)
        return {(int(c), int(r)) for c, r in zip(cols.ravel()[inside], rows.ravel()[inside])}

    def mask_offsets(self, mask: BinaryMask) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(mask.cells)
        return {(int(c) - mask.anchor[0], int(r) - mask.anchor[1]) for r, c in zip(rows, cols)}

    def test_tripod_and_corridor_outside_a_small_ellipse_are_kept(self) -> None:
        view = np.array([1.0, 1.0]) / math.sqrt(2.0)
        standoff = 1.2
        footprint = PlacementFootprint(
            exercise_region=Ellipse2D.from_axes((0.3, -0.2), 0.05, 0.02, 0.4),
            camera_point=np.array([0.3, -0.2]) - standoff * view,
            view_direction=view,
            margin=0.0,
            tripod_radius=0.35,
            standoff=standoff,
        )
        mask = rasterize(footprint, 0.05)
        expected = self.covered_offsets(footprint, 0.05, 80)
        self.assertEqual(self.mask_offsets(mask), expected)
        # tripod disc alone covers roughly pi * r^2 / res^2 cells
        self.assertGreater(len(expected), 150)

    def test_rotated_footprints_match_cell_center_scan(self) -> None:
        volume = ExerciseVolume(ellipse=Ellipse2D.from_axes((0.0, 0.0), 0.3, 0.1, 0.2), height=1.0)
        footprint = build_placement_footprint(volume, CameraSpec.from_degrees(70, 50, 0.9), (0.0, 1.0), tripod_radius=0.3)
        for theta in default_rotations(12):
            rotated = footprint.rotated(theta)
            mask = rasterize(rotated, 0.1)
            self.assertEqual(self.mask_offsets(mask), self.covered_offsets(rotated, 0.1, 60), theta)

    def test_coarse_resolution_loses_the_footprint(self) -> None:
        with self.assertRaises(EmptyMask):
            rasterize(disc_footprint(1.0), 10.0)

    def test_anchor_is_the_center_corner(self) -> None:
        mask = rasterize(disc_footprint(0.14), 0.1)
        self.assertEqual(mask.cells.shape, (2, 2))
        self.assertEqual(mask.anchor, (1, 1))

    def test_empty_mask_is_rejected(self) -> None:
        with self.assertRaises(EmptyMask):
            BinaryMask(cells=np.zeros((2, 2), dtype=bool), resolution=0.1, anchor=(0, 0))


class SearchTest(unittest.TestCase):
    def test_counts_every_anchor_on_an_empty_grid(self) -> None:
        candidates = search(empty_grid(20, 20), solid_mask(), [0.0])
        self.assertEqual(len(candidates), 324)
        self.assertEqual(candidates[0].position, (1, 1))
        self.assertEqual(candidates[-1].position, (18, 18))

    def test_fully_occupied_grid_has_no_candidates(self) -> None:
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=np.ones((10, 10), dtype=bool))
        self.assertEqual(search(grid, solid_mask(), default_rotations(4)), [])

    def test_mask_larger_than_grid(self) -> None:
        self.assertEqual(search(empty_grid(2, 2), solid_mask(), [0.0]), [])

    def test_resolution_must_match(self) -> None:
        with self.assertRaises(ResolutionMismatch):
            search(empty_grid(10, 10, resolution=0.1), solid_mask(resolution=0.05), [0.0])

    def test_matches_exhaustive_oracle(self) -> None:
        rng = np.random.default_rng(11)
        rotations = list(default_rotations(8))
        for _ in range(200):
            width, height = (int(v) for v in rng.integers(6, 65, size=2))
            grid = OccupancyGrid(
                resolution=0.1,
                origin=(0.0, 0.0),
                cells=rng.random((height, width)) < 0.12,
            )
            shape = rng.random((4, 5)) < 0.7
            shape[1, 2] = True
            mask = BinaryMask(cells=shape, resolution=0.1, anchor=(2, 1))
            candidates = search(grid, mask, rotations)
            expected = oracle_candidates(grid, mask, rotations)
            self.assertEqual([(c.rotation_index, c.position) for c in candidates], expected)
            for candidate in candidates:
                rotated = mask.rotated(candidate.rotation)
                rows, cols = np.nonzero(rotated.cells)
                cols = cols - rotated.anchor[0] + candidate.position[0]
                rows = rows - rotated.anchor[1] + candidate.position[1]
                self.assertFalse(grid.cells[rows, cols].any())

    def test_footprint_masks_match_oracle_and_geometry(self) -> None:
        rng = np.random.default_rng(23)
        rotations = list(default_rotations(8))
        footprint = PlacementFootprint(
            exercise_region=Ellipse2D.from_axes((0.0, 0.0), 0.35, 0.2, 0.3),
            camera_point=(-0.6, -0.5),
            view_direction=np.array([0.6, 0.5]) / math.hypot(0.6, 0.5),
            margin=0.0,
            tripod_radius=0.15,
        )
        mask = rasterize(footprint, 0.1)
        for _ in range(20):
            width, height = (int(v) for v in rng.integers(20, 41, size=2))
            grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=rng.random((height, width)) < 0.02)
            candidates = search(grid, mask, rotations)
            self.assertEqual([(c.rotation_index, c.position) for c in candidates], oracle_candidates(grid, mask, rotations))
            occupied_rows, occupied_cols = np.nonzero(grid.cells)
            for candidate in candidates:
                rel = np.stack(
                    [
                        (occupied_cols - candidate.position[0] + 0.5) * 0.1,
                        (occupied_rows - candidate.position[1] + 0.5) * 0.1,
                    ],
                    axis=1,
                )
                placed = footprint if candidate.rotation == 0.0 else footprint.rotated(candidate.rotation)
                self.assertFalse(placed.contains(rel).any())

    def test_single_pocket_is_found_at_any_rotation_list(self) -> None:
        grid_cells = np.ones((12, 12), dtype=bool)
        grid_cells[4:7, 5:8] = False
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=grid_cells)
        mask = solid_mask()
        candidates = search(grid, mask, [0.0, math.pi / 2, math.pi])
        self.assertEqual(
            [(c.rotation_index, c.position) for c in candidates],
            oracle_candidates(grid, mask, [0.0, math.pi / 2, math.pi]),
        )
        self.assertIn((0, (6, 5)), [(c.rotation_index, c.position) for c in candidates])

    def test_parallel_search_is_deterministic(self) -> None:
        rng = np.random.default_rng(4)
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=rng.random((30, 30)) < 0.1)
        mask = BinaryMask(cells=np.ones((2, 4), dtype=bool), resolution=0.1, anchor=(1, 1))
        rotations = default_rotations(8)
        serial = search(grid, mask, rotations, workers=1)
        parallel = search(grid, mask, rotations, workers=4)
        self.assertEqual(serial, parallel)


class ScoreTest(unittest.TestCase):
    def test_open_space_scores_the_cap(self) -> None:
        grid = empty_grid(40, 40)
        candidate = PlacementCandidate(position=(20, 20), rotation=0.0)
        self.assertEqual(score(grid, candidate, solid_mask(), cap=10), 10.0)

    def test_wall_contact_scores_less(self) -> None:
        grid = empty_grid(40, 40)
        centered = score(grid, PlacementCandidate(position=(20, 20), rotation=0.0), solid_mask())
        at_wall = score(grid, PlacementCandidate(position=(1, 20), rotation=0.0), solid_mask())
        self.assertLess(at_wall, centered)
        self.assertGreaterEqual(at_wall, 0.0)

    def test_mirror_candidates_score_equally(self) -> None:
        cells = np.zeros((20, 20), dtype=bool)
        cells[5:8, 0] = True
        cells[5:8, 19] = True
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=cells)
        left = score(grid, PlacementCandidate(position=(3, 6), rotation=0.0), solid_mask())
        right = score(grid, PlacementCandidate(position=(16, 6), rotation=0.0), solid_mask())
        self.assertEqual(left, right)


class PlanTest(unittest.TestCase):
    def two_pockets(self) -> OccupancyGrid:
        cells = np.ones((6, 12), dtype=bool)
        cells[1:3, 1:3] = False
        cells[1:3, 8:10] = False
        return OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=cells)

    def test_single_pocket_plan(self) -> None:
        volume = ExerciseVolume(ellipse=Ellipse2D.from_axes((1.0, 1.0), 0.4, 0.3, 0.0), height=1.2)
        footprint = build_placement_footprint(volume, CameraSpec.from_degrees(90, 60, 1.0), (1.0, 0.0), tripod_radius=0.2)
        mask = rasterize(footprint, 0.1)
        cells = np.ones((mask.height + 6, mask.width + 10), dtype=bool)
        rows, cols = np.nonzero(mask.cells)
        cells[rows + 3, cols + 5] = False
        grid = OccupancyGrid(resolution=0.1, origin=(-2.0, 1.0), cells=cells)

        result = plan(grid, footprint, rotations=[0.0])

        self.assertEqual(result.best.position, (mask.anchor[0] + 5, mask.anchor[1] + 3))
        self.assertEqual(result.candidates_total, 1)
        self.assertEqual(result.alternatives, ())
        (px, py), patient_heading = result.patient_pose
        (cx, cy), camera_heading, mount_height = result.camera_pose
        self.assertEqual((px, py), grid.cell_corner(*result.best.position))
        self.assertAlmostEqual(math.hypot(px - cx, py - cy), footprint.standoff, delta=0.05)
        self.assertAlmostEqual(camera_heading, 0.0)
        self.assertAlmostEqual(abs(patient_heading), math.pi)
        self.assertEqual(mount_height, 1.0)

        payload = plan_to_dict(result)
        self.assertEqual(payload["position"], list(result.best.position))
        self.assertEqual(payload["candidates_total"], 1)

    def test_fully_occupied_grid_has_no_placement(self) -> None:
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=np.ones((10, 10), dtype=bool))
        with self.assertRaises(NoPlacement) as ctx:
            plan(grid, disc_footprint(0.14), rotations=[0.0])
        self.assertEqual(str(ctx.exception), "no placement found at any rotation")

    def test_equal_scores_prefer_lower_row_major_anchor(self) -> None:
        result = plan(self.two_pockets(), disc_footprint(0.14), rotations=[0.0])
        self.assertEqual(result.best.position, (2, 2))
        self.assertEqual([c.position for c in result.alternatives], [(9, 2)])
        self.assertEqual(result.best.score, result.alternatives[0].score)

    def test_user_position_breaks_score_ties(self) -> None:
        grid = self.two_pockets()
        result = plan(grid, disc_footprint(0.14), rotations=[0.0], user_position=grid.cell_corner(9, 2))
        self.assertEqual(result.best.position, (9, 2))

    def test_best_outscores_alternatives(self) -> None:
        cells = np.zeros((16, 16), dtype=bool)
        cells[0:3, :] = True
        grid = OccupancyGrid(resolution=0.1, origin=(0.0, 0.0), cells=cells)
        result = plan(grid, disc_footprint(0.14), rotations=default_rotations(4), cap=4, workers=2)
        self.assertTrue(all(result.best.score >= c.score for c in result.alternatives))
        self.assertTrue(all(0.0 <= c.score <= 4 for c in result.alternatives))
        self.assertLessEqual(len(result.alternatives), 20)

    def test_overlay_marks_the_best_placement(self) -> None:
        grid = self.two_pockets()
        result = plan(grid, disc_footprint(0.14), rotations=[0.0])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "out" / "overlay.pgm"
            render_overlay(grid, result, path)
            pixels = read_pgm(path)
        self.assertEqual(int((pixels == PGM_PLACEMENT).sum()), 4)
        self.assertTrue(np.all(pixels[1:3, 1:3] == PGM_PLACEMENT))


if __name__ == "__main__":
    unittest.main()
