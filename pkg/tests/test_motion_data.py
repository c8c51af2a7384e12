from __future__ import annotations

import json
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = PROJECT_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from airs_rehab.errors import MalformedRecord, NonMonotonicTimestamps, UnknownJointSet
from airs_rehab.motion_data import (
    SMPL24_JOINTS,
    JointSet,
    SkeletonFrame,
    SkeletonSequence,
    get_joint_set,
    load_sequence,
    max_height,
    register_joint_set,
    save_sequence,
)


def standing_joints(offset: float = 0.0) -> list[list[float]]:
    return [[0.01 * k + offset, 0.0, 0.05 * k + 0.1] for k in range(24)]


def write_jsonl(path: Path, header: dict, frames: list[dict]) -> None:
    rows = [json.dumps(header)] + [json.dumps(frame) for frame in frames]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


class LoadSequenceTest(unittest.TestCase):
    def test_loads_header_and_frames(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "clinic.jsonl"
            write_jsonl(
                path,
                {"joint_set": "smpl24", "units": "m", "frame": "z-up", "source_label": "clinic"},
                [{"t": 0.0, "joints": standing_joints()}, {"t": 0.1, "joints": standing_joints(0.02)}],
            )
            seq = load_sequence(path)

        self.assertEqual(len(seq), 2)
        self.assertEqual(seq.source_label, "clinic")
        self.assertEqual(seq.positions().shape, (2, 24, 3))
        self.assertEqual(seq.joint_index("left_knee"), SMPL24_JOINTS.index("left_knee"))
        np.testing.assert_allclose(seq.timestamps(), [0.0, 0.1])

    def test_explicit_source_label_wins(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "home.jsonl"
            write_jsonl(path, {"joint_set": "smpl24", "source_label": "x"}, [{"t": 0.0, "joints": standing_joints()}])
            seq = load_sequence(path, source_label="home")
        self.assertEqual(seq.source_label, "home")

    def test_wrong_joint_count_names_the_line(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            write_jsonl(
                path,
                {"joint_set": "smpl24"},
                [{"t": 0.0, "joints": standing_joints()}, {"t": 0.1, "joints": standing_joints()[:23]}],
            )
            with self.assertRaises(MalformedRecord) as ctx:
                load_sequence(path)
        self.assertIn(":3:", str(ctx.exception))
        self.assertIn("expected 24 joints", str(ctx.exception))

    def test_rejects_non_increasing_timestamps(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            write_jsonl(
                path,
                {"joint_set": "smpl24"},
                [{"t": 0.2, "joints": standing_joints()}, {"t": 0.2, "joints": standing_joints()}],
            )
            with self.assertRaises(NonMonotonicTimestamps):
                load_sequence(path)

    def test_rejects_unknown_joint_set_and_units(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            write_jsonl(path, {"joint_set": "coco17"}, [{"t": 0.0, "joints": standing_joints()}])
            with self.assertRaises(UnknownJointSet):
                load_sequence(path)
            write_jsonl(path, {"joint_set": "smpl24", "units": "cm"}, [{"t": 0.0, "joints": standing_joints()}])
            with self.assertRaises(MalformedRecord):
                load_sequence(path)

    def test_rejects_joint_below_floor_tolerance(self) -> None:
        joints = standing_joints()
        joints[7][2] = -0.5
        with self.assertRaises(MalformedRecord):
            SkeletonFrame(t=0.0, joints=joints)
        joints[7][2] = -0.15
        SkeletonFrame(t=0.0, joints=joints)

    def test_rejects_non_json_line(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            path.write_text('{"joint_set": "smpl24"}\nnot json\n', encoding="utf-8")
            with self.assertRaises(MalformedRecord):
                load_sequence(path)


class SequenceHelpersTest(unittest.TestCase):
    def test_save_then_load_keeps_frames(self) -> None:
        joint_set = get_joint_set("smpl24")
        seq = SkeletonSequence(
            joint_set=joint_set,
            frames=(SkeletonFrame(0.0, standing_joints()), SkeletonFrame(0.5, standing_joints(0.1))),
            source_label="clinic",
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "seq.jsonl"
            save_sequence(seq, path)
            loaded = load_sequence(path)
        np.testing.assert_allclose(loaded.positions(), seq.positions())
        self.assertEqual(loaded.source_label, "clinic")

    def test_max_height_is_highest_joint(self) -> None:
        frames = (SkeletonFrame(0.0, standing_joints()), SkeletonFrame(1.0, standing_joints()))
        seq = SkeletonSequence(joint_set=get_joint_set("smpl24"), frames=frames)
        self.assertAlmostEqual(max_height(seq), 0.05 * 23 + 0.1)

    def test_registered_joint_set_is_resolvable(self) -> None:
        names = tuple(f"j{k}" for k in range(15))
        register_joint_set(JointSet("test15", names))
        self.assertEqual(get_joint_set("TEST15").count, 15)

    def test_joint_set_needs_fifteen_unique_joints(self) -> None:
        with self.assertRaises(ValueError):
            JointSet("tiny", ("a", "b", "c"))
        with self.assertRaises(ValueError):
            JointSet("dupes", tuple(["a"] * 15))


if __name__ == "__main__":
    unittest.main()
