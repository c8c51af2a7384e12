from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import MalformedRecord, NonMonotonicTimestamps, UnknownJointSet, ValidationError

logger = logging.getLogger(__name__)

FLOOR_TOLERANCE_M = -0.2
MIN_JOINT_COUNT = 15

SMPL24_JOINTS = (
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
)


@dataclass(frozen=True)
class JointSet:
    name: str
    joint_names: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if len(set(self.joint_names)) != len(self.joint_names):
            raise ValidationError(f"Joint set '{self.name}' has duplicate joint names.")
        if len(self.joint_names) < MIN_JOINT_COUNT:
            raise ValidationError(
                f"Joint set '{self.name}' needs at least {MIN_JOINT_COUNT} joints, "
                f"got {len(self.joint_names)}."
            )

    @property
    def count(self) -> int:
        return len(self.joint_names)

    def index(self, joint_name: str) -> int:
        try:
            return self.joint_names.index(joint_name)
        except ValueError:
            raise KeyError(joint_name) from None


_JOINT_SETS: dict[str, JointSet] = {"smpl24": JointSet("smpl24", SMPL24_JOINTS)}


def register_joint_set(joint_set: JointSet) -> None:
    _JOINT_SETS[joint_set.name] = joint_set


def get_joint_set(name: str) -> JointSet:
    joint_set = _JOINT_SETS.get(str(name or "").strip().lower())
    if joint_set is None:
        supported = ", ".join(sorted(_JOINT_SETS))
        raise UnknownJointSet(f"Unknown joint set '{name}'. Supported: {supported}")
    return joint_set


@dataclass(frozen=True)
class SkeletonFrame:
    """One time-stamped pose; joints are (J, 3) meters, z-up, floor at z=0."""

    t: float
    joints: np.ndarray

    def __post_init__(self) -> None:
        joints = np.array(self.joints, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise MalformedRecord(f"Frame t={self.t}: joints must be a list of [x, y, z] points.")
        if not np.all(np.isfinite(joints)):
            raise MalformedRecord(f"Frame t={self.t}: non-finite joint coordinate.")
        if not np.isfinite(self.t) or self.t < 0:
            raise MalformedRecord(f"Frame timestamp must be finite and non-negative, got {self.t}.")
        if joints.size and float(joints[:, 2].min()) < FLOOR_TOLERANCE_M:
            raise MalformedRecord(
                f"Frame t={self.t}: lowest joint z={joints[:, 2].min():.3f} m is below the floor tolerance."
            )
        joints.setflags(write=False)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "joints", joints)


@dataclass(frozen=True)
class SkeletonSequence:
    joint_set: JointSet
    frames: tuple[SkeletonFrame, ...]
    source_label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise MalformedRecord("Skeleton sequence has no frames.")
        for index, frame in enumerate(self.frames):
            if frame.joints.shape[0] != self.joint_set.count:
                raise MalformedRecord(
                    f"Frame {index}: expected {self.joint_set.count} joints, got {frame.joints.shape[0]}."
                )
            if index and frame.t <= self.frames[index - 1].t:
                raise NonMonotonicTimestamps(
                    f"Frame {index}: timestamp {frame.t} does not follow {self.frames[index - 1].t}."
                )

    def __len__(self) -> int:
        return len(self.frames)

    def positions(self) -> np.ndarray:
        return np.stack([frame.joints for frame in self.frames])

    def timestamps(self) -> np.ndarray:
        return np.array([frame.t for frame in self.frames], dtype=np.float64)

    def joint_index(self, joint_name: str) -> int:
        return self.joint_set.index(joint_name)


def load_sequence(path: Path, source_label: str | None = None) -> SkeletonSequence:
    path = Path(path)
    lines = [
        (number, line)
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)
        if line.strip()
    ]
    if not lines:
        raise MalformedRecord(f"{path}: empty file, expected a header record.")

    header_number, header_line = lines[0]
    header = _parse_record(path, header_number, header_line)
    if "joint_set" not in header:
        raise MalformedRecord(f"{path}:{header_number}: header must name the joint set.")
    joint_set = get_joint_set(str(header["joint_set"]))
    units = str(header.get("units", "m"))
    if units != "m":
        raise MalformedRecord(f"{path}:{header_number}: unsupported units '{units}', expected 'm'.")
    axis = str(header.get("frame", "z-up"))
    if axis != "z-up":
        raise MalformedRecord(f"{path}:{header_number}: unsupported frame '{axis}', expected 'z-up'.")

    frames: list[SkeletonFrame] = []
    previous_t: float | None = None
    for number, line in lines[1:]:
        record = _parse_record(path, number, line)
        try:
            t = float(record["t"])
            joints = np.asarray(record["joints"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecord(f"{path}:{number}: record needs numeric 't' and 'joints'.") from exc
        if joints.ndim != 2 or joints.shape[1] != 3 or joints.shape[0] != joint_set.count:
            got = joints.shape[0] if joints.ndim >= 1 else 0
            raise MalformedRecord(
                f"{path}:{number}: expected {joint_set.count} joints of [x, y, z], got {got}."
            )
        if previous_t is not None and t <= previous_t:
            raise NonMonotonicTimestamps(f"{path}:{number}: timestamp {t} does not follow {previous_t}.")
        try:
            frames.append(SkeletonFrame(t=t, joints=joints))
        except MalformedRecord as exc:
            raise MalformedRecord(f"{path}:{number}: {exc}") from exc
        previous_t = t

    label = source_label if source_label is not None else str(header.get("source_label", ""))
    sequence = SkeletonSequence(joint_set=joint_set, frames=tuple(frames), source_label=label)
    logger.debug("Loaded %s frames from %s (joint_set=%s)", len(frames), path, joint_set.name)
    return sequence


def save_sequence(seq: SkeletonSequence, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header: dict[str, Any] = {"joint_set": seq.joint_set.name, "units": "m", "frame": "z-up"}
    if seq.source_label:
        header["source_label"] = seq.source_label
    rows = [json.dumps(header)]
    for frame in seq.frames:
        joints = [[float(value) for value in joint] for joint in frame.joints]
        rows.append(json.dumps({"t": frame.t, "joints": joints}))
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def max_height(seq: SkeletonSequence) -> float:
    """Highest joint z over the whole sequence, the vertical space the exercise needs."""
    return float(seq.positions()[:, :, 2].max())


def _parse_record(path: Path, number: int, line: str) -> dict[str, Any]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}:{number}: invalid JSON ({exc.msg}).") from exc
    if not isinstance(record, dict):
        raise MalformedRecord(f"{path}:{number}: record must be a JSON object.")
    return record
