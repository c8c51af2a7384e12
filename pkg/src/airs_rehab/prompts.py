from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import MalformedRecord, MissingInput
from .motion_data import JointSet, SkeletonFrame, get_joint_set

logger = logging.getLogger(__name__)

MIN_EXPECTED_ERRORS = 3
MAX_EXPECTED_ERRORS = 10
MAX_IMAGE_REFS = 2


@dataclass(frozen=True)
class ErrorType:
    code: str
    description: str


@dataclass(frozen=True)
class BodyRegion:
    label: str
    joints: tuple[str, ...]


@dataclass(frozen=True)
class ExerciseSpec:
    id: str
    description: str
    error_list: tuple[ErrorType, ...] = ()
    body_regions: tuple[BodyRegion, ...] = ()

    def __post_init__(self) -> None:
        codes = [error.code for error in self.error_list]
        if len(set(codes)) != len(codes):
            raise MalformedRecord(f"Exercise '{self.id}' repeats an error code.")
        if not MIN_EXPECTED_ERRORS <= len(codes) <= MAX_EXPECTED_ERRORS:
            logger.warning(
                "Exercise %s lists %s errors, expected between %s and %s",
                self.id,
                len(codes),
                MIN_EXPECTED_ERRORS,
                MAX_EXPECTED_ERRORS,
            )


def _spec_from_dict(payload: dict[str, Any]) -> ExerciseSpec:
    try:
        return ExerciseSpec(
            id=str(payload["id"]),
            description=str(payload["description"]),
            error_list=tuple(
                ErrorType(code=str(item["code"]), description=str(item["description"]))
                for item in payload.get("error_list", [])
            ),
            body_regions=tuple(
                BodyRegion(label=str(item["label"]), joints=tuple(str(name) for name in item.get("joints", [])))
                for item in payload.get("body_regions", [])
            ),
        )
    except (KeyError, TypeError) as exc:
        raise MalformedRecord(f"Exercise spec is missing field {exc}.") from exc


def load_exercise_specs(path: Path) -> dict[str, ExerciseSpec]:
    """Reads one spec object, a list of them, or {"exercises": [...]}."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}: invalid JSON ({exc.msg}).") from exc
    if isinstance(payload, dict) and "exercises" in payload:
        payload = payload["exercises"]
    records = payload if isinstance(payload, list) else [payload]
    specs: dict[str, ExerciseSpec] = {}
    for record in records:
        if not isinstance(record, dict):
            raise MalformedRecord(f"{path}: every exercise spec must be a JSON object.")
        spec = _spec_from_dict(record)
        if spec.id in specs:
            raise MalformedRecord(f"{path}: duplicate exercise id '{spec.id}'.")
        specs[spec.id] = spec
    return specs


class InputMode(str, Enum):
    IMAGE = "image"
    SKELETON = "skeleton"
    IMAGE_SKELETON = "image+skeleton"

    @property
    def uses_images(self) -> bool:
        return self is not InputMode.SKELETON

    @property
    def uses_skeleton(self) -> bool:
        return self is not InputMode.IMAGE


@dataclass(frozen=True)
class PromptConfig:
    input_mode: InputMode
    use_error_list: bool = False
    use_body_regions: bool = False

    @property
    def hint_label(self) -> str:
        parts = [name for flag, name in ((self.use_error_list, "EL"), (self.use_body_regions, "BL")) if flag]
        return "+".join(parts) or "none"

    @property
    def key(self) -> str:
        return f"{self.input_mode.value}/{self.hint_label}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_mode": self.input_mode.value,
            "use_error_list": self.use_error_list,
            "use_body_regions": self.use_body_regions,
        }


HINT_COLUMNS: tuple[tuple[bool, bool], ...] = ((False, False), (True, False), (False, True), (True, True))


def ablation_grid() -> list[PromptConfig]:
    """The 12 configurations, row by input mode then column by hint blocks."""
    return [
        PromptConfig(input_mode=mode, use_error_list=el, use_body_regions=bl)
        for mode in InputMode
        for el, bl in HINT_COLUMNS
    ]


@dataclass(frozen=True)
class PromptTemplates:
    system_preamble: str = (
        "You are a physiotherapy assistant reviewing a home rehabilitation exercise. "
        "Compare the patient's execution with the clinic reference and give one short correction instruction."
    )
    exercise_header: str = "Exercise {id}: {description}"
    error_list_header: str = "Typical errors for this exercise:"
    body_region_header: str = "Body regions to inspect:"
    reference_header: str = "Reference skeleton (t={t:.3f} s), joint: x y z in meters:"
    query_header: str = "Patient skeleton (t={t:.3f} s), joint: x y z in meters:"
    image_note: str = "The first image shows the reference execution, the second the patient's execution."
    cot_trigger: str = "Let's think step by step."
    output_format: str = (
        "Answer with a single correction instruction addressed to the patient, "
        "written on one line that starts with 'Correction:'."
    )
    judge_instruction: str = (
        "Do the following two correction instructions for a rehabilitation exercise have the same meaning? "
        "Start your answer with YES or NO."
    )

    def to_dict(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


DEFAULT_TEMPLATES = PromptTemplates()


@dataclass(frozen=True)
class PromptSegment:
    role: str
    text: str


@dataclass(frozen=True)
class PromptBundle:
    segments: tuple[PromptSegment, ...]
    image_refs: tuple[str, ...] = ()
    config: PromptConfig | None = None
    exercise_id: str = ""
    purpose: str = "correction"

    def to_dict(self) -> dict[str, Any]:
        return {
            "purpose": self.purpose,
            "exercise_id": self.exercise_id,
            "config": self.config.to_dict() if self.config else None,
            "image_refs": list(self.image_refs),
            "segments": [{"role": segment.role, "text": segment.text} for segment in self.segments],
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def bundle_from_dict(payload: dict[str, Any]) -> PromptBundle:
    try:
        config_payload = payload.get("config")
        config = (
            PromptConfig(
                input_mode=InputMode(config_payload["input_mode"]),
                use_error_list=bool(config_payload["use_error_list"]),
                use_body_regions=bool(config_payload["use_body_regions"]),
            )
            if config_payload
            else None
        )
        return PromptBundle(
            segments=tuple(PromptSegment(role=str(s["role"]), text=str(s["text"])) for s in payload["segments"]),
            image_refs=tuple(str(ref) for ref in payload.get("image_refs", [])),
            config=config,
            exercise_id=str(payload.get("exercise_id", "")),
            purpose=str(payload.get("purpose", "correction")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"Invalid prompt bundle ({exc}).") from exc


def _coordinate(value: float) -> str:
    # rounding first keeps -0.0004 from rendering as "-0.000"
    return f"{round(float(value), 3) + 0.0:.3f}"


def serialize_skeleton(frame: SkeletonFrame, joint_set: JointSet) -> list[str]:
    joints = np.asarray(frame.joints)
    if joints.shape[0] != joint_set.count:
        raise MissingInput(f"Frame has {joints.shape[0]} joints, joint set '{joint_set.name}' has {joint_set.count}.")
    return [
        f"{name}: {_coordinate(x)} {_coordinate(y)} {_coordinate(z)}"
        for name, (x, y, z) in zip(joint_set.joint_names, joints)
    ]


def build_prompt(
    spec: ExerciseSpec,
    config: PromptConfig,
    ref_frame: SkeletonFrame | None = None,
    query_frame: SkeletonFrame | None = None,
    image_refs: Sequence[str] = (),
    templates: PromptTemplates = DEFAULT_TEMPLATES,
    joint_set: JointSet | None = None,
) -> PromptBundle:
    images = tuple(str(ref) for ref in image_refs)
    has_frames = ref_frame is not None and query_frame is not None
    if config.input_mode.uses_skeleton and not has_frames:
        raise MissingInput(f"{config.key}: skeleton mode needs both reference and query frames.")
    if not config.input_mode.uses_skeleton and (ref_frame is not None or query_frame is not None):
        raise MissingInput(f"{config.key}: frames given but the input mode has no skeleton.")
    if config.input_mode.uses_images and not images:
        raise MissingInput(f"{config.key}: image mode needs at least one image reference.")
    if not config.input_mode.uses_images and images:
        raise MissingInput(f"{config.key}: image references given but the input mode has no images.")
    if len(images) > MAX_IMAGE_REFS:
        raise MissingInput(f"{config.key}: at most {MAX_IMAGE_REFS} image references, got {len(images)}.")

    segments = [
        PromptSegment("system", templates.system_preamble),
        PromptSegment("user", templates.exercise_header.format(id=spec.id, description=spec.description)),
    ]
    if config.use_error_list:
        lines = [templates.error_list_header]
        lines += [f"- {error.code}: {error.description}" for error in spec.error_list]
        segments.append(PromptSegment("user", "\n".join(lines)))
    if config.use_body_regions:
        lines = [templates.body_region_header]
        lines += [f"- {region.label}: {', '.join(region.joints)}" for region in spec.body_regions]
        segments.append(PromptSegment("user", "\n".join(lines)))
    if config.input_mode.uses_skeleton:
        skeleton = joint_set or get_joint_set("smpl24")
        for header, frame in ((templates.reference_header, ref_frame), (templates.query_header, query_frame)):
            lines = [header.format(t=frame.t)] + serialize_skeleton(frame, skeleton)
            segments.append(PromptSegment("user", "\n".join(lines)))
    if config.input_mode.uses_images:
        segments.append(PromptSegment("user", templates.image_note))
    segments.append(PromptSegment("user", templates.cot_trigger))
    segments.append(PromptSegment("user", templates.output_format))

    bundle = PromptBundle(
        segments=tuple(segments),
        image_refs=images,
        config=config,
        exercise_id=spec.id,
    )
    logger.debug("Prompt built: exercise=%s config=%s hash=%s", spec.id, config.key, bundle.content_hash())
    return bundle


def build_judge_prompt(
    generated: str,
    ground_truth: str,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> PromptBundle:
    if not generated.strip() or not ground_truth.strip():
        raise MissingInput("Both the generated and the ground-truth correction must be non-empty.")
    text = "\n".join(
        [
            templates.judge_instruction,
            f"Instruction A: {generated.strip()}",
            f"Instruction B: {ground_truth.strip()}",
        ]
    )
    return PromptBundle(segments=(PromptSegment("user", text),), purpose="judge")


@dataclass
class PromptSet:
    """All bundles built for one exercise, keyed by configuration."""

    exercise_id: str
    bundles: dict[str, PromptBundle] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "exercise_id": self.exercise_id,
            "bundles": [
                {"key": key, "hash": bundle.content_hash(), "bundle": bundle.to_dict()}
                for key, bundle in self.bundles.items()
            ],
        }
