from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from .config import PipelineConfig, configure_logging, load_config
from .errors import EXIT_VALIDATION, AirsError, MalformedRecord, ReplayMiss

logger = logging.getLogger(__name__)

STDOUT = "-"


def write_json(payload: Any, out: str | Path) -> None:
    """Stable JSON: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if str(out) == STDOUT:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def write_lines(lines: Sequence[str], out: str | Path) -> None:
    text = "".join(f"{line}\n" for line in lines)
    if str(out) == STDOUT:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}: invalid JSON ({exc.msg}).") from exc


def _override(section: Any, **values: Any) -> Any:
    changes = {key: value for key, value in values.items() if value is not None}
    return replace(section, **changes) if changes else section


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_project(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .env_model import grid_to_dict, load_point_cloud, project_occupancy, save_grid

    settings = _override(
        config.grid, resolution=args.resolution, min_hits=args.min_hits, z_min=args.z_min, z_max=args.z_max
    )
    cloud = load_point_cloud(args.cloud)
    logger.info("Project start: cloud=%s points=%s resolution=%s", args.cloud, len(cloud), settings.resolution)
    grid = project_occupancy(cloud, settings.resolution, settings.z_band, settings.min_hits)
    if args.out == STDOUT:
        write_json(grid_to_dict(grid), STDOUT)
    else:
        save_grid(grid, Path(args.out))
    logger.info(
        "Project done: grid=%sx%s occupied=%s out=%s", grid.width, grid.height, int(grid.cells.sum()), args.out
    )
    return 0


def cmd_footprint(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .footprint import build_placement_footprint, exercise_volume, footprint_to_dict
    from .motion_data import load_sequence

    settings = _override(config.footprint, margin=args.margin, tripod_radius=args.tripod_radius)
    camera = _override(config.camera, hfov_deg=args.hfov, vfov_deg=args.vfov, mount_height=args.mount_height)
    sequences = [load_sequence(path) for path in args.sequences]
    volume = exercise_volume(sequences, settings.margin, tol=settings.tol, max_iter=settings.max_iter)
    footprint = build_placement_footprint(
        volume,
        camera.spec(),
        view_direction=settings.view_direction,
        tripod_radius=settings.tripod_radius,
        margin=settings.margin,
    )
    write_json(footprint_to_dict(footprint), args.out)
    logger.info(
        "Footprint done: sequences=%s semi_axes=(%.3f, %.3f) height=%.3f standoff=%.3f",
        len(sequences),
        *footprint.exercise_region.semi_axes,
        footprint.height,
        footprint.standoff,
    )
    return 0


def cmd_place(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .env_model import load_grid
    from .footprint import footprint_from_dict
    from .placement import default_rotations, plan, plan_to_dict, render_overlay

    settings = _override(config.placement, rotation_count=args.rotations, workers=args.workers)
    grid = load_grid(args.grid)
    footprint = footprint_from_dict(read_json(args.footprint))
    user_position = (args.user_x, args.user_y) if args.user_x is not None and args.user_y is not None else None
    result = plan(
        grid,
        footprint,
        default_rotations(settings.rotation_count),
        user_position=user_position,
        cap=settings.score_cap,
        max_alternatives=settings.max_alternatives,
        workers=settings.workers,
    )
    write_json(plan_to_dict(result), args.out)
    if args.overlay:
        render_overlay(grid, result, Path(args.overlay))
    return 0


def cmd_navigate(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .env_model import load_grid, load_label_map
    from .navigation import inflate, load_pose_stream, replan, replay_instructions

    settings = _override(config.navigation, inflation_radius=args.inflation_radius)
    grid = load_grid(args.grid)
    labels = load_label_map(args.labels, grid) if args.labels else None
    plan_payload = read_json(args.plan)
    try:
        goal = (float(plan_payload["patient_pose"]["x"]), float(plan_payload["patient_pose"]["y"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{args.plan}: plan needs patient_pose.x and patient_pose.y.") from exc
    walkable = inflate(grid, settings.inflation_radius)

    requests_out: list[dict[str, Any]] = []
    text_lines: list[str] = []
    for t, pose in load_pose_stream(args.poses):
        steps = replan(walkable, pose, goal, labels)
        end = replay_instructions(pose, steps)
        requests_out.append(
            {
                "t": t,
                "pose": {"x": pose.position[0], "y": pose.position[1], "heading": pose.heading},
                "instructions": [step.to_dict() for step in steps],
                "predicted_end": {"x": end.position[0], "y": end.position[1]},
                "goal_error": math.hypot(end.position[0] - goal[0], end.position[1] - goal[1]),
            }
        )
        if text_lines:
            text_lines.append("")
        text_lines.extend(step.text for step in steps)
    write_json(
        {"goal": {"x": goal[0], "y": goal[1]}, "inflation_radius": settings.inflation_radius, "requests": requests_out},
        args.out,
    )
    if args.text_out:
        write_lines(text_lines, args.text_out)
    return 0


def cmd_align(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .alignment import align_sequences, alignment_to_dict, export_deviations
    from .motion_data import load_sequence

    settings = _override(
        config.alignment, frame_metric=args.frame_metric, deviation_metric=args.deviation_metric, band=args.band
    )
    ref = load_sequence(args.reference)
    query = load_sequence(args.query)
    result = align_sequences(
        ref,
        query,
        triples=settings.angle_triples(),
        frame_metric=settings.frame_metric,
        deviation_metric=settings.deviation_metric,
        band=settings.band_or_none,
    )
    write_json(alignment_to_dict(result), args.out)
    if args.table:
        export_deviations(result, Path(args.table))
    return 0


def cmd_prompt(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .alignment import worst_frames_from_dict
    from .prompts import PromptSet, ablation_grid, build_prompt, load_exercise_specs

    specs = load_exercise_specs(args.spec)
    if args.exercise is None:
        if len(specs) != 1:
            raise MalformedRecord(f"{args.spec} holds {len(specs)} exercises; choose one with --exercise.")
        spec = next(iter(specs.values()))
    elif args.exercise in specs:
        spec = specs[args.exercise]
    else:
        raise MalformedRecord(f"Exercise '{args.exercise}' is not in {args.spec}.")

    report = read_json(args.alignment)
    ref_frame, query_frame, _ = worst_frames_from_dict(report)
    worst = report["worst"]
    image_refs = (
        f"{args.reference_images}:frame={int(worst['ref_index'])}",
        f"{args.query_images}:frame={int(worst['query_index'])}",
    )
    prompt_set = PromptSet(exercise_id=spec.id)
    for prompt_config in ablation_grid():
        uses_skeleton = prompt_config.input_mode.uses_skeleton
        prompt_set.bundles[prompt_config.key] = build_prompt(
            spec,
            prompt_config,
            ref_frame=ref_frame if uses_skeleton else None,
            query_frame=query_frame if uses_skeleton else None,
            image_refs=image_refs if prompt_config.input_mode.uses_images else (),
            templates=config.prompts,
        )
    payload = prompt_set.to_dict()
    payload["case_id"] = args.case_id or spec.id
    write_json(payload, args.out)
    logger.info("Prompt done: exercise=%s bundles=%s", spec.id, len(prompt_set.bundles))
    return 0


class StoredResponses:
    """Generator stand-in answering from a {bundle hash: response} file."""

    def __init__(self, responses: dict[str, str]) -> None:
        self.responses = responses

    def complete(self, bundle: Any) -> str:
        content_hash = bundle.content_hash()
        if content_hash not in self.responses:
            raise ReplayMiss(content_hash)
        return self.responses[content_hash]


def cmd_evaluate(args: argparse.Namespace, config: PipelineConfig) -> int:
    from .evaluation import (
        build_report,
        export_rows,
        load_cases,
        load_embeddings,
        review_agreement,
        run_cross_judges,
        run_evaluation,
        select_evaluation_cases,
    )
    from .prompts import bundle_from_dict

    settings = _override(config.evaluation, case_count=args.cases)
    cases = select_evaluation_cases(load_cases(args.ground_truth), settings.case_count)
    cases_by_id = {case.id: case for case in cases}

    items = []
    for bundles_path in args.bundles:
        payload = read_json(bundles_path)
        case = cases_by_id.get(str(payload.get("case_id", payload.get("exercise_id", ""))))
        if case is None:
            logger.info("Skipping %s: its case is not among the selected cases", bundles_path)
            continue
        for record in payload.get("bundles", []):
            items.append((case, bundle_from_dict(record["bundle"])))

    generator: Any = config.generator
    if args.responses:
        generator = StoredResponses({str(k): str(v) for k, v in read_json(args.responses).items()})
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None
    rows = run_evaluation(
        items,
        generator,
        config.judge,
        templates=config.prompts,
        embeddings=embeddings,
        max_in_flight=min(config.generator.max_in_flight, config.judge.max_in_flight),
    )
    review = None
    if settings.review_total > 0:
        review = review_agreement(
            settings.review_total, settings.review_agreed, settings.review_consensus, settings.review_undetected
        )
    cross_judge = None
    if config.cross_judges:
        cross_judge = run_cross_judges(
            rows,
            {judge.model: judge for judge in config.cross_judges},
            primary_model=config.judge.model,
            templates=config.prompts,
            max_in_flight=min(judge.max_in_flight for judge in config.cross_judges),
        )
    write_json(build_report(rows, review=review, cross_judge=cross_judge), args.out)
    if args.table:
        export_rows(rows, Path(args.table))
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airs",
        description="Home rehabilitation pipeline: room map, exercise placement, guidance and exercise feedback.",
    )
    parser.add_argument("--config", type=Path, default=None, help="TOML config file; flags override its values.")
    parser.add_argument("--log-level", type=str, default="INFO", help="DEBUG/INFO/WARNING/ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    project = sub.add_parser("project", help="Point cloud to top-down occupancy grid.")
    project.add_argument("cloud", type=Path, help="ASCII PLY or x,y,z CSV/XYZ point cloud.")
    project.add_argument("-o", "--out", required=True, help="Grid output (.pgm with .json sidecar, or .json; - for stdout).")
    project.add_argument("--resolution", type=float, default=None, help="Meters per cell.")
    project.add_argument("--min-hits", type=int, default=None, help="Points needed to mark a cell occupied.")
    project.add_argument("--z-min", type=float, default=None, help="Lower bound of the obstacle height band.")
    project.add_argument("--z-max", type=float, default=None, help="Upper bound of the obstacle height band.")
    project.set_defaults(handler=cmd_project)

    footprint = sub.add_parser("footprint", help="Exercise volume and camera standoff from recordings.")
    footprint.add_argument("sequences", type=Path, nargs="+", help="Skeleton sequence JSONL files.")
    footprint.add_argument("-o", "--out", required=True, help="Footprint JSON (- for stdout).")
    footprint.add_argument("--margin", type=float, default=None, help="Safety margin in meters.")
    footprint.add_argument("--tripod-radius", type=float, default=None, help="Tripod disc radius in meters.")
    footprint.add_argument("--hfov", type=float, default=None, help="Camera horizontal field of view, degrees.")
    footprint.add_argument("--vfov", type=float, default=None, help="Camera vertical field of view, degrees.")
    footprint.add_argument("--mount-height", type=float, default=None, help="Camera mount height in meters.")
    footprint.set_defaults(handler=cmd_footprint)

    place = sub.add_parser("place", help="Find and rank collision-free placements.")
    place.add_argument("grid", type=Path, help="Occupancy grid (.pgm or .json).")
    place.add_argument("footprint", type=Path, help="Footprint JSON.")
    place.add_argument("-o", "--out", required=True, help="Placement plan JSON (- for stdout).")
    place.add_argument("--rotations", type=int, default=None, help="Number of evenly spaced rotations.")
    place.add_argument("--workers", type=int, default=None, help="Search threads.")
    place.add_argument("--user-x", type=float, default=None, help="Current user x, for tie-breaking.")
    place.add_argument("--user-y", type=float, default=None, help="Current user y, for tie-breaking.")
    place.add_argument("--overlay", type=Path, default=None, help="Optional debug PGM of the best placement.")
    place.set_defaults(handler=cmd_place)

    navigate = sub.add_parser("navigate", help="Instructions to the placement for each pose in a stream.")
    navigate.add_argument("grid", type=Path, help="Occupancy grid (.pgm or .json).")
    navigate.add_argument("plan", type=Path, help="Placement plan JSON.")
    navigate.add_argument("poses", type=Path, help="Pose stream JSONL of {t, x, y, heading}.")
    navigate.add_argument("-o", "--out", required=True, help="Instructions JSON (- for stdout).")
    navigate.add_argument("--text-out", type=Path, default=None, help="Plain-text instructions, one per line.")
    navigate.add_argument("--labels", type=Path, default=None, help="Optional semantic label map JSON.")
    navigate.add_argument("--inflation-radius", type=float, default=None, help="Person clearance in meters.")
    navigate.set_defaults(handler=cmd_navigate)

    align = sub.add_parser("align", help="DTW alignment and worst-frame selection.")
    align.add_argument("reference", type=Path, help="Clinic reference sequence JSONL.")
    align.add_argument("query", type=Path, help="Home recording sequence JSONL.")
    align.add_argument("-o", "--out", required=True, help="Alignment report JSON (- for stdout).")
    align.add_argument("--frame-metric", choices=["L2", "L1"], default=None)
    align.add_argument("--deviation-metric", choices=["MSE", "MAE"], default=None)
    align.add_argument("--band", type=int, default=None, help="Sakoe-Chiba band in frames; 0 disables it.")
    align.add_argument("--table", type=Path, default=None, help="Per-pair deviation table (.csv or .parquet).")
    align.set_defaults(handler=cmd_align)

    prompt = sub.add_parser("prompt", help="Prompt bundles for the 12 ablation configurations.")
    prompt.add_argument("spec", type=Path, help="Exercise spec JSON.")
    prompt.add_argument("alignment", type=Path, help="Alignment report JSON.")
    prompt.add_argument("-o", "--out", required=True, help="Bundle set JSON (- for stdout).")
    prompt.add_argument("--exercise", default=None, help="Exercise id when the spec file holds several.")
    prompt.add_argument("--case-id", default=None, help="Evaluation case id; defaults to the exercise id.")
    prompt.add_argument("--reference-images", default="clinic", help="Frame reference prefix of the clinic video.")
    prompt.add_argument("--query-images", default="home", help="Frame reference prefix of the home video.")
    prompt.set_defaults(handler=cmd_prompt)

    evaluate = sub.add_parser("evaluate", help="Semantic-match accuracy and embedding similarity report.")
    evaluate.add_argument("ground_truth", type=Path, help="Evaluation cases JSON with ground-truth corrections.")
    evaluate.add_argument("bundles", type=Path, nargs="+", help="Bundle set JSON files from `prompt`.")
    evaluate.add_argument("-o", "--out", required=True, help="Report JSON (- for stdout).")
    evaluate.add_argument("--responses", type=Path, default=None, help="Precomputed {bundle hash: response} JSON.")
    evaluate.add_argument("--embeddings", type=Path, default=None, help="float32 embeddings with a .json sidecar.")
    evaluate.add_argument("--cases", type=int, default=None, help="Number of evaluation cases to select.")
    evaluate.add_argument("--table", type=Path, default=None, help="Per-row table (.csv or .parquet).")
    evaluate.set_defaults(handler=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = load_config(args.config)
        return int(args.handler(args, config))
    except AirsError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        logger.error("Input file not found: %s", exc.filename or exc)
        return EXIT_VALIDATION
