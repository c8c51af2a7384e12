#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = PROJECT_ROOT / "src"
sys.path.insert(0, str(SRC_DIR))
sys.path.insert(0, str(PROJECT_ROOT / "scripts"))

from airs_rehab.cli import main as airs_main
from airs_rehab.config import configure_logging, load_config
from build_demo_fixture import DEMO_DIR, build

logger = logging.getLogger(__name__)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Run project -> footprint -> place -> navigate -> align -> prompt -> evaluate on the demo fixture."
    )
    parser.add_argument(
        "--output-dir",
        type=Path,
        default=PROJECT_ROOT / "output" / "demo",
        help="Directory for all pipeline artifacts.",
    )
    parser.add_argument("--demo-dir", type=Path, default=DEMO_DIR, help="Demo fixture directory.")
    parser.add_argument("--log-level", type=str, default="INFO", help="DEBUG/INFO/WARNING/ERROR")
    return parser.parse_args()


def run(demo_dir: Path, out: Path, log_level: str = "INFO") -> int:
    config_path = demo_dir / "airs.toml"
    config = load_config(config_path)
    replay_dirs = [Path(config.generator.replay_dir)] + [Path(judge.replay_dir) for judge in config.cross_judges]
    if not all(path.exists() for path in replay_dirs) or not (demo_dir / "embeddings.f32").exists():
        logger.info("Replay fixture missing, building it first")
        build(demo_dir, log_level)

    common = ["--config", str(config_path), "--log-level", log_level]
    stages = [
        ("project", [str(demo_dir / "room.csv"), "-o", str(out / "grid.pgm")]),
        ("footprint", [str(demo_dir / "clinic.jsonl"), "-o", str(out / "footprint.json")]),
        ("place", [str(out / "grid.pgm"), str(out / "footprint.json"), "-o", str(out / "plan.json"), "--overlay", str(out / "plan_overlay.pgm")]),
        (
            "navigate",
            [
                str(out / "grid.pgm"),
                str(out / "plan.json"),
                str(demo_dir / "poses.jsonl"),
                "-o",
                str(out / "instructions.json"),
                "--text-out",
                str(out / "instructions.txt"),
                "--labels",
                str(demo_dir / "labels.json"),
            ],
        ),
        ("align", [str(demo_dir / "clinic.jsonl"), str(demo_dir / "home.jsonl"), "-o", str(out / "alignment.json")]),
        (
            "prompt",
            [
                str(demo_dir / "squat_spec.json"),
                str(out / "alignment.json"),
                "-o",
                str(out / "bundles.json"),
                "--case-id",
                "squat-home-01",
            ],
        ),
        (
            "evaluate",
            [
                str(demo_dir / "ground_truth.json"),
                str(out / "bundles.json"),
                "-o",
                str(out / "report.json"),
                "--embeddings",
                str(demo_dir / "embeddings.f32"),
            ],
        ),
    ]
    for index, (name, args) in enumerate(stages, start=1):
        logger.info("Stage %s start: %s", index, name)
        code = airs_main(common + [name] + args)
        if code != 0:
            logger.error("Stage %s failed: %s exit_code=%s", index, name, code)
            return code
        logger.info("Stage %s done: %s", index, name)
    return 0


def main() -> None:
    args = parse_args()
    configure_logging(args.log_level)
    raise SystemExit(run(args.demo_dir, args.output_dir, args.log_level))


if __name__ == "__main__":
    main()
