#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = PROJECT_ROOT / "src"
sys.path.insert(0, str(SRC_DIR))

from airs_rehab.cli import main as airs_main
from airs_rehab.client import write_replay
from airs_rehab.config import configure_logging, load_config
from airs_rehab.evaluation import EmbeddingVector, extract_correction, load_cases, save_embeddings
from airs_rehab.prompts import PromptConfig, bundle_from_dict, build_judge_prompt

logger = logging.getLogger(__name__)

DEMO_DIR = PROJECT_ROOT / "samples" / "demo"
EMBEDDING_DIM = 64
MATCHING_RESPONSE = "The knees drift towards each other at the bottom.\nCorrection: Keep your knees over your toes and do not let them fall inwards."
OTHER_RESPONSE = "The movement looks slightly shallow.\nCorrection: Bend your knees a little deeper."


def canned_match(config: PromptConfig) -> bool:
    """Error-list prompts always find the valgus; body-region hints help only with skeleton input."""
    return config.use_error_list or (config.use_body_regions and config.input_mode.uses_skeleton)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Seed the demo replay directory and embeddings.")
    parser.add_argument("--demo-dir", type=Path, default=DEMO_DIR, help="Demo fixture directory.")
    parser.add_argument("--log-level", type=str, default="INFO", help="DEBUG/INFO/WARNING/ERROR")
    return parser.parse_args()


def build(demo_dir: Path = DEMO_DIR, log_level: str = "INFO") -> None:
    config_path = demo_dir / "airs.toml"
    config = load_config(config_path)
    cases = load_cases(demo_dir / "ground_truth.json")
    truth = {case.id: case.ground_truth for case in cases}
    replay_dir = Path(config.generator.replay_dir)

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp)
        common = ["--config", str(config_path), "--log-level", log_level]
        steps = [
            ["align", str(demo_dir / "clinic.jsonl"), str(demo_dir / "home.jsonl"), "-o", str(work / "alignment.json")],
            [
                "prompt",
                str(demo_dir / "squat_spec.json"),
                str(work / "alignment.json"),
                "-o",
                str(work / "bundles.json"),
                "--case-id",
                cases[0].id,
            ],
        ]
        for step in steps:
            code = airs_main(common + step)
            if code != 0:
                raise SystemExit(f"Fixture step {step[0]} failed with exit code {code}")
        payload = json.loads((work / "bundles.json").read_text(encoding="utf-8"))

    rng = np.random.default_rng(7)
    vectors: list[EmbeddingVector] = []
    ground_truth = truth[payload["case_id"]]
    for record in payload["bundles"]:
        bundle = bundle_from_dict(record["bundle"])
        matched = canned_match(bundle.config)
        response = MATCHING_RESPONSE if matched else OTHER_RESPONSE
        write_replay(replay_dir, bundle, response)
        judge_bundle = build_judge_prompt(extract_correction(response), ground_truth, config.prompts)
        write_replay(replay_dir, judge_bundle, "YES" if matched else "NO, the corrections differ.")
        for cross in config.cross_judges:
            # the lenient second judge accepts any knee or depth advice
            write_replay(Path(cross.replay_dir), judge_bundle, "Yes, close enough.")

        target = rng.normal(size=EMBEDDING_DIM)
        noise = rng.normal(size=EMBEDDING_DIM) * (0.3 if matched else 1.2)
        vectors.append(EmbeddingVector.of(target + noise))
        vectors.append(EmbeddingVector.of(target))
    save_embeddings(vectors, demo_dir / "embeddings.f32")
    logger.info("Demo fixture done: replay_dir=%s bundles=%s embeddings=%s", replay_dir, len(payload["bundles"]), len(vectors))


def main() -> None:
    args = parse_args()
    configure_logging(args.log_level)
    build(args.demo_dir, args.log_level)


if __name__ == "__main__":
    main()
