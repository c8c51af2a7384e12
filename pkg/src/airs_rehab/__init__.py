from __future__ import annotations

__all__ = [
    "PipelineConfig",
    "align_sequences",
    "build_placement_footprint",
    "build_prompt",
    "exercise_volume",
    "load_config",
    "load_sequence",
    "main",
    "plan",
    "project_occupancy",
    "replan",
]


def __getattr__(name: str) -> object:
    if name in {"PipelineConfig", "load_config"}:
        from .config import PipelineConfig, load_config

        exports = {
            "PipelineConfig": PipelineConfig,
            "load_config": load_config,
        }
        return exports[name]

    if name in {"build_placement_footprint", "exercise_volume"}:
        from .footprint import build_placement_footprint, exercise_volume

        exports = {
            "build_placement_footprint": build_placement_footprint,
            "exercise_volume": exercise_volume,
        }
        return exports[name]

    if name == "load_sequence":
        from .motion_data import load_sequence

        return load_sequence

    if name == "project_occupancy":
        from .env_model import project_occupancy

        return project_occupancy

    if name == "plan":
        from .placement import plan

        return plan

    if name == "replan":
        from .navigation import replan

        return replan

    if name == "align_sequences":
        from .alignment import align_sequences

        return align_sequences

    if name == "build_prompt":
        from .prompts import build_prompt

        return build_prompt

    if name == "main":
        from .cli import main

        return main

    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
