from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import BandTooNarrow, EmptyInput, MalformedRecord, TripleMismatch, UnknownJoint, ZeroLengthRay
from .motion_data import SkeletonFrame, SkeletonSequence, get_joint_set

logger = logging.getLogger(__name__)

RAY_EPSILON = 1e-12


class FrameMetric(str, Enum):
    L2 = "L2"
    L1 = "L1"


class DeviationMetric(str, Enum):
    MSE = "MSE"
    MAE = "MAE"


_CDIST_METRICS = {FrameMetric.L2: "euclidean", FrameMetric.L1: "cityblock"}


def _midpoint(*names: str) -> Callable[[SkeletonSequence], np.ndarray]:
    def resolve(seq: SkeletonSequence) -> np.ndarray:
        positions = seq.positions()
        return positions[:, [seq.joint_index(name) for name in names], :].mean(axis=1)

    return resolve


_SYNTHETIC_JOINTS: dict[str, Callable[[SkeletonSequence], np.ndarray]] = {
    "center_of_hip": _midpoint("left_hip", "right_hip"),
}


def register_synthetic_joint(name: str, members: Sequence[str]) -> None:
    """Adds a joint defined as the midpoint of existing joints."""
    _SYNTHETIC_JOINTS[name] = _midpoint(*members)


@dataclass(frozen=True)
class AngleTriple:
    """Angle at pivot between the rays pivot->a and pivot->c."""

    a: str
    pivot: str
    c: str

    def __post_init__(self) -> None:
        if len({self.a, self.pivot, self.c}) != 3:
            raise UnknownJoint(f"Angle triple needs three distinct joints, got {self.name}.")

    @property
    def name(self) -> str:
        return f"{self.a}-{self.pivot}-{self.c}"


DEFAULT_TRIPLES: tuple[AngleTriple, ...] = (
    AngleTriple("left_hip", "left_knee", "left_ankle"),
    AngleTriple("right_hip", "right_knee", "right_ankle"),
    AngleTriple("spine1", "left_hip", "left_knee"),
    AngleTriple("spine1", "right_hip", "right_knee"),
    AngleTriple("right_hip", "left_hip", "left_knee"),
    AngleTriple("left_hip", "right_hip", "right_knee"),
    AngleTriple("left_knee", "left_ankle", "left_foot"),
    AngleTriple("right_knee", "right_ankle", "right_foot"),
    AngleTriple("left_shoulder", "left_elbow", "left_wrist"),
    AngleTriple("right_shoulder", "right_elbow", "right_wrist"),
    AngleTriple("left_hip", "left_shoulder", "left_elbow"),
    AngleTriple("right_hip", "right_shoulder", "right_elbow"),
    AngleTriple("left_ankle", "center_of_hip", "right_ankle"),
)

PIVOT_REGIONS: dict[str, str] = {
    "left_knee": "knees/lower leg",
    "right_knee": "knees/lower leg",
    "left_ankle": "ankles/feet",
    "right_ankle": "ankles/feet",
    "left_hip": "hips/pelvis",
    "right_hip": "hips/pelvis",
    "center_of_hip": "hips/pelvis",
    "pelvis": "hips/pelvis",
    "left_elbow": "elbows/forearms",
    "right_elbow": "elbows/forearms",
    "left_shoulder": "shoulders/upper arms",
    "right_shoulder": "shoulders/upper arms",
}
OTHER_REGION = "other"


def default_region_map(triples: Sequence[AngleTriple] = DEFAULT_TRIPLES) -> dict[str, str]:
    """Angle name -> body region, keyed by the pivot joint."""
    return {triple.name: PIVOT_REGIONS.get(triple.pivot, OTHER_REGION) for triple in triples}


@dataclass(frozen=True)
class JointAngleSeries:
    triples: tuple[AngleTriple, ...]
    values: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.triples):
            raise MalformedRecord(f"Angle matrix must be T x {len(self.triples)}, got shape {values.shape}.")
        if not np.all(np.isfinite(values)):
            raise MalformedRecord("Angle series contains non-finite values.")
        timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if timestamps.shape != (values.shape[0],):
            raise MalformedRecord("Angle series needs one timestamp per frame.")
        object.__setattr__(self, "triples", tuple(self.triples))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", timestamps)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_values(cls, values: Sequence[Sequence[float]] | np.ndarray, triples: Sequence[AngleTriple]) -> "JointAngleSeries":
        matrix = np.asarray(values, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
        return cls(triples=tuple(triples), values=matrix, timestamps=np.arange(matrix.shape[0], dtype=np.float64))


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float


@dataclass(frozen=True)
class WorstFrameReport:
    pair: tuple[int, int]
    pair_index: int
    deviation: float
    per_angle: tuple[float, ...]
    regions: tuple[str, ...]
    region_scores: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class AlignmentResult:
    path: AlignmentPath
    triples: tuple[AngleTriple, ...]
    frame_metric: FrameMetric
    deviation_metric: DeviationMetric
    deviations: np.ndarray
    per_angle: np.ndarray
    worst: WorstFrameReport
    joint_set: str
    ref_frame: SkeletonFrame
    query_frame: SkeletonFrame


def _joint_track(seq: SkeletonSequence, name: str) -> np.ndarray:
    if name in seq.joint_set.joint_names:
        return seq.positions()[:, seq.joint_index(name), :]
    resolver = _SYNTHETIC_JOINTS.get(name)
    if resolver is None:
        raise UnknownJoint(f"Joint '{name}' is not in joint set '{seq.joint_set.name}'.")
    try:
        return resolver(seq)
    except KeyError as exc:
        raise UnknownJoint(f"Synthetic joint '{name}' needs joint {exc} missing from '{seq.joint_set.name}'.") from None


def joint_angles(seq: SkeletonSequence, triples: Sequence[AngleTriple] = DEFAULT_TRIPLES) -> JointAngleSeries:
    columns: list[np.ndarray] = []
    for triple in triples:
        pivot = _joint_track(seq, triple.pivot)
        ray_a = _joint_track(seq, triple.a) - pivot
        ray_c = _joint_track(seq, triple.c) - pivot
        norm_a = np.linalg.norm(ray_a, axis=1)
        norm_c = np.linalg.norm(ray_c, axis=1)
        degenerate = (norm_a < RAY_EPSILON) | (norm_c < RAY_EPSILON)
        if degenerate.any():
            frame = int(np.argmax(degenerate))
            raise ZeroLengthRay(f"Frame {frame}: angle {triple.name} has a zero-length ray.")
        cosine = np.einsum("ij,ij->i", ray_a, ray_c) / (norm_a * norm_c)
        columns.append(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
    values = np.stack(columns, axis=1) if columns else np.zeros((len(seq), 0))
    return JointAngleSeries(triples=tuple(triples), values=values, timestamps=seq.timestamps())


def dtw(
    ref: JointAngleSeries,
    query: JointAngleSeries,
    frame_metric: FrameMetric | str = FrameMetric.L2,
    band: int | None = None,
) -> AlignmentPath:
    """Full (or Sakoe-Chiba banded) DTW over per-frame angle vectors.

    The traceback prefers the diagonal, then a ref step, then a query step when
    predecessors tie.
    """
    if ref.triples != query.triples:
        raise TripleMismatch("Reference and query use different angle triples.")
    metric = FrameMetric(frame_metric)
    n, m = len(ref), len(query)
    if n == 0 or m == 0:
        raise EmptyInput("DTW needs two non-empty series.")
    if band is not None and band < abs(n - m):
        raise BandTooNarrow(f"Band {band} cannot bridge the length difference {abs(n - m)}.")

    cost = cdist(ref.values, query.values, _CDIST_METRICS[metric])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(n):
        lo, hi = 0, m
        if band is not None:
            lo, hi = max(0, i - band), min(m, i + band + 1)
        for j in range(lo, hi):
            acc[i + 1, j + 1] = cost[i, j] + min(acc[i, j], acc[i, j + 1], acc[i + 1, j])

    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        step = int(np.argmin((acc[i, j], acc[i, j + 1], acc[i + 1, j])))
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return AlignmentPath(pairs=tuple(pairs), total_cost=float(acc[n, m]))


def per_angle_errors(
    path: AlignmentPath,
    ref: JointAngleSeries,
    query: JointAngleSeries,
    metric: DeviationMetric | str = DeviationMetric.MSE,
) -> np.ndarray:
    """P x K matrix: squared (MSE) or absolute (MAE) angle differences per aligned pair."""
    ref_idx = np.array([pair[0] for pair in path.pairs], dtype=np.intp)
    query_idx = np.array([pair[1] for pair in path.pairs], dtype=np.intp)
    diff = ref.values[ref_idx] - query.values[query_idx]
    if DeviationMetric(metric) is DeviationMetric.MSE:
        return diff**2
    return np.abs(diff)


def deviations(
    path: AlignmentPath,
    ref: JointAngleSeries,
    query: JointAngleSeries,
    metric: DeviationMetric | str = DeviationMetric.MSE,
) -> np.ndarray:
    errors = per_angle_errors(path, ref, query, metric)
    if errors.shape[1] == 0:
        return np.zeros(errors.shape[0])
    return errors.mean(axis=1)


def worst_frame(
    dev_list: Sequence[float] | np.ndarray,
    path: AlignmentPath,
    per_angle: np.ndarray,
    region_map: Mapping[str, str] | None = None,
    triples: Sequence[AngleTriple] = DEFAULT_TRIPLES,
) -> WorstFrameReport:
    values = np.asarray(dev_list, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("worst_frame needs at least one deviation.")
    # first maximum wins; path pairs are ordered by ref index
    index = int(np.argmax(values))
    row = np.asarray(per_angle, dtype=np.float64)[index]
    regions = region_map if region_map is not None else default_region_map(triples)
    totals: dict[str, float] = {}
    for triple, contribution in zip(triples, row):
        label = regions.get(triple.name, OTHER_REGION)
        totals[label] = totals.get(label, 0.0) + float(contribution)
    ranked = sorted(totals.items(), key=lambda item: (-item[1], item[0]))
    return WorstFrameReport(
        pair=path.pairs[index],
        pair_index=index,
        deviation=float(values[index]),
        per_angle=tuple(float(value) for value in row),
        regions=tuple(label for label, _ in ranked),
        region_scores=tuple(ranked),
    )


def align_sequences(
    ref_seq: SkeletonSequence,
    query_seq: SkeletonSequence,
    triples: Sequence[AngleTriple] = DEFAULT_TRIPLES,
    frame_metric: FrameMetric | str = FrameMetric.L2,
    deviation_metric: DeviationMetric | str = DeviationMetric.MSE,
    band: int | None = None,
    region_map: Mapping[str, str] | None = None,
) -> AlignmentResult:
    triples = tuple(triples)
    logger.info(
        "Alignment start: ref_frames=%s query_frames=%s triples=%s frame_metric=%s deviation_metric=%s",
        len(ref_seq),
        len(query_seq),
        len(triples),
        FrameMetric(frame_metric).value,
        DeviationMetric(deviation_metric).value,
    )
    ref = joint_angles(ref_seq, triples)
    query = joint_angles(query_seq, triples)
    path = dtw(ref, query, frame_metric, band)
    errors = per_angle_errors(path, ref, query, deviation_metric)
    devs = errors.mean(axis=1) if errors.shape[1] else np.zeros(errors.shape[0])
    worst = worst_frame(devs, path, errors, region_map, triples)
    logger.info(
        "Alignment done: pairs=%s total_cost=%.4f worst_pair=%s deviation=%.4f top_region=%s",
        len(path.pairs),
        path.total_cost,
        worst.pair,
        worst.deviation,
        worst.regions[0] if worst.regions else "-",
    )
    return AlignmentResult(
        path=path,
        triples=triples,
        frame_metric=FrameMetric(frame_metric),
        deviation_metric=DeviationMetric(deviation_metric),
        deviations=devs,
        per_angle=errors,
        worst=worst,
        joint_set=ref_seq.joint_set.name,
        ref_frame=ref_seq.frames[worst.pair[0]],
        query_frame=query_seq.frames[worst.pair[1]],
    )


def _frame_to_dict(frame: SkeletonFrame, joint_names: Sequence[str]) -> dict[str, Any]:
    return {
        "t": frame.t,
        "joints": {name: [float(v) for v in frame.joints[k]] for k, name in enumerate(joint_names)},
    }


def alignment_to_dict(result: AlignmentResult) -> dict[str, Any]:
    joint_names = get_joint_set(result.joint_set).joint_names
    worst = result.worst
    return {
        "joint_set": result.joint_set,
        "frame_metric": result.frame_metric.value,
        "deviation_metric": result.deviation_metric.value,
        "triples": [triple.name for triple in result.triples],
        "path": [list(pair) for pair in result.path.pairs],
        "total_cost": result.path.total_cost,
        "worst": {
            "ref_index": worst.pair[0],
            "query_index": worst.pair[1],
            "pair_index": worst.pair_index,
            "deviation": worst.deviation,
            "per_angle": {triple.name: value for triple, value in zip(result.triples, worst.per_angle)},
            "regions": list(worst.regions),
            "region_scores": {label: score for label, score in worst.region_scores},
        },
        "frames": {
            "reference": _frame_to_dict(result.ref_frame, joint_names),
            "query": _frame_to_dict(result.query_frame, joint_names),
        },
    }


def worst_frames_from_dict(payload: Mapping[str, Any]) -> tuple[SkeletonFrame, SkeletonFrame, list[str]]:
    """Reference frame, query frame and ranked regions from an exported alignment report."""
    try:
        joint_names = get_joint_set(str(payload["joint_set"])).joint_names
        frames = payload["frames"]
        loaded = []
        for key in ("reference", "query"):
            record = frames[key]
            joints = [record["joints"][name] for name in joint_names]
            loaded.append(SkeletonFrame(t=float(record["t"]), joints=np.asarray(joints, dtype=np.float64)))
        regions = [str(label) for label in payload["worst"]["regions"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"Alignment report is missing worst-frame data ({exc}).") from exc
    return loaded[0], loaded[1], regions


def export_deviations(result: AlignmentResult, path: Path) -> None:
    """Per-pair deviation table as CSV, or Parquet when the suffix is .parquet."""
    try:
        import pyarrow as pa
        import pyarrow.csv as pacsv
        import pyarrow.parquet as pq
    except ImportError as exc:
        raise ImportError("Missing dependency pyarrow. Install with: pip install -r requirements-deploy.txt") from exc

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pairs = result.path.pairs
    columns: dict[str, pa.Array] = {
        "pair_index": pa.array(range(len(pairs)), type=pa.int32()),
        "ref_index": pa.array([pair[0] for pair in pairs], type=pa.int32()),
        "query_index": pa.array([pair[1] for pair in pairs], type=pa.int32()),
        "deviation": pa.array(result.deviations, type=pa.float64()),
    }
    for k, triple in enumerate(result.triples):
        columns[triple.name] = pa.array(result.per_angle[:, k], type=pa.float64())
    table = pa.Table.from_pydict(columns)
    if path.suffix.lower() == ".parquet":
        pq.write_table(table, path, compression="zstd")
    else:
        pacsv.write_csv(table, path)
    logger.info("Deviation table written: path=%s rows=%s", path, table.num_rows)
