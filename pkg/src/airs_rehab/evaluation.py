from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .client import ChatClient, EndpointConfig, chat, chat_many, make_client
from .errors import ConfigError, DimMismatch, EmptyInput, InvalidCounts, MalformedRecord, UnparseableVerdict, ZeroVector
from .prompts import DEFAULT_TEMPLATES, HINT_COLUMNS, InputMode, PromptBundle, PromptConfig, PromptTemplates, build_judge_prompt

logger = logging.getLogger(__name__)

EXPECTED_EMBEDDING_DIM = 4096
DEFAULT_CASE_COUNT = 15
_WORD = re.compile(r"[A-Za-z]+")
_CORRECTION = re.compile(r"^\s*correction\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)


# ----------------------------------------------------------------------
# Semantic-match judging
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    generated: str
    ground_truth: str
    match: bool
    judge_raw: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "generated": self.generated,
            "ground_truth": self.ground_truth,
            "match": self.match,
            "judge_raw": self.judge_raw,
        }


def parse_verdict(raw: str) -> bool:
    """True iff the first alphabetic token is "yes" (case-folded), False for "no"."""
    token = _WORD.search(raw or "")
    if token is not None:
        word = token.group(0).casefold()
        if word == "yes":
            return True
        if word == "no":
            return False
    raise UnparseableVerdict(raw or "")


def judge_semantic_match(
    judge: ChatClient | EndpointConfig,
    generated: str,
    ground_truth: str,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> JudgeVerdict:
    raw = chat(judge, build_judge_prompt(generated, ground_truth, templates))
    return JudgeVerdict(generated=generated, ground_truth=ground_truth, match=parse_verdict(raw), judge_raw=raw)


def judge_many(
    judge: ChatClient,
    pairs: Sequence[tuple[str, str]],
    templates: PromptTemplates = DEFAULT_TEMPLATES,
    max_in_flight: int = 4,
) -> list[JudgeVerdict]:
    bundles = [build_judge_prompt(generated, truth, templates) for generated, truth in pairs]
    raws = chat_many(judge, bundles, max_in_flight)
    return [
        JudgeVerdict(generated=generated, ground_truth=truth, match=parse_verdict(raw), judge_raw=raw)
        for (generated, truth), raw in zip(pairs, raws)
    ]


def extract_correction(response: str) -> str:
    """The text after a "Correction:" line, else the whole response."""
    found = _CORRECTION.findall(response or "")
    return found[-1].strip() if found else (response or "").strip()


@dataclass(frozen=True)
class AccuracyResult:
    matches: int
    total: int
    percent: float

    def to_dict(self) -> dict[str, Any]:
        return {"matches": self.matches, "total": self.total, "percent": round(self.percent, 2)}


def accuracy(verdicts: Sequence[JudgeVerdict]) -> AccuracyResult:
    if not verdicts:
        raise EmptyInput("accuracy needs at least one verdict.")
    matches = sum(1 for verdict in verdicts if verdict.match)
    return AccuracyResult(matches=matches, total=len(verdicts), percent=100.0 * matches / len(verdicts))


def cross_judge_matrix(verdicts: Mapping[tuple[str, str], Sequence[JudgeVerdict]]) -> dict[str, dict[str, float]]:
    """Match percentage per (judge model, generator method)."""
    matrix: dict[str, dict[str, float]] = {}
    for (judge_model, method), items in sorted(verdicts.items()):
        matrix.setdefault(judge_model, {})[method] = accuracy(items).percent
    return matrix


# ----------------------------------------------------------------------
# Embedding similarity
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    dim: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != self.dim:
            raise DimMismatch(f"Embedding declares dim {self.dim} but holds {values.shape[0]} values.")
        object.__setattr__(self, "values", values)

    @classmethod
    def of(cls, values: Iterable[float]) -> "EmbeddingVector":
        array = np.asarray(list(values), dtype=np.float64)
        return cls(values=array, dim=int(array.shape[0]))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_embeddings(path: Path) -> list[EmbeddingVector]:
    """Little-endian float32 rows, shape described by a `{dim, count}` JSON sidecar."""
    path = Path(path)
    sidecar = _sidecar(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        dim, count = int(meta["dim"]), int(meta["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{sidecar}: sidecar needs integer 'dim' and 'count'.") from exc
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != dim * count:
        raise MalformedRecord(f"{path}: expected {dim * count} float32 values, found {raw.size}.")
    if dim != EXPECTED_EMBEDDING_DIM:
        logger.debug("Embeddings in %s have dim %s (expected %s)", path, dim, EXPECTED_EMBEDDING_DIM)
    return [EmbeddingVector(values=row, dim=dim) for row in raw.reshape(count, dim)]


def save_embeddings(vectors: Sequence[EmbeddingVector], path: Path) -> None:
    path = Path(path)
    if not vectors:
        raise EmptyInput("No embeddings to save.")
    dim = vectors[0].dim
    if any(vector.dim != dim for vector in vectors):
        raise DimMismatch("All embeddings in one file must share a dimension.")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.stack([vector.values for vector in vectors]).astype("<f4").tofile(path)
    _sidecar(path).write_text(json.dumps({"dim": dim, "count": len(vectors)}) + "\n", encoding="utf-8")


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimMismatch(f"Cannot compare embeddings of dim {a.dim} and {b.dim}.")
    norm_a = float(np.linalg.norm(a.values))
    norm_b = float(np.linalg.norm(b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("Cosine similarity is undefined for a zero vector.")
    value = float(np.dot(a.values, b.values)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def mean_similarity(pairs: Sequence[tuple[EmbeddingVector, EmbeddingVector]]) -> float:
    if not pairs:
        raise EmptyInput("mean_similarity needs at least one pair.")
    return float(np.mean([cosine_similarity(a, b) for a, b in pairs]))


# ----------------------------------------------------------------------
# Reviewer bookkeeping
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionSummary:
    total: int
    detected: int
    undetected: int
    rate_percent: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "detected": self.detected,
            "undetected": self.undetected,
            "rate_percent": round(self.rate_percent, 2),
        }


def detection_summary(total: int, undetected: int) -> DetectionSummary:
    if total <= 0 or not 0 <= undetected <= total:
        raise InvalidCounts(f"Need total > 0 and 0 <= undetected <= total, got total={total} undetected={undetected}.")
    detected = total - undetected
    return DetectionSummary(total=total, detected=detected, undetected=undetected, rate_percent=100.0 * detected / total)


def review_agreement(total: int, agreed: int, consensus: int, undetected: int) -> DetectionSummary:
    """Two-reviewer protocol: every video is settled by agreement or by consensus."""
    if min(agreed, consensus) < 0 or agreed + consensus != total:
        raise InvalidCounts(
            f"agreed ({agreed}) + consensus ({consensus}) must equal the number of videos ({total})."
        )
    summary = detection_summary(total, undetected)
    logger.info(
        "Review agreement: videos=%s agreed=%s consensus=%s detected=%s rate=%.2f%%",
        total,
        agreed,
        consensus,
        summary.detected,
        summary.rate_percent,
    )
    return summary


@dataclass(frozen=True)
class EvaluationCase:
    id: str
    exercise_id: str
    ground_truth: str
    potential_errors: int = 0


def load_cases(path: Path) -> list[EvaluationCase]:
    """Reads {"cases": [{id, exercise_id, ground_truth, potential_errors}]}."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        records = payload["cases"] if isinstance(payload, dict) else payload
        cases = [
            EvaluationCase(
                id=str(record["id"]),
                exercise_id=str(record["exercise_id"]),
                ground_truth=str(record["ground_truth"]),
                potential_errors=int(record.get("potential_errors", 0)),
            )
            for record in records
        ]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"{path}: invalid ground-truth file ({exc}).") from exc
    if len({case.id for case in cases}) != len(cases):
        raise MalformedRecord(f"{path}: duplicate case id.")
    return cases


def select_evaluation_cases(cases: Sequence[EvaluationCase], n: int = DEFAULT_CASE_COUNT) -> list[EvaluationCase]:
    """The n cases with the most potential errors; ties by id."""
    if n <= 0:
        raise InvalidCounts(f"Case count must be positive, got {n}.")
    return sorted(cases, key=lambda case: (-case.potential_errors, case.id))[:n]


# ----------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationRow:
    case_id: str
    config: PromptConfig
    bundle_hash: str
    response: str
    verdict: JudgeVerdict
    similarity: float | None = None
    embeddings: tuple[EmbeddingVector, EmbeddingVector] | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "config": self.config.key,
            "bundle_hash": self.bundle_hash,
            "response": self.response,
            "generated": self.verdict.generated,
            "ground_truth": self.verdict.ground_truth,
            "match": self.verdict.match,
            "judge_raw": self.verdict.judge_raw,
            "similarity": self.similarity,
        }


def run_evaluation(
    items: Sequence[tuple[EvaluationCase, PromptBundle]],
    generator: ChatClient | EndpointConfig,
    judge: ChatClient | EndpointConfig,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
    embeddings: Sequence[EmbeddingVector] | None = None,
    max_in_flight: int = 4,
) -> list[EvaluationRow]:
    """Generate, judge and optionally score every (case, bundle) item.

    Embeddings, when given, hold two vectors per item in order: generated, then ground truth.
    """
    if not items:
        raise EmptyInput("Nothing to evaluate.")
    if embeddings is not None and len(embeddings) != 2 * len(items):
        raise MalformedRecord(f"Expected {2 * len(items)} embeddings (two per item), got {len(embeddings)}.")
    generator_client = make_client(generator) if isinstance(generator, EndpointConfig) else generator
    judge_client = make_client(judge) if isinstance(judge, EndpointConfig) else judge

    logger.info("Evaluation start: items=%s", len(items))
    responses = chat_many(generator_client, [bundle for _, bundle in items], max_in_flight)
    pairs = [(extract_correction(response), case.ground_truth) for (case, _), response in zip(items, responses)]
    verdicts = judge_many(judge_client, pairs, templates, max_in_flight)

    rows: list[EvaluationRow] = []
    for index, ((case, bundle), response, verdict) in enumerate(zip(items, responses, verdicts)):
        if bundle.config is None:
            raise MalformedRecord(f"Bundle {bundle.content_hash()} carries no prompt configuration.")
        similarity = pair = None
        if embeddings is not None:
            pair = (embeddings[2 * index], embeddings[2 * index + 1])
            similarity = cosine_similarity(*pair)
        rows.append(
            EvaluationRow(
                case_id=case.id,
                config=bundle.config,
                bundle_hash=bundle.content_hash(),
                response=response,
                verdict=verdict,
                similarity=similarity,
                embeddings=pair,
            )
        )
    logger.info("Evaluation done: rows=%s matches=%s", len(rows), sum(row.verdict.match for row in rows))
    return rows


def accuracy_grid(rows: Sequence[EvaluationRow]) -> dict[str, dict[str, dict[str, Any] | None]]:
    """Rows by input mode, columns none/EL/BL/EL+BL; empty cells are None."""
    grid: dict[str, dict[str, dict[str, Any] | None]] = {}
    for mode in InputMode:
        grid[mode.value] = {}
        for el, bl in HINT_COLUMNS:
            config = PromptConfig(input_mode=mode, use_error_list=el, use_body_regions=bl)
            cell = [row.verdict for row in rows if row.config == config]
            grid[mode.value][config.hint_label] = accuracy(cell).to_dict() if cell else None
    return grid


def similarity_by_method(rows: Sequence[EvaluationRow]) -> dict[str, float]:
    """Mean cosine similarity per prompt configuration over rows that carry embeddings."""
    grouped: dict[str, list[tuple[EmbeddingVector, EmbeddingVector]]] = {}
    for row in rows:
        if row.embeddings is not None:
            grouped.setdefault(row.config.key, []).append(row.embeddings)
    return {key: mean_similarity(pairs) for key, pairs in sorted(grouped.items())}


def run_cross_judges(
    rows: Sequence[EvaluationRow],
    judges: Mapping[str, ChatClient | EndpointConfig],
    primary_model: str,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
    max_in_flight: int = 4,
) -> dict[str, dict[str, float]]:
    """Re-judge the evaluated corrections with every extra judge; the primary verdicts come from the rows."""
    if not rows:
        raise EmptyInput("Cross judging needs evaluated rows.")
    if primary_model in judges:
        raise ConfigError(f"Judge model '{primary_model}' is both the primary and a cross judge.")
    verdicts: dict[tuple[str, str], list[JudgeVerdict]] = {}
    for row in rows:
        verdicts.setdefault((primary_model, row.config.key), []).append(row.verdict)
    pairs = [(row.verdict.generated, row.verdict.ground_truth) for row in rows]
    for model, judge in sorted(judges.items()):
        client = make_client(judge) if isinstance(judge, EndpointConfig) else judge
        logger.info("Cross judge start: model=%s pairs=%s", model, len(pairs))
        for row, verdict in zip(rows, judge_many(client, pairs, templates, max_in_flight)):
            verdicts.setdefault((model, row.config.key), []).append(verdict)
    return cross_judge_matrix(verdicts)


def build_report(
    rows: Sequence[EvaluationRow],
    review: DetectionSummary | None = None,
    cross_judge: Mapping[str, Mapping[str, float]] | None = None,
) -> dict[str, Any]:
    report: dict[str, Any] = {
        "overall": accuracy([row.verdict for row in rows]).to_dict(),
        "accuracy_grid": accuracy_grid(rows),
        "mean_similarity": similarity_by_method(rows),
        "rows": [row.to_dict() for row in rows],
    }
    if review is not None:
        report["detection"] = review.to_dict()
    if cross_judge:
        report["cross_judge"] = {judge: dict(methods) for judge, methods in cross_judge.items()}
    return report


def export_rows(rows: Sequence[EvaluationRow], path: Path) -> None:
    """Flat evaluation table as CSV, or Parquet when the suffix is .parquet."""
    try:
        import pyarrow as pa
        import pyarrow.csv as pacsv
        import pyarrow.parquet as pq
    except ImportError as exc:
        raise ImportError("Missing dependency pyarrow. Install with: pip install -r requirements-deploy.txt") from exc

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    schema = pa.schema(
        [
            ("case_id", pa.string()),
            ("config", pa.string()),
            ("bundle_hash", pa.string()),
            ("response", pa.string()),
            ("generated", pa.string()),
            ("ground_truth", pa.string()),
            ("match", pa.bool_()),
            ("judge_raw", pa.string()),
            ("similarity", pa.float64()),
        ]
    )
    table = pa.Table.from_pylist([row.to_dict() for row in rows], schema=schema)
    if path.suffix.lower() == ".parquet":
        pq.write_table(table, path, compression="zstd")
    else:
        pacsv.write_csv(table, path)
