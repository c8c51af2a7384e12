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

from airs_rehab.client import EndpointConfig, make_client, write_replay
from airs_rehab.errors import ConfigError, DimMismatch, EmptyInput, InvalidCounts, MalformedRecord, UnparseableVerdict, ZeroVector
from airs_rehab.evaluation import (
    EmbeddingVector,
    EvaluationCase,
    JudgeVerdict,
    accuracy,
    accuracy_grid,
    build_report,
    cosine_similarity,
    cross_judge_matrix,
    detection_summary,
    extract_correction,
    judge_many,
    judge_semantic_match,
    load_cases,
    load_embeddings,
    mean_similarity,
    parse_verdict,
    review_agreement,
    run_cross_judges,
    run_evaluation,
    save_embeddings,
    select_evaluation_cases,
    similarity_by_method,
)
from airs_rehab.motion_data import SkeletonFrame
from airs_rehab.prompts import PromptBundle, ablation_grid, build_judge_prompt, build_prompt, load_exercise_specs

DEMO_DIR = PROJECT_ROOT / "samples" / "demo"
GROUND_TRUTH = "Keep your knees pointing over your toes."


def verdicts(matches: int, total: int) -> list[JudgeVerdict]:
    return [JudgeVerdict("g", "t", index < matches, "YES" if index < matches else "NO") for index in range(total)]


class ScriptedGenerator:
    """Error-list prompts name the knees; everything else misses."""

    def complete(self, bundle: PromptBundle) -> str:
        if bundle.config is not None and bundle.config.use_error_list:
            return "The knees cave in.\nCorrection: Keep your knees over your toes."
        return "Correction: Squat a little deeper."


class ScriptedJudge:
    def __init__(self) -> None:
        self.prompts: list[str] = []

    def complete(self, bundle: PromptBundle) -> str:
        text = bundle.segments[0].text
        self.prompts.append(text)
        return "YES, same meaning." if "Instruction A: Keep your knees" in text else "No."


class LenientJudge:
    def __init__(self) -> None:
        self.prompts: list[str] = []

    def complete(self, bundle: PromptBundle) -> str:
        self.prompts.append(bundle.segments[0].text)
        return "Yes."


class VerdictTest(unittest.TestCase):
    def test_first_token_decides(self) -> None:
        self.assertTrue(parse_verdict("YES."))
        self.assertTrue(parse_verdict("  yes, they match"))
        self.assertFalse(parse_verdict("No, the first one is about depth."))
        self.assertFalse(parse_verdict("**NO**"))

    def test_unparseable(self) -> None:
        for raw in ("Possibly.", "", "Yesterday I said yes", "42"):
            with self.assertRaises(UnparseableVerdict):
                parse_verdict(raw)

    def test_extract_correction(self) -> None:
        text = "Reasoning first.\nCorrection: lift the chest\nsome more\ncorrection:  Keep knees out. "
        self.assertEqual(extract_correction(text), "Keep knees out.")
        self.assertEqual(extract_correction("  Just bend deeper.  "), "Just bend deeper.")

    def test_judge_semantic_match(self) -> None:
        judge = ScriptedJudge()
        verdict = judge_semantic_match(judge, "Keep your knees out.", GROUND_TRUTH)
        self.assertTrue(verdict.match)
        self.assertIn(f"Instruction B: {GROUND_TRUTH}", judge.prompts[0])


class AccuracyTest(unittest.TestCase):
    def test_nine_of_fifteen(self) -> None:
        result = accuracy(verdicts(9, 15))
        self.assertEqual((result.matches, result.total), (9, 15))
        self.assertEqual(result.percent, 60.0)
        with self.assertRaises(EmptyInput):
            accuracy([])

    def test_nine_of_fifteen_through_replay(self) -> None:
        pairs = [(f"Correction number {k}: keep the knees out.", GROUND_TRUTH) for k in range(15)]
        with tempfile.TemporaryDirectory() as tmp:
            for index, (generated, truth) in enumerate(pairs):
                answer = "YES" if index % 5 < 3 else "NO, different advice."
                write_replay(Path(tmp), build_judge_prompt(generated, truth), answer)
            judge = make_client(EndpointConfig(transport="replay", replay_dir=tmp))
            result = accuracy(judge_many(judge, pairs))
        self.assertEqual((result.matches, result.total), (9, 15))
        self.assertEqual(result.percent, 60.0)
        self.assertEqual(result.to_dict()["percent"], 60.0)

    def test_cross_judge_matrix(self) -> None:
        matrix = cross_judge_matrix({("judge-b", "skeleton/EL"): verdicts(3, 4), ("judge-a", "image/none"): verdicts(1, 4)})
        self.assertEqual(matrix, {"judge-a": {"image/none": 25.0}, "judge-b": {"skeleton/EL": 75.0}})


class ReviewTest(unittest.TestCase):
    def test_detection_summary(self) -> None:
        summary = detection_summary(263, 29)
        self.assertEqual(summary.detected, 234)
        self.assertAlmostEqual(summary.rate_percent, 88.97, places=2)
        self.assertEqual(summary.to_dict()["rate_percent"], 88.97)
        self.assertEqual(round(summary.rate_percent), 89)

    def test_invalid_counts(self) -> None:
        with self.assertRaises(InvalidCounts):
            detection_summary(0, 0)
        with self.assertRaises(InvalidCounts):
            detection_summary(10, 11)
        with self.assertRaises(InvalidCounts):
            review_agreement(263, 240, 18, 29)

    def test_review_agreement(self) -> None:
        self.assertEqual(review_agreement(263, 245, 18, 29), detection_summary(263, 29))


class SimilarityTest(unittest.TestCase):
    def test_identities(self) -> None:
        rng = np.random.default_rng(3)
        a = EmbeddingVector.of(rng.normal(size=64))
        self.assertAlmostEqual(cosine_similarity(a, a), 1.0, delta=1e-12)
        self.assertAlmostEqual(cosine_similarity(a, EmbeddingVector.of(-a.values)), -1.0, delta=1e-12)
        x = EmbeddingVector.of([1.0, 0.0, 0.0])
        y = EmbeddingVector.of([0.0, 2.0, 0.0])
        self.assertEqual(cosine_similarity(x, y), 0.0)

    def test_errors(self) -> None:
        with self.assertRaises(DimMismatch):
            cosine_similarity(EmbeddingVector.of([1.0, 0.0]), EmbeddingVector.of([1.0, 0.0, 0.0]))
        with self.assertRaises(ZeroVector):
            cosine_similarity(EmbeddingVector.of([0.0, 0.0]), EmbeddingVector.of([1.0, 0.0]))
        with self.assertRaises(DimMismatch):
            EmbeddingVector(values=np.zeros(3), dim=4)
        with self.assertRaises(EmptyInput):
            mean_similarity([])

    def test_mean_matches_recomputation(self) -> None:
        rng = np.random.default_rng(9)
        pairs = [(EmbeddingVector.of(rng.normal(size=16)), EmbeddingVector.of(rng.normal(size=16))) for _ in range(10)]
        expected = np.mean(
            [float(np.dot(a.values, b.values) / (np.linalg.norm(a.values) * np.linalg.norm(b.values))) for a, b in pairs]
        )
        self.assertAlmostEqual(mean_similarity(pairs), float(expected), places=12)

    def test_embedding_file(self) -> None:
        rng = np.random.default_rng(12)
        vectors = [EmbeddingVector.of(rng.normal(size=8)) for _ in range(5)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "emb" / "vectors.f32"
            save_embeddings(vectors, path)
            self.assertEqual(json.loads(path.with_suffix(".json").read_text(encoding="utf-8")), {"dim": 8, "count": 5})
            self.assertEqual(path.stat().st_size, 5 * 8 * 4)
            loaded = load_embeddings(path)
            path.with_suffix(".json").write_text(json.dumps({"dim": 8, "count": 6}), encoding="utf-8")
            with self.assertRaises(MalformedRecord):
                load_embeddings(path)
        self.assertEqual(len(loaded), 5)
        for original, restored in zip(vectors, loaded):
            np.testing.assert_allclose(restored.values, original.values, rtol=1e-6)


class CaseTest(unittest.TestCase):
    def test_demo_cases(self) -> None:
        cases = load_cases(DEMO_DIR / "ground_truth.json")
        self.assertEqual([case.id for case in cases], ["squat-home-01"])
        self.assertEqual(cases[0].potential_errors, 3)

    def test_select_by_potential_errors(self) -> None:
        cases = [EvaluationCase(f"c{k:02d}", "squat", "t", potential_errors=k % 4) for k in range(20)]
        chosen = select_evaluation_cases(cases, 15)
        self.assertEqual(len(chosen), 15)
        self.assertEqual([case.id for case in chosen[:5]], ["c03", "c07", "c11", "c15", "c19"])
        self.assertTrue(all(a.potential_errors >= b.potential_errors for a, b in zip(chosen, chosen[1:])))
        with self.assertRaises(InvalidCounts):
            select_evaluation_cases(cases, 0)


class RunEvaluationTest(unittest.TestCase):
    def setUp(self) -> None:
        spec = load_exercise_specs(DEMO_DIR / "squat_spec.json")["squat"]
        joints = np.zeros((24, 3))
        joints[:, 2] = np.linspace(0.05, 1.7, 24)
        case = EvaluationCase("case-1", "squat", GROUND_TRUTH, potential_errors=3)
        self.items = []
        for config in ablation_grid():
            kwargs: dict = {}
            if config.input_mode.uses_skeleton:
                kwargs["ref_frame"] = SkeletonFrame(0.0, joints)
                kwargs["query_frame"] = SkeletonFrame(0.1, joints)
            if config.input_mode.uses_images:
                kwargs["image_refs"] = ("clinic:frame=0", "home:frame=1")
            self.items.append((case, build_prompt(spec, config, **kwargs)))

    def test_rows_grid_and_report(self) -> None:
        rng = np.random.default_rng(1)
        embeddings: list[EmbeddingVector] = []
        for _case, bundle in self.items:
            truth = rng.normal(size=8)
            generated = truth if bundle.config.use_error_list else -truth
            embeddings += [EmbeddingVector.of(generated), EmbeddingVector.of(truth)]

        rows = run_evaluation(self.items, ScriptedGenerator(), ScriptedJudge(), embeddings=embeddings, max_in_flight=3)

        self.assertEqual(len(rows), 12)
        self.assertEqual([row.config for row in rows], ablation_grid())
        self.assertEqual(rows[1].verdict.generated, "Keep your knees over your toes.")
        self.assertEqual(sum(row.verdict.match for row in rows), 6)

        grid = accuracy_grid(rows)
        self.assertEqual(grid["skeleton"]["EL"]["percent"], 100.0)
        self.assertEqual(grid["image"]["none"]["percent"], 0.0)
        self.assertEqual(grid["image+skeleton"]["EL+BL"]["matches"], 1)

        similarity = similarity_by_method(rows)
        self.assertAlmostEqual(similarity["skeleton/EL"], 1.0)
        self.assertAlmostEqual(similarity["skeleton/BL"], -1.0)
        el_pairs = [row.embeddings for row in rows if row.config.key == "skeleton/EL"]
        self.assertEqual(similarity["skeleton/EL"], mean_similarity(el_pairs))
        self.assertIs(rows[0].embeddings[0], embeddings[0])

        report = build_report(rows, review=review_agreement(263, 245, 18, 29))
        self.assertEqual(report["overall"], {"matches": 6, "total": 12, "percent": 50.0})
        self.assertEqual(report["detection"]["detected"], 234)
        self.assertEqual(len(report["rows"]), 12)
        self.assertNotIn("cross_judge", report)

    def test_cross_judges_rejudge_every_row(self) -> None:
        rows = run_evaluation(self.items, ScriptedGenerator(), ScriptedJudge())
        lenient = LenientJudge()
        matrix = run_cross_judges(rows, {"judge-lenient": lenient}, primary_model="judge-scripted", max_in_flight=2)
        self.assertEqual(len(lenient.prompts), 12)
        self.assertEqual(sorted(matrix), ["judge-lenient", "judge-scripted"])
        self.assertEqual(matrix["judge-scripted"]["image/EL"], 100.0)
        self.assertEqual(matrix["judge-scripted"]["image/none"], 0.0)
        self.assertEqual(set(matrix["judge-lenient"].values()), {100.0})
        self.assertEqual(len(matrix["judge-lenient"]), 12)
        report = build_report(rows, cross_judge=matrix)
        self.assertEqual(report["cross_judge"], matrix)
        with self.assertRaises(ConfigError):
            run_cross_judges(rows, {"judge-scripted": lenient}, primary_model="judge-scripted")

    def test_partial_grid_leaves_empty_cells(self) -> None:
        rows = run_evaluation(self.items[:4], ScriptedGenerator(), ScriptedJudge())
        grid = accuracy_grid(rows)
        self.assertIsNone(grid["skeleton"]["none"])
        self.assertIsNone(rows[0].similarity)
        self.assertEqual(similarity_by_method(rows), {})

    def test_embedding_count_must_match(self) -> None:
        with self.assertRaises(MalformedRecord):
            run_evaluation(self.items, ScriptedGenerator(), ScriptedJudge(), embeddings=[EmbeddingVector.of([1.0])])
        with self.assertRaises(EmptyInput):
            run_evaluation([], ScriptedGenerator(), ScriptedJudge())


if __name__ == "__main__":
    unittest.main()
