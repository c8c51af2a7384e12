from __future__ import annotations

import sys
import tempfile
import unittest
from pathlib import Path

import pyarrow.csv as pacsv
import pyarrow.parquet as pq

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = PROJECT_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from airs_rehab.alignment import DEFAULT_TRIPLES, align_sequences, export_deviations
from airs_rehab.evaluation import EvaluationRow, JudgeVerdict, export_rows
from airs_rehab.motion_data import load_sequence
from airs_rehab.prompts import InputMode, PromptConfig

DEMO_DIR = PROJECT_ROOT / "samples" / "demo"


class DeviationTableTest(unittest.TestCase):
    def test_csv_and_parquet_hold_one_row_per_pair(self) -> None:
        result = align_sequences(load_sequence(DEMO_DIR / "clinic.jsonl"), load_sequence(DEMO_DIR / "home.jsonl"))
        with tempfile.TemporaryDirectory() as tmp:
            csv_path = Path(tmp) / "tables" / "deviations.csv"
            parquet_path = Path(tmp) / "tables" / "deviations.parquet"
            export_deviations(result, csv_path)
            export_deviations(result, parquet_path)
            from_csv = pacsv.read_csv(csv_path)
            from_parquet = pq.read_table(parquet_path)

        expected_columns = ["pair_index", "ref_index", "query_index", "deviation"] + [t.name for t in DEFAULT_TRIPLES]
        for table in (from_csv, from_parquet):
            self.assertEqual(table.column_names, expected_columns)
            self.assertEqual(table.num_rows, len(result.path.pairs))
        deviations = from_parquet.column("deviation").to_pylist()
        self.assertEqual(deviations[result.worst.pair_index], max(deviations))
        self.assertEqual(from_parquet.column("ref_index").to_pylist()[-1], result.path.pairs[-1][0])


class EvaluationTableTest(unittest.TestCase):
    def test_missing_similarity_is_null(self) -> None:
        rows = [
            EvaluationRow(
                case_id="squat-home-01",
                config=PromptConfig(InputMode.SKELETON, use_error_list=True),
                bundle_hash="ab" * 32,
                response="Correction: knees out.",
                verdict=JudgeVerdict("knees out.", "Keep your knees over your toes.", True, "YES"),
                similarity=0.75,
            ),
            EvaluationRow(
                case_id="squat-home-01",
                config=PromptConfig(InputMode.IMAGE),
                bundle_hash="cd" * 32,
                response="Correction: go deeper.",
                verdict=JudgeVerdict("go deeper.", "Keep your knees over your toes.", False, "NO"),
            ),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "rows.parquet"
            export_rows(rows, path)
            table = pq.read_table(path)
        self.assertEqual(table.column("config").to_pylist(), ["skeleton/EL", "image/none"])
        self.assertEqual(table.column("match").to_pylist(), [True, False])
        self.assertEqual(table.column("similarity").to_pylist(), [0.75, None])


if __name__ == "__main__":
    unittest.main()
