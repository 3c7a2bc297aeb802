import json
import os

import pytest
from unittest.mock import patch, MagicMock
from project_paths import paths

from icode_rca.analysis import detection_metrics
from icode_rca.benchmark import BenchmarkRunner, aggregate, audit, render_tables, run_cell
from icode_rca.config import SuiteConfig, load_config
from icode_rca.errors import ArtifactError, DivergenceError
from icode_rca.processor import summarize_analysis

TEST_CONFIG_PATH = os.path.join(paths.dir_unit_resources, "default_config.json")


def record(kind, predicted, top1, pattern="pass"):
    return {
        "true_kind": kind,
        "predicted_kind": predicted,
        "topk_hits": {"top1": top1, "top3": True, "top5": True},
        "pattern_check": {"status": pattern},
    }


def cell_summary(f1=1.0, top1=1.0):
    summary = {"precision": f1, "recall": f1, "f1": f1, "top1": top1, "top3": 1.0, "top5": 1.0,
               "classification_accuracy": 1.0, "measurement_classification_accuracy": 1.0,
               "cyber_classification_accuracy": 1.0}
    return summary


def write_json(data, path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as handle:
        json.dump(data, handle)


class TestAggregate:

    def test_seed_average(self):
        rows = [
            dict(system="Lorenz96", alpha=1.0, seed=0, **cell_summary(f1=0.5, top1=0.0)),
            dict(system="Lorenz96", alpha=1.0, seed=1, **cell_summary(f1=1.0, top1=1.0)),
            dict(system="LotkaVolterra", alpha=0.5, seed=0, **cell_summary(f1=0.25)),
        ]
        tables = aggregate(rows)
        assert sorted(tables) == ["classification", "detection", "localization"]
        assert tables["detection"][0] == {"system": "Lorenz96", "alpha": 1.0, "precision": 0.75, "recall": 0.75,
                                          "f1": 0.75}
        assert tables["localization"][0]["top1"] == 0.5
        assert [row["system"] for row in tables["detection"]] == ["Lorenz96", "LotkaVolterra"]

    def test_render_tables(self):
        text = render_tables(aggregate([dict(system="Lorenz96", alpha=1.0, seed=0, **cell_summary())]))
        assert "== detection ==" in text
        assert "== classification ==" in text
        assert "1.0000" in text


class TestRunCell:

    @patch("icode_rca.benchmark.Processor")
    def test_failure_is_returned(self, mock_processor):
        mock_processor.return_value.simulate.side_effect = DivergenceError("overflow", step=3)
        outcome = run_cell("Lorenz96-alpha1-seed0", load_config())
        assert outcome["cell_id"] == "Lorenz96-alpha1-seed0"
        assert outcome["exit_code"] == 3
        assert "step=3" in outcome["error"]

    @patch("icode_rca.benchmark.Processor")
    def test_success_carries_summary(self, mock_processor, tmp_path):
        mock_processor.return_value.analyze.return_value = MagicMock(summary={"f1": 0.9})
        outcome = run_cell("cell", load_config(overrides=[f"output_dir={tmp_path}"]))
        assert outcome["summary"] == {"f1": 0.9}
        assert "error" not in outcome
        mock_processor.return_value.train.assert_called_once()

    @patch("icode_rca.benchmark.Processor")
    def test_os_error_becomes_artifact_failure(self, mock_processor):
        mock_processor.return_value.simulate.side_effect = NotADirectoryError(20, "Not a directory", "dataset")
        outcome = run_cell("cell", load_config())
        assert outcome["exit_code"] == 4
        assert "Not a directory" in outcome["error"]

    def test_stray_file_in_cell_directory(self, tmp_path):
        config = load_config(TEST_CONFIG_PATH, [f"output_dir={tmp_path}"])
        (tmp_path / "dataset").write_text("not a directory")
        outcome = run_cell("cell", config)
        assert outcome["exit_code"] == 4
        assert "summary" not in outcome


class TestBenchmarkRunner:

    @pytest.fixture
    @patch("icode_rca.benchmark.configure_logger")
    def runner(self, mock_configure_logger):
        mock_configure_logger.return_value = MagicMock()
        return BenchmarkRunner()

    @pytest.fixture
    def suite(self, tmp_path):
        return SuiteConfig(output_dir=str(tmp_path))

    @patch("icode_rca.benchmark.run_cell")
    def test_writes_summary_for_every_cell(self, mock_run_cell, runner, suite):
        mock_run_cell.side_effect = lambda cell_id, config: {"cell_id": cell_id, "summary": cell_summary(),
                                                              "seconds": 0.1}
        result = runner.run(suite)
        assert result.result_code() == 0
        assert mock_run_cell.call_count == 6
        with open(result.artifacts["summary"]) as handle:
            summary = json.load(handle)
        assert len(summary["cells"]) == 6
        assert summary["failed"] == []
        assert len(summary["tables"]["detection"]) == 6
        for name in ("suite.json", "summary.txt", "meta.json"):
            assert os.path.isfile(os.path.join(suite.output_dir, name))
        cell_id = summary["cells"][0]["cell_id"]
        assert os.path.isfile(os.path.join(suite.output_dir, "cells", cell_id, "config.json"))

    @patch("icode_rca.benchmark.run_cell")
    def test_failed_cells_keep_the_suite_going(self, mock_run_cell, runner, suite):
        def outcome(cell_id, config):
            if cell_id.startswith("Lorenz96"):
                return {"cell_id": cell_id, "error": "diverged", "exit_code": 3, "seconds": 0.1}
            return {"cell_id": cell_id, "summary": cell_summary(), "seconds": 0.1}

        mock_run_cell.side_effect = outcome
        result = runner.run(suite)
        assert result.result_code() == 3
        assert len(result.failed_cells) == 2
        assert len(result.summary["cells"]) == 4
        assert all(cell.startswith("Lorenz96") for cell in result.summary["failed"])
        runner.logger.warning.assert_called_once()


class TestAudit:

    @pytest.fixture
    def output_dir(self, tmp_path):
        cell_id = "Lorenz96-alpha1-seed0"
        analysis_dir = tmp_path / "cells" / cell_id / "analysis"
        detection = {"sample_flags": [1, 1, 0, 0], "sample_labels": [1, 0, 0, 0]}
        records = [record("Cyber", "Cyber", True), record("Measurement", "Cyber", False, "fail")]
        write_json(detection, str(analysis_dir / "detection.json"))
        write_json(records, str(analysis_dir / "rca.json"))
        metrics = detection_metrics(detection["sample_flags"], detection["sample_labels"]).to_dict()
        row = dict(cell_id=cell_id, system="Lorenz96", alpha=1.0, seed=0, **summarize_analysis(metrics, records))
        write_json({"cells": [row], "tables": aggregate([row]), "failed": [], "seeds": [0]},
                   str(tmp_path / "summary.json"))
        return tmp_path

    def test_clean_summary(self, output_dir):
        assert audit(str(output_dir)) == []

    def test_tampered_value_is_reported(self, output_dir):
        path = output_dir / "summary.json"
        summary = json.loads(path.read_text())
        summary["cells"][0]["top1"] = 1.0
        path.write_text(json.dumps(summary))
        mismatches = audit(str(output_dir))
        assert mismatches == ["Lorenz96-alpha1-seed0.top1: stored 1.0, recomputed 0.5"]

    def test_tampered_table_is_reported(self, output_dir):
        path = output_dir / "summary.json"
        summary = json.loads(path.read_text())
        summary["tables"]["detection"][0]["f1"] = 0.0
        path.write_text(json.dumps(summary))
        assert audit(str(output_dir)) == ["tables: stored tables differ from the recomputed aggregate"]

    def test_missing_summary(self, tmp_path):
        with pytest.raises(ArtifactError):
            audit(str(tmp_path))
