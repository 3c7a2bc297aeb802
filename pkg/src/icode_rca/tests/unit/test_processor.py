import json
import os

import numpy as np
import pandas as pd
import pytest
from unittest.mock import patch, MagicMock
from project_paths import paths

from icode_rca.analysis import anomaly_scores
from icode_rca.anomalies import load_datasets
from icode_rca.config import load_config
from icode_rca.errors import ArtifactError, ValidationError
from icode_rca.model import IcodeModel, PhiNetwork, TrainConfig, load_checkpoint, save_model
from icode_rca.processor import Processor
from icode_rca.trainer import TrainResult

TEST_CONFIG_PATH = os.path.join(paths.dir_unit_resources, "default_config.json")


def constant_model(p=5, hidden=4):
    """Phi does not depend on the state, so every causality matrix is the same."""
    c2 = np.random.default_rng(0).uniform(-0.1, 0.1, size=p * p)
    phi = PhiNetwork(np.zeros((p, hidden)), np.zeros(hidden), np.zeros((hidden, p * p)), c2)
    return IcodeModel(phi, np.zeros(p))


class TestProcessor:

    @pytest.fixture
    def config(self, tmp_path):
        return load_config(TEST_CONFIG_PATH, [f"output_dir={tmp_path}"])

    @pytest.fixture
    def mock_trainer_factory(self):
        factory = MagicMock()
        factory.get_trainer.return_value.fit.return_value = TrainResult(constant_model(), [1.0, 0.5])
        return factory

    @pytest.fixture
    @patch("icode_rca.processor.configure_logger")
    def processor(self, mock_configure_logger, mock_trainer_factory):
        mock_logger = MagicMock()
        mock_configure_logger.return_value = mock_logger
        return Processor(mock_trainer_factory)

    @pytest.fixture
    def dataset_dir(self, processor, config):
        processor.simulate(config)
        return os.path.join(config.output_dir, "dataset")

    @pytest.fixture
    def checkpoint(self, processor, config, dataset_dir):
        return processor.train(dataset_dir, config).artifacts["checkpoint"]

    def test_simulate_writes_three_periods(self, processor, config):
        result = processor.simulate(config)
        dataset_dir = os.path.join(config.output_dir, "dataset")
        assert result.result_code() == 0
        assert sorted(result.artifacts) == ["cyber", "measurement", "normal"]
        for period in ("normal", "cyber", "measurement"):
            assert os.path.isfile(os.path.join(dataset_dir, period, "trajectory.csv"))
        with open(os.path.join(dataset_dir, "config.json")) as handle:
            assert json.load(handle)["system"]["p"] == 5
        processor.logger.info.assert_called_once_with(f"Simulating ReactionDiffusion (p=5) into {dataset_dir}")

    def test_simulate_is_reproducible(self, processor, config, tmp_path):
        processor.simulate(config, str(tmp_path / "first"))
        processor.simulate(config, str(tmp_path / "second"))
        for period in ("normal", "cyber", "measurement"):
            for name in ("trajectory.csv", "labels.csv", "segments.json"):
                first = (tmp_path / "first" / period / name).read_bytes()
                assert first == (tmp_path / "second" / period / name).read_bytes()

    def test_train_writes_checkpoint_and_loss_log(self, processor, config, dataset_dir, mock_trainer_factory):
        result = processor.train(dataset_dir, config)
        mock_trainer_factory.get_trainer.assert_called_once_with(config.train)
        mock_trainer_factory.get_trainer.return_value.fit.assert_called_once()
        with open(result.artifacts["checkpoint"], "rb") as handle:
            checkpoint = load_checkpoint(handle.read())
        assert checkpoint.model.p == 5
        assert checkpoint.final_loss == 0.5
        losses = pd.read_csv(result.artifacts["loss_log"])
        assert losses["epoch"].tolist() == [1, 2]
        assert losses["loss"].tolist() == [1.0, 0.5]

    def test_train_missing_dataset(self, processor, config, tmp_path):
        with pytest.raises(ArtifactError):
            processor.train(str(tmp_path / "absent"), config)

    def test_analyze_writes_reports(self, processor, config, dataset_dir, checkpoint, mock_trainer_factory):
        mock_trainer_factory.get_trainer.reset_mock()
        result = processor.analyze(dataset_dir, checkpoint, config)
        analysis_dir = os.path.join(config.output_dir, "analysis")
        assert result.result_code() == 0
        assert sorted(result.artifacts) == ["detection", "rca", "summary"]
        # One warm-start retrain per anomaly segment
        assert mock_trainer_factory.get_trainer.call_count == 8
        for name in ("causality_normal.csv", "graph_normal.csv"):
            assert os.path.isfile(os.path.join(analysis_dir, name))
        for name in ("causality.csv", "diff.csv", "graph.csv"):
            assert os.path.isfile(os.path.join(analysis_dir, "segments", "cyber-000", name))

        with open(result.artifacts["rca"]) as handle:
            records = json.load(handle)
        assert len(records) == 8
        assert [r["segment_id"] for r in records[:2]] == ["cyber-000", "cyber-001"]
        roots = [r["true_root"] for r in records if r["true_kind"] == "Cyber"]
        assert len(set(roots)) == 4 and set(roots) <= set(range(5))

        with open(result.artifacts["detection"]) as handle:
            detection = json.load(handle)
        assert len(detection["flags"]) == 3 * 40
        assert len(detection["sample_flags"]) == len(detection["sample_labels"]) == 3 * 200

    def test_unchanged_causality_is_called_cyber(self, processor, config, dataset_dir, checkpoint):
        # The mocked retrain returns the original model, so C' == C for every segment
        summary = processor.analyze(dataset_dir, checkpoint, config).summary
        assert summary["segments"] == 8
        assert summary["cyber_classification_accuracy"] == 1.0
        assert summary["measurement_classification_accuracy"] == 0.0
        assert summary["classification_accuracy"] == 0.5
        assert summary["pattern_pass_rate"] == 0.0
        for key in ("precision", "recall", "f1", "top1", "top3", "top5"):
            assert 0.0 <= summary[key] <= 1.0
        assert summary["top1"] <= summary["top3"] <= summary["top5"]

    def test_analyze_missing_checkpoint(self, processor, config, dataset_dir, tmp_path):
        with pytest.raises(ArtifactError, match="Error reading checkpoint"):
            processor.analyze(dataset_dir, str(tmp_path / "absent.json"), config)
        processor.logger.error.assert_called_once()

    def test_analyze_dimension_mismatch(self, processor, config, dataset_dir, tmp_path):
        path = tmp_path / "small.json"
        path.write_bytes(save_model(IcodeModel.initialize(4, 3, 0)))
        with pytest.raises(ValidationError, match="p=4"):
            processor.analyze(dataset_dir, str(path), config)

    def test_analyze_uses_the_checkpoint_integrator(self, processor, config, dataset_dir, tmp_path,
                                                    mock_trainer_factory):
        path = tmp_path / "rk4.json"
        path.write_bytes(save_model(constant_model(), TrainConfig(integrator="RK4", substeps=10)))
        mock_trainer_factory.get_trainer.reset_mock()
        with patch("icode_rca.processor.anomaly_scores", wraps=anomaly_scores) as mock_scores:
            processor.analyze(dataset_dir, str(path), config)
        scoring_cfg = mock_scores.call_args[0][3]
        assert (scoring_cfg.integrator, scoring_cfg.substeps) == ("RK4", 10)
        retrain_cfg = mock_trainer_factory.get_trainer.call_args[0][0]
        assert (retrain_cfg.integrator, retrain_cfg.substeps) == ("RK4", 10)
        assert retrain_cfg.epochs == config.analysis.retrain_epochs
        processor.logger.warning.assert_called_once()

    def test_matching_checkpoint_keeps_the_config(self, processor, config, checkpoint):
        with open(checkpoint, "rb") as handle:
            stored = load_checkpoint(handle.read())
        assert processor.prediction_config(stored, config.train) is config.train
        processor.logger.warning.assert_not_called()


class TestStrongMeasurementAnomaly:
    """Lorenz96 at alpha=5 with a retrain that changes only the root's column of Phi."""

    @pytest.fixture
    def config(self, tmp_path):
        return load_config(TEST_CONFIG_PATH, [f"output_dir={tmp_path}", "system.kind=Lorenz96", "system.p=20",
                                              "protocol.alpha=5", "analysis.m=10"])

    @pytest.fixture
    @patch("icode_rca.processor.configure_logger")
    def processor(self, mock_configure_logger):
        mock_configure_logger.return_value = MagicMock()
        return Processor(MagicMock())

    def test_root_column_change_is_called_measurement_and_ranked_first(self, processor, config):
        normal = constant_model(p=20)
        dataset_dir = os.path.join(config.output_dir, "dataset")
        processor.simulate(config, dataset_dir)
        datasets = load_datasets(dataset_dir)
        retrained = [TrainResult(normal, [])] * len(datasets["cyber"].segments)
        for segment in datasets["measurement"].segments:
            c2 = np.array(normal.phi.c2).reshape(20, 20)
            c2[:, segment.root] += 0.5
            phi = PhiNetwork(normal.phi.w1, normal.phi.c1, normal.phi.w2, c2.ravel())
            retrained.append(TrainResult(IcodeModel(phi, normal.bias), []))
        fit = processor.trainer_factory.get_trainer.return_value.fit
        fit.side_effect = [TrainResult(normal, [1.0])] + retrained

        checkpoint = processor.train(dataset_dir, config).artifacts["checkpoint"]
        result = processor.analyze(dataset_dir, checkpoint, config)
        with open(result.artifacts["rca"]) as handle:
            records = [r for r in json.load(handle) if r["true_kind"] == "Measurement"]
        assert len(records) == 4
        for record in records:
            assert record["measurement_score"] >= 0.8
            assert record["predicted_kind"] == "Measurement"
            assert record["ranking"][0] == record["true_root"]
        assert result.summary["measurement_top1"] == 1.0
        assert result.summary["measurement_classification_accuracy"] == 1.0
