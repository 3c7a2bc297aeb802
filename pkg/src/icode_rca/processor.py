import json
import os
from dataclasses import replace

import numpy as np
import pandas as pd

from icode_rca import configure_logger
from icode_rca.analysis import (
    TOPK, binarize_causality, causality_matrix, check_change_pattern, classify, detect, diff_matrix,
    localize, measurement_score, pick_threshold, anomaly_scores,
)
from icode_rca.anomalies import AnomalyKind, build_dataset, load_datasets, save_datasets
from icode_rca.config import write_config
from icode_rca.errors import ArtifactError, ValidationError
from icode_rca.model import load_checkpoint, save_model
from icode_rca.run_result import RunResult

DATASET_DIR = "dataset"
CHECKPOINT_FILE = "model.json"
LOSS_LOG_FILE = "loss.csv"
ANALYSIS_DIR = "analysis"


def write_matrix_csv(matrix, path):
    pd.DataFrame(np.asarray(matrix, dtype=np.float64)).to_csv(path, header=False, index=False, float_format="%.17g")


def write_json(data, path):
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)


def summarize_analysis(detection, records):
    """Headline numbers of one analysis, derived only from its stored records."""
    summary = {
        "precision": detection["precision"],
        "recall": detection["recall"],
        "f1": detection["f1"],
        "segments": len(records),
    }
    groups = {"all": records}
    for kind in AnomalyKind:
        groups[kind.value.lower()] = [r for r in records if r["true_kind"] == kind.value]
    for name, group in groups.items():
        for k in TOPK:
            key = f"top{k}" if name == "all" else f"{name}_top{k}"
            summary[key] = float(np.mean([r["topk_hits"][f"top{k}"] for r in group])) if group else 0.0
        key = "classification_accuracy" if name == "all" else f"{name}_classification_accuracy"
        summary[key] = float(np.mean([r["predicted_kind"] == r["true_kind"] for r in group])) if group else 0.0
        key = "pattern_pass_rate" if name == "all" else f"{name}_pattern_pass_rate"
        summary[key] = float(np.mean([r["pattern_check"]["status"] == "pass" for r in group])) if group else 0.0
    return summary


class Processor:
    """Runs the simulate, train and analyze steps of an experiment."""

    def __init__(self, factory):
        """Initialize the Processor with a Trainer factory."""
        self.trainer_factory = factory
        self.logger = configure_logger(__name__)

    def simulate(self, config, output_dir=None):
        """Build the normal, cyber and measurement periods and write them to disk."""
        output_dir = output_dir or os.path.join(config.output_dir, DATASET_DIR)
        spec = config.validate().spec()
        self.logger.info(f"Simulating {spec.kind.value} (p={spec.p}) into {output_dir}")
        datasets = build_dataset(spec, config.protocol)
        paths = save_datasets(datasets, output_dir)
        write_config(config, os.path.join(output_dir, "config.json"))
        result = RunResult("simulate")
        for period, path in paths.items():
            result.add_artifact(period, path)
        return result

    def train(self, dataset_dir, config, output_dir=None):
        """Fit the model on the normal period; writes a checkpoint and a per-epoch loss log."""
        output_dir = output_dir or config.output_dir
        datasets = load_datasets(dataset_dir)
        normal = datasets["normal"]
        self.logger.info(f"Training on {len(normal.trajectory)} normal samples from {dataset_dir}")
        trainer = self.trainer_factory.get_trainer(config.train)
        fitted = trainer.fit(normal.trajectory)

        os.makedirs(output_dir, exist_ok=True)
        checkpoint = os.path.join(output_dir, CHECKPOINT_FILE)
        with open(checkpoint, "wb") as handle:
            handle.write(save_model(fitted.model, config.train, fitted.final_loss))
        loss_log = os.path.join(output_dir, LOSS_LOG_FILE)
        pd.DataFrame({"epoch": np.arange(1, len(fitted.history) + 1), "loss": fitted.history}).to_csv(
            loss_log, index=False, float_format="%.17g")
        self.logger.info(f"Checkpoint written to {checkpoint}")
        return RunResult("train").add_artifact("checkpoint", checkpoint).add_artifact("loss_log", loss_log)

    def read_checkpoint(self, path):
        try:
            with open(path, "rb") as handle:
                return load_checkpoint(handle.read())
        except OSError as e:
            self.logger.error(f"Error reading checkpoint {path}: {e}")
            raise ArtifactError(f"Error reading checkpoint {path}: {e}")

    def prediction_config(self, checkpoint, train):
        """The configured train settings with the checkpoint's integrator and substeps."""
        stored = checkpoint.train_config if isinstance(checkpoint.train_config, dict) else {}
        changes = {
            name: stored[name] for name in ("integrator", "substeps")
            if name in stored and stored[name] != getattr(train, name)
        }
        if not changes:
            return train
        self.logger.warning(f"Checkpoint was trained with {changes}; using it instead of the configured "
                            f"integrator={train.integrator}, substeps={train.substeps}")
        return replace(train, **changes).validate()

    def analyze(self, dataset_dir, checkpoint_path, config, output_dir=None):
        """
        Detection over all three periods, then for every anomaly segment:
        retrain, compare causality, classify, localize and check the change pattern.
        """
        output_dir = output_dir or os.path.join(config.output_dir, ANALYSIS_DIR)
        analysis = config.analysis
        checkpoint = self.read_checkpoint(checkpoint_path)
        model = checkpoint.model
        train = self.prediction_config(checkpoint, config.train)
        datasets = load_datasets(dataset_dir)
        normal = datasets["normal"]
        if model.p != normal.trajectory.p:
            raise ValidationError(f"checkpoint has p={model.p} but the dataset has p={normal.trajectory.p}")
        os.makedirs(output_dir, exist_ok=True)

        normal_scores = anomaly_scores(model, normal.trajectory, analysis.window, train)
        threshold = pick_threshold(normal_scores, analysis.quantile)
        detection = detect(model, [datasets[p] for p in ("normal", "cyber", "measurement")],
                           threshold, analysis.window, train)
        flagged = int(detection.flags.sum())
        self.logger.info(f"Threshold {threshold:.6g}: {flagged} of {detection.flags.size} windows flagged")
        detection_path = os.path.join(output_dir, "detection.json")
        detection_data = detection.to_dict()
        detection_data["sample_flags"] = detection.sample_flags.tolist()
        detection_data["sample_labels"] = detection.sample_labels.tolist()
        write_json(detection_data, detection_path)

        normal_c = causality_matrix(model, normal.trajectory)
        normal_graph = binarize_causality(normal_c, analysis.kmeans_seed)
        write_matrix_csv(normal_c, os.path.join(output_dir, "causality_normal.csv"))
        write_matrix_csv(normal_graph.adjacency.astype(int), os.path.join(output_dir, "graph_normal.csv"))

        records = []
        retrain_cfg = replace(train, epochs=analysis.retrain_epochs)
        for period in ("cyber", "measurement"):
            dataset = datasets[period]
            for index, segment in enumerate(dataset.segments):
                segment_id = f"{period}-{index:03d}"
                records.append(self._analyze_segment(
                    segment_id, dataset, segment, model, normal_c, normal_graph, retrain_cfg, config, output_dir))

        rca_path = os.path.join(output_dir, "rca.json")
        write_json(records, rca_path)
        summary = summarize_analysis(detection.metrics.to_dict(), records)
        summary_path = os.path.join(output_dir, "summary.json")
        write_json(summary, summary_path)
        self.logger.info(f"Analysis written to {output_dir}: F1 {summary['f1']:.4f}, top1 {summary['top1']:.4f}")

        result = RunResult("analyze")
        result.summary = summary
        return result.add_artifact("detection", detection_path).add_artifact("rca", rca_path)\
            .add_artifact("summary", summary_path)

    def _analyze_segment(self, segment_id, dataset, segment, model, normal_c, normal_graph, retrain_cfg,
                         config, output_dir):
        analysis = config.analysis
        window = dataset.segment_window(segment)
        retrained = self.trainer_factory.get_trainer(retrain_cfg, initial=model).fit(window)
        anomalous_c = causality_matrix(retrained.model, window)
        d = diff_matrix(normal_c, anomalous_c)
        score = measurement_score(normal_c, anomalous_c, analysis.m)
        predicted = classify(score.score, analysis.cutoff)
        graph = normal_graph
        if analysis.neighbor_graph == "anomalous":
            graph = binarize_causality(anomalous_c, analysis.kmeans_seed)
        rca = localize(predicted, d, graph, root=segment.root, score=score)
        pattern = check_change_pattern(d, segment.kind, segment.root, dataset.graph, analysis.m, analysis.cutoff)
        self.logger.debug(f"{segment_id}: M={score.score:.3f} -> {predicted.value}, "
                          f"root {segment.root} ranked {rca.position() + 1}")

        segment_dir = os.path.join(output_dir, "segments", segment_id)
        os.makedirs(segment_dir, exist_ok=True)
        write_matrix_csv(anomalous_c, os.path.join(segment_dir, "causality.csv"))
        write_matrix_csv(d, os.path.join(segment_dir, "diff.csv"))
        write_matrix_csv(binarize_causality(anomalous_c, analysis.kmeans_seed).adjacency.astype(int),
                         os.path.join(segment_dir, "graph.csv"))

        return {
            "segment_id": segment_id,
            "true_kind": segment.kind.value,
            "true_root": segment.root,
            "alpha": segment.alpha,
            "offset": segment.offset,
            "start": segment.start,
            "length": segment.length,
            "measurement_score": score.score,
            "degenerate": score.degenerate,
            "predicted_kind": predicted.value,
            "ranking": rca.ranking.tolist(),
            "topk_hits": {f"top{k}": bool(rca.hit(k)) for k in TOPK},
            "pattern_check": pattern.to_dict(),
            "retrain_final_loss": retrained.final_loss,
        }
