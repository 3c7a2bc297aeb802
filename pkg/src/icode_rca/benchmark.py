"""Benchmark suites: every (system, alpha, seed) cell runs simulate -> train -> analyze."""
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from icode_rca import configure_logger
from icode_rca.analysis import detection_metrics
from icode_rca.config import write_config
from icode_rca.errors import ArtifactError, IcodeError
from icode_rca.processor import (
    ANALYSIS_DIR, CHECKPOINT_FILE, DATASET_DIR, Processor, summarize_analysis, write_json,
)
from icode_rca.run_result import RunResult
from icode_rca.trainer_factory import TrainerFactory

TABLES = {
    "detection": ("precision", "recall", "f1"),
    "localization": ("top1", "top3", "top5"),
    "classification": ("classification_accuracy", "measurement_classification_accuracy",
                       "cyber_classification_accuracy"),
}
SUMMARY_FILE = "summary.json"


def run_cell(cell_id, config):
    """Run one cell end to end; failures are returned, not raised, so the suite continues."""
    logger = configure_logger(__name__)
    processor = Processor(TrainerFactory())
    started = time.perf_counter()

    def failed(error):
        logger.error(f"Cell {cell_id} failed: {error}")
        return {"cell_id": cell_id, "error": str(error), "exit_code": error.exit_code,
                "seconds": time.perf_counter() - started}

    try:
        dataset_dir = os.path.join(config.output_dir, DATASET_DIR)
        processor.simulate(config, dataset_dir)
        processor.train(dataset_dir, config, config.output_dir)
        result = processor.analyze(dataset_dir, os.path.join(config.output_dir, CHECKPOINT_FILE), config,
                                   os.path.join(config.output_dir, ANALYSIS_DIR))
        return {"cell_id": cell_id, "summary": result.summary, "seconds": time.perf_counter() - started}
    except IcodeError as e:
        return failed(e)
    except OSError as e:
        return failed(ArtifactError(f"Error writing cell artifacts under {config.output_dir}: {e}"))


def aggregate(rows):
    """Seed-averaged tables keyed by (system, alpha), in first-seen order."""
    frame = pd.DataFrame(rows)
    tables = {}
    for name, columns in TABLES.items():
        grouped = frame.groupby(["system", "alpha"], sort=False)[list(columns)].mean().reset_index()
        tables[name] = grouped.to_dict(orient="records")
    return tables


def render_tables(tables):
    blocks = []
    for name, records in tables.items():
        blocks.append(f"== {name} ==")
        blocks.append(pd.DataFrame(records).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        blocks.append("")
    return "\n".join(blocks)


class BenchmarkRunner:
    """Runs a SuiteConfig and writes a summary every number of which can be re-derived."""

    def __init__(self):
        self.logger = configure_logger(__name__)

    def run(self, suite):
        suite.validate()
        cells = suite.cells()
        os.makedirs(suite.output_dir, exist_ok=True)
        write_config(suite, os.path.join(suite.output_dir, "suite.json"))
        self.logger.info(f"Running {len(cells)} cells with parallelism {suite.parallelism}")
        for _, config in cells:
            write_config(config, os.path.join(config.output_dir, "config.json"))

        started = time.perf_counter()
        if suite.parallelism == 1:
            outcomes = [run_cell(cell_id, config) for cell_id, config in cells]
        else:
            with ProcessPoolExecutor(max_workers=suite.parallelism) as pool:
                outcomes = list(pool.map(run_cell, *zip(*cells)))

        result = RunResult("benchmark")
        rows = []
        by_id = dict(cells)
        for outcome in outcomes:
            config = by_id[outcome["cell_id"]]
            if "error" in outcome:
                error = IcodeError(outcome["error"])
                error.exit_code = outcome["exit_code"]
                result.add_failed_cell(outcome["cell_id"], error)
                continue
            rows.append(dict(cell_id=outcome["cell_id"], system=config.system.kind,
                             alpha=config.protocol.alpha, seed=config.protocol.seed, **outcome["summary"]))

        summary = {
            "cells": rows,
            "tables": aggregate(rows) if rows else {},
            "failed": [cell_id for cell_id, _ in result.failed_cells],
            "seeds": list(suite.seeds),
        }
        summary_path = os.path.join(suite.output_dir, SUMMARY_FILE)
        write_json(summary, summary_path)
        table_path = os.path.join(suite.output_dir, "summary.txt")
        with open(table_path, "w") as handle:
            handle.write(render_tables(summary["tables"]))
        write_json({
            "created": datetime.now(timezone.utc).isoformat(),
            "seconds": time.perf_counter() - started,
            "cell_seconds": {o["cell_id"]: o["seconds"] for o in outcomes},
        }, os.path.join(suite.output_dir, "meta.json"))

        if result.failed_cells:
            self.logger.warning(f"{len(result.failed_cells)} of {len(cells)} cells failed")
        result.summary = summary
        return result.add_artifact("summary", summary_path).add_artifact("tables", table_path)


def _read_json(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Error reading {path}: {e}")


def recompute_cell(analysis_dir):
    """A cell summary rebuilt from its stored detection samples and per-segment records."""
    detection = _read_json(os.path.join(analysis_dir, "detection.json"))
    records = _read_json(os.path.join(analysis_dir, "rca.json"))
    metrics = detection_metrics(np.array(detection["sample_flags"]), np.array(detection["sample_labels"]))
    return summarize_analysis(metrics.to_dict(), records)


def audit(output_dir):
    """Mismatches between the stored summary and numbers recomputed from per-segment records."""
    logger = configure_logger(__name__)
    stored = _read_json(os.path.join(output_dir, SUMMARY_FILE))
    mismatches = []
    rows = []
    for row in stored["cells"]:
        analysis_dir = os.path.join(output_dir, "cells", row["cell_id"], ANALYSIS_DIR)
        recomputed = dict(cell_id=row["cell_id"], system=row["system"], alpha=row["alpha"], seed=row["seed"],
                          **recompute_cell(analysis_dir))
        for key, value in recomputed.items():
            if row.get(key) != value:
                mismatches.append(f"{row['cell_id']}.{key}: stored {row.get(key)!r}, recomputed {value!r}")
        rows.append(recomputed)
    if rows and aggregate(rows) != stored["tables"]:
        mismatches.append("tables: stored tables differ from the recomputed aggregate")
    logger.info(f"Audited {len(rows)} cells in {output_dir}: {len(mismatches)} mismatches")
    return mismatches
