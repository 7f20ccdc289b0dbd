#!/usr/bin/env python3
"""
Tests for the MetricsLogger: record validation, JSONL persistence,
concurrent access, exports and integrity checks.
"""

import sys
import json
import threading
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from metrics_logger import MetricsLogger


def _step(logger, step, gamma):
    return logger.log("step", step=step, epoch=0, lr=1e-3, gamma=gamma, loss=np.float64(0.5))


def test_records_are_persisted_as_jsonl(tmp_path):
    """Every record is appended to the file as one JSON line."""
    print("Testing JSONL persistence...")
    path = tmp_path / "run" / "metrics.jsonl"
    logger = MetricsLogger(path, run_id="r1")
    record = _step(logger, 1, 0.9)
    logger.log("summary", best_acc=0.5)

    assert record["kind"] == "step" and record["run_id"] == "r1"
    assert isinstance(record["loss"], float), "numpy scalars should become built-in floats"
    lines = MetricsLogger.read(path)
    assert [r["kind"] for r in lines] == ["step", "summary"], "file should hold records in arrival order"
    assert len(logger) == 2
    print("✓ JSONL persistence tests passed")


def test_invalid_records_are_rejected():
    logger = MetricsLogger()
    with pytest.raises(ValueError):
        logger.log("checkpoint", step=1)
    with pytest.raises(ValueError):
        logger.log("step", step=1, epoch=0)
    with pytest.raises(ValueError):
        logger.get_records("bogus")
    assert len(logger) == 0, "rejected records are not stored"


def test_thread_safety():
    """Concurrent writers never lose records."""
    logger = MetricsLogger()
    errors = []

    def worker(offset):
        try:
            for i in range(25):
                logger.log("summary", worker=offset, i=i)
        except Exception as e:
            errors.append(e)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert not errors, f"Should have no errors in concurrent access: {errors}"
    assert len(logger) == 100, f"Should have 100 records from 4 threads: {len(logger)}"


def test_gamma_trace_and_integrity():
    logger = MetricsLogger()
    for step, g in enumerate([1.0, 0.5, 0.0], start=1):
        _step(logger, step, g)
    assert logger.gamma_trace() == [(1, 1.0), (2, 0.5), (3, 0.0)]
    assert logger.validate_integrity()["is_valid"], "a decreasing gamma trace is valid"

    _step(logger, 4, 0.25)
    report = logger.validate_integrity()
    assert not report["is_valid"] and "Gamma increases between steps" in report["issues"]


def test_exports(tmp_path):
    logger = MetricsLogger(tmp_path / "metrics.jsonl")
    _step(logger, 1, 1.0)
    _step(logger, 2, 0.5)
    logger.log("epoch", epoch=0, loss=0.4, train_acc=0.6, gamma=0.5, lr=1e-3)

    csv_path = logger.export("csv", kind="step")
    assert csv_path == tmp_path / "metrics_step.csv", "default export sits next to the metrics file"
    frame = pd.read_csv(csv_path)
    assert list(frame["gamma"]) == [1.0, 0.5]

    json_path = logger.export("json", tmp_path / "all.json")
    payload = json.loads(json_path.read_text())
    assert len(payload["records"]) == 3 and payload["run_id"] == logger.run_id

    with pytest.raises(ValueError):
        logger.export("xml")
    with pytest.raises(IOError):
        logger.export("json", tmp_path / "missing_dir" / "out.json")
