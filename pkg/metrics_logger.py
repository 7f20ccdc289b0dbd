"""
Metrics Logger module for the SLAB transformer toolkit.

Records training progress as line-delimited JSON: one record per optimizer
step (lr, gamma, loss), one per epoch (mean loss, accuracies), one for the
statistic recalibration phase and a final summary. Records are kept in
memory with thread-safe access and appended to the metrics file as they
arrive, and can be exported to CSV or JSON.
"""

import csv
import json
import time
import logging
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
from datetime import datetime


class MetricsLogger:
    """
    Collects structured training metrics for one run.

    This class provides:
    - Typed records (step, epoch, recalibration, summary) with timestamps
    - Thread-safe operations for concurrent access
    - Append-only JSONL persistence
    - Export capabilities (CSV and JSON formats)
    - Gamma trace extraction and integrity validation
    """

    VALID_KINDS = ("step", "epoch", "recalibration", "summary")
    REQUIRED_FIELDS = {
        "step": {"step", "epoch", "lr", "gamma", "loss"},
        "epoch": {"epoch", "loss", "train_acc", "gamma", "lr"},
        "recalibration": {"passes", "batches"},
        "summary": set(),
    }

    def __init__(self, path: Optional[Union[str, Path]] = None, run_id: Optional[str] = None):
        """
        Initialize the MetricsLogger instance.

        Args:
            path: JSONL file to append records to. If None, records stay in memory
            run_id: Run identifier. If None, generates one based on current time
        """
        self.path = Path(path) if path is not None else None
        self.run_id = run_id or datetime.now().strftime("%Y%m%d_%H%M%S")
        self._records: List[Dict[str, Any]] = []
        self._lock = threading.RLock()
        self.logger = logging.getLogger(__name__)

        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            # a run starts with an empty file
            self.path.write_text("", encoding="utf-8")

    def log(self, kind: str, **fields: Any) -> Dict[str, Any]:
        """
        Record one metrics entry.

        Args:
            kind: Record kind (step, epoch, recalibration, summary)
            **fields: JSON-serializable values

        Returns:
            Copy of the stored record

        Raises:
            ValueError: If kind is not valid or required fields are missing
        """
        if kind not in self.VALID_KINDS:
            raise ValueError(f"Kind must be one of: {self.VALID_KINDS}")
        missing = self.REQUIRED_FIELDS[kind] - set(fields)
        if missing:
            raise ValueError(f"{kind} record is missing fields {sorted(missing)}")

        timestamp = time.time()
        record = {"kind": kind, "run_id": self.run_id, "timestamp": timestamp}
        record.update({k: _plain(v) for k, v in fields.items()})

        with self._lock:
            self._records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record, sort_keys=True) + "\n")

        if kind == "step":
            self.logger.debug(f"step {record['step']}: loss={record['loss']:.4f} gamma={record['gamma']:.4f}")
        else:
            self.logger.info(f"{kind}: " + ", ".join(f"{k}={v}" for k, v in fields.items()))
        return record.copy()

    def get_records(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        """Records in arrival order, optionally filtered by kind."""
        with self._lock:
            records = [r.copy() for r in self._records]
        if kind is not None:
            if kind not in self.VALID_KINDS:
                raise ValueError(f"Kind must be one of: {self.VALID_KINDS}")
            records = [r for r in records if r["kind"] == kind]
        return records

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def gamma_trace(self) -> List[Tuple[int, float]]:
        """(optimizer step, gamma) pairs from the step records."""
        return [(r["step"], r["gamma"]) for r in self.get_records("step")]

    def export(self, format: str = "csv", output_path: Optional[Union[str, Path]] = None,
               kind: Optional[str] = None) -> Path:
        """
        Export records in the specified format.

        Args:
            format: Export format ("csv" or "json")
            output_path: Output file path. If None, writes next to the metrics file
            kind: Only export records of this kind

        Returns:
            Path to the exported file

        Raises:
            ValueError: If format is not supported
            IOError: If export fails
        """
        if format not in ("csv", "json"):
            raise ValueError("Format must be 'csv' or 'json'")

        records = self.get_records(kind)
        if output_path is None:
            base = self.path.parent if self.path is not None else Path.cwd()
            output_path = base / f"metrics_{kind or 'all'}.{format}"
        output_path = Path(output_path)

        try:
            if format == "csv":
                self._export_csv(records, output_path)
            else:
                with open(output_path, "w", encoding="utf-8") as f:
                    json.dump({"run_id": self.run_id, "records": records}, f, indent=2)
        except Exception as e:
            self.logger.error(f"Export failed: {e}")
            raise IOError(f"Failed to export metrics: {e}")

        self.logger.info(f"Exported {len(records)} records to {output_path}")
        return output_path

    def _export_csv(self, records: List[Dict[str, Any]], output_path: Path) -> None:
        fieldnames: List[str] = []
        for record in records:
            for key in record:
                if key not in fieldnames:
                    fieldnames.append(key)
        with open(output_path, "w", newline="", encoding="utf-8") as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=fieldnames or ["kind"])
            writer.writeheader()
            for record in records:
                writer.writerow(record)

    def validate_integrity(self) -> Dict[str, Any]:
        """
        Validate the stored records.

        Returns:
            Dictionary with ``is_valid``, ``record_count`` and ``issues``
        """
        issues = []
        records = self.get_records()

        for i, record in enumerate(records):
            missing = self.REQUIRED_FIELDS.get(record.get("kind"), set()) - set(record)
            if missing:
                issues.append(f"Record {i}: missing fields {missing}")

        steps = [r["step"] for r in records if r["kind"] == "step"]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            issues.append("Step records are not strictly increasing")

        gammas = [r["gamma"] for r in records if r["kind"] == "step"]
        if any(b > a for a, b in zip(gammas, gammas[1:])):
            issues.append("Gamma increases between steps")

        return {"is_valid": not issues, "record_count": len(records), "issues": issues}

    @classmethod
    def read(cls, path: Union[str, Path]) -> List[Dict[str, Any]]:
        """Parse a JSONL metrics file."""
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def _plain(value: Any) -> Any:
    """Convert numpy scalars to built-in types for JSON."""
    if hasattr(value, "item") and callable(value.item) and getattr(value, "ndim", 1) == 0:
        return value.item()
    return value
