"""Evaluation metrics and the NDJSON metrics stream."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def eval_metric(predictions, labels, kind: str) -> float:
    """accuracy = fraction correct; mcc = Matthews correlation (binary).

    mcc is 0 by convention when its denominator vanishes (e.g. constant
    predictions).
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"eval_metric: {predictions.shape} predictions vs {labels.shape} labels"
        )
    if kind == "accuracy":
        return float((predictions == labels).mean())
    if kind == "mcc":
        tp = int(((predictions == 1) & (labels == 1)).sum())
        tn = int(((predictions == 0) & (labels == 0)).sum())
        fp = int(((predictions == 1) & (labels == 0)).sum())
        fn = int(((predictions == 0) & (labels == 1)).sum())
        denom = math.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
        if denom == 0.0:
            return 0.0
        return (tp * tn - fp * fn) / denom
    raise ValueError(f"unknown metric kind {kind!r}")


class MetricsWriter:
    """Append-only NDJSON stream; every line carries the schema version.

    Records are serialized with sorted keys so identical runs produce
    byte-identical files.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        row = {"schema_version": SCHEMA_VERSION, **record}
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_ndjson(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows
