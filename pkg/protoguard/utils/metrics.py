"""
JSON-lines metrics stream.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

from protoguard.schemas.results import EpochMetrics


class MetricsWriter:
    """Appends one ``EpochMetrics`` object per line; the file is truncated on open."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def write(self, metrics: EpochMetrics) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(metrics.model_dump_json() + "\n")


def read_metrics(path: str | Path) -> Iterator[EpochMetrics]:
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield EpochMetrics.model_validate(json.loads(line))
