"""
Metrics Log Client - One JSON line per executed training step

metrics.jsonl holds the reproducible fields of StepMetrics; wall-clock timings
go to timings.jsonl beside it.
"""

import json
from pathlib import Path
from typing import Union

import pandas as pd

from runners.trainer import StepMetrics

METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"


class MetricsLogClient:
    """Appends StepMetrics records under a run directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.metrics_path = self.root / METRICS_FILE
        self.timings_path = self.root / TIMINGS_FILE

    def reset(self) -> None:
        """Start fresh logs (a new run, not a resume)."""
        self.root.mkdir(parents=True, exist_ok=True)
        self.metrics_path.write_text("")
        self.timings_path.write_text("")

    def truncate_after(self, iteration: int) -> None:
        """Drop records at or beyond `iteration`, so a resumed run does not duplicate steps."""
        for path in (self.metrics_path, self.timings_path):
            if not path.exists():
                continue
            kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["iteration"] < iteration]
            path.write_text("".join(f"{line}\n" for line in kept))

    def append(self, metrics: StepMetrics) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        record = metrics.model_dump(exclude={"wall_ms"})
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(self.timings_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"iteration": metrics.iteration, "wall_ms": round(metrics.wall_ms, 3)}) + "\n")

    def read(self) -> pd.DataFrame:
        """All step records as a DataFrame ordered by iteration."""
        if not self.metrics_path.exists() or self.metrics_path.stat().st_size == 0:
            return pd.DataFrame(columns=[name for name in StepMetrics.model_fields if name != "wall_ms"])
        frame = pd.read_json(self.metrics_path, lines=True, precise_float=True)
        return frame.sort_values("iteration").reset_index(drop=True)
