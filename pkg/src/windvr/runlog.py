"""JSON-lines metrics log: one ``{"step", "loss_name", "value"}`` record per line."""

from __future__ import annotations

import json
import math
from pathlib import Path


class MetricsLog:
    def __init__(self, path=None, stage: str | None = None):
        self.path = Path(path) if path else None
        self.stage = stage
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, step: int, name: str, value: float) -> None:
        rec = {"step": int(step), "loss_name": name, "value": float(value)}
        if self.stage:
            rec["stage"] = self.stage
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def log_many(self, step: int, values: dict) -> None:
        for name, value in values.items():
            self.log(step, name, value)

    def series(self, name: str) -> list[float]:
        return [r["value"] for r in self.records if r["loss_name"] == name]

    def non_finite(self) -> list[dict]:
        return [r for r in self.records if not math.isfinite(r["value"])]


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
