"""Line-delimited training metrics.

One JSON object per line. The first record carries the config hash; every
other record is an event with a virtual (or wall) timestamp:
F, B, AGG, REPART, REPL, FAULT, RECOVER, plus SUMMARY lines for derived
quantities such as steady-state batch periods.
"""

from __future__ import annotations

import json
from pathlib import Path

from .wire import canonical_json

EVENTS = ("F", "B", "AGG", "REPART", "REPL", "FAULT", "RECOVER", "SUMMARY", "META")


class MetricsSink:
    """Collects records in order; deterministic serialization."""

    def __init__(self, run_id: str):
        self.run_id = run_id
        self.records: list[dict] = []

    def emit(self, record: dict):
        rec = dict(record)
        rec["run"] = self.run_id
        self.records.append(rec)

    def dump(self) -> bytes:
        return b"\n".join(canonical_json(r) for r in self.records) + b"\n"

    def write(self, path: str | Path):
        Path(path).write_bytes(self.dump())


def load_records(path: str | Path) -> list[dict]:
    records = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{line_no}: corrupt metrics line: {exc}") from exc
    return records


def parse_records(blob: bytes) -> list[dict]:
    return [json.loads(line) for line in blob.decode("utf-8").splitlines() if line.strip()]


def steady_state_period(records: list[dict], *, after_time: float | None = None,
                        window: int = 50) -> float | None:
    """Mean inter-completion time of stage-0 backwards over the tail window."""
    times = [r["t"] for r in records
             if r.get("event") == "B" and r.get("stage") == 0
             and (after_time is None or r["t"] > after_time)]
    if len(times) < 3:
        return None
    tail = times[-window:] if len(times) > window else times
    if len(tail) < 2:
        return None
    return (tail[-1] - tail[0]) / (len(tail) - 1)
