"""Training metrics: one CSV file per stage, strictly increasing steps.

Schema: step,stage,loss,lr,wall_time_s,extras_json

Floats are written with repr() (shortest round-trip form) and extras as JSON
with sorted keys, so two runs that compute identical numbers produce
byte-identical files. Wall time is real only when the writer is constructed
with record_time=True; otherwise the column holds 0.0 so determinism checks
can compare whole files.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

from .errors import ContractViolation, InputError, ParseError

HEADER = ["step", "stage", "loss", "lr", "wall_time_s", "extras_json"]


@dataclass
class MetricsRecord:
    step: int
    stage: str
    loss: float
    lr: float
    wall_time_s: float
    extras: dict = field(default_factory=dict)


class MetricsWriter:
    """Appends rows for a single stage; enforces step monotonicity."""

    def __init__(self, path: str, stage: str, record_time: bool = False):
        self.path = path
        self.stage = stage
        self.record_time = record_time
        self._t0 = time.perf_counter()
        self._last_step = None
        self._file = open(path, "w", newline="")
        self._csv = csv.writer(self._file)
        self._csv.writerow(HEADER)

    def log(self, step: int, loss: float, lr: float, extras: dict | None = None):
        step = int(step)
        if self._last_step is not None and step <= self._last_step:
            raise ContractViolation(
                f"metrics step {step} not greater than previous {self._last_step}"
            )
        self._last_step = step
        wall = time.perf_counter() - self._t0 if self.record_time else 0.0
        blob = json.dumps(extras or {}, sort_keys=True, separators=(",", ":"))
        self._csv.writerow([step, self.stage, repr(float(loss)), repr(float(lr)),
                            repr(float(wall)), blob])
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str) -> list:
    """Parse a metrics file, validating schema and step order."""
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty metrics file") from None
        if header != HEADER:
            raise InputError(f"{path}: bad header {header!r}; expected {HEADER!r}")
        last = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HEADER):
                raise ParseError(f"{path}: expected {len(HEADER)} columns, got {len(row)}", lineno)
            try:
                step = int(row[0])
                loss = float(row[2])
                lr = float(row[3])
                wall = float(row[4])
                extras = json.loads(row[5])
            except (ValueError, json.JSONDecodeError) as e:
                raise ParseError(f"{path}: {e}", lineno) from None
            if not isinstance(extras, dict):
                raise ParseError(f"{path}: extras_json is not an object", lineno)
            if last is not None and step <= last:
                raise ParseError(f"{path}: step {step} not greater than previous {last}", lineno)
            last = step
            records.append(MetricsRecord(step, row[1], loss, lr, wall, extras))
    return records


def metric_series(records: list, column: str):
    """Extract (steps, values) for a core column or an extras key."""
    core = {"loss", "lr", "wall_time_s"}
    steps, values = [], []
    for rec in records:
        if column in core:
            steps.append(rec.step)
            values.append(getattr(rec, column))
        elif column in rec.extras:
            steps.append(rec.step)
            values.append(float(rec.extras[column]))
    return steps, values
