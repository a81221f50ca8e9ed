"""FLOP accounting, time-to-solution and per-phase breakdown reports."""
from __future__ import annotations

import csv
import os
import threading
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

PHASES = ("construction", "solving", "dnn", "other")
STEP_COLUMNS = ("step", "construction_s", "solving_s", "dnn_s", "other_s", "flops")
UNATTRIBUTED_TOLERANCE = 0.05


class MetricsError(ValueError):
    pass


@dataclass
class RunReport:
    """One loop (time step) worth of measurements.

    ``flops_total`` counts effective FLOPs only: NN inference plus sparse solves.
    ``dof`` is cells times transported variables; ``flow_cycle`` is an opaque
    per-loop scalar supplied by the user.
    """
    loop_time_s: float
    flops_total: int
    dof: int
    flow_cycle: float
    construction_s: float = 0.0
    solving_s: float = 0.0
    dnn_s: float = 0.0
    other_s: float = 0.0

    def __post_init__(self):
        if self.flops_total < 0:
            raise MetricsError("flops_total must be >= 0")
        if self.loop_time_s < 0 or any(getattr(self, f"{p}_s") < 0 for p in PHASES):
            raise MetricsError("times must be >= 0")

    def phase_sum(self) -> float:
        return sum(getattr(self, f"{p}_s") for p in PHASES)

    def phases_consistent(self, tolerance: float = UNATTRIBUTED_TOLERANCE) -> bool:
        return self.phase_sum() <= self.loop_time_s * (1.0 + tolerance)


def time_to_solution(report: RunReport) -> float:
    """Loop time / (DoF x flow cycles per loop), in s/DoF/cycle."""
    if report.dof <= 0:
        raise MetricsError("dof must be positive")
    if report.flow_cycle <= 0:
        raise MetricsError("flow_cycle must be positive")
    return report.loop_time_s / (report.dof * report.flow_cycle)


def flops_rate(report: RunReport) -> float:
    """Effective FLOPs per second of loop time."""
    if report.loop_time_s <= 0:
        raise MetricsError("loop_time_s must be positive")
    return report.flops_total / report.loop_time_s


class FlopCounter:
    """Per-phase FLOP tallies; safe to bump from several threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts: dict[str, int] = {}

    def add(self, phase: str, flops: int) -> None:
        if flops < 0:
            raise MetricsError("FLOP increments must be >= 0")
        with self._lock:
            self.counts[phase] = self.counts.get(phase, 0) + int(flops)

    def merge(self, other: FlopCounter) -> FlopCounter:
        out = FlopCounter()
        for src in (self, other):
            for k, v in src.counts.items():
                out.add(k, v)
        return out

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def mlp_flops(layer_dims: Sequence[int], batch: int = 1) -> int:
    """sum over layers of 2 m n, times the batch size."""
    return batch * sum(2 * int(m) * int(n) for m, n in zip(layer_dims[:-1], layer_dims[1:]))


def report_from_steps(steps: Iterable, dof: int, flow_cycle: float = 1.0) -> list[RunReport]:
    """Turn fvm step timings into per-step RunReports."""
    out = []
    for s in steps:
        out.append(RunReport(s.total_s, s.flops, dof, flow_cycle,
                             s.construction_s, s.solving_s, s.dnn_s, s.other_s))
    return out


def write_step_csv(path: str | os.PathLike, steps: Iterable, extra: Optional[dict] = None) -> None:
    """Per-step phase timing CSV: step, construction_s, solving_s, dnn_s, other_s, flops[, extra...]."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(STEP_COLUMNS) + list(extra))
        for s in steps:
            w.writerow([s.step, f"{s.construction_s:.9f}", f"{s.solving_s:.9f}", f"{s.dnn_s:.9f}",
                        f"{s.other_s:.9f}", s.flops] + list(extra.values()))


def write_rows(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    """CSV with a header row taken from the first record's keys."""
    if not rows:
        raise MetricsError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def report_row(report: RunReport) -> dict:
    row = asdict(report)
    row["time_to_solution"] = time_to_solution(report)
    row["flops_rate"] = flops_rate(report) if report.loop_time_s > 0 else 0.0
    return row
