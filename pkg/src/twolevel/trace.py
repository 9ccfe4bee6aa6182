"""Iteration trace records, CSV output, and run summaries.

Every number reported by the CLI is traceable to one of these records. The
wall_time column is the only nondeterministic field; determinism checks must
compare traces with it projected out.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass

TRACE_SCHEMA_VERSION = 1
SUMMARY_SCHEMA_VERSION = 1

TRACE_COLUMNS = [
    "solver", "scope", "k", "t", "beta", "rho", "L_val",
    "d1", "d2", "d3", "z_norm", "primal_gap", "wall_time",
]

SUMMARY_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version", "solver", "status", "objective", "outer_iters",
        "total_inner_iters", "residuals", "seed", "instance",
    ],
    "properties": {
        "schema_version": {"const": SUMMARY_SCHEMA_VERSION},
        "solver": {"type": "string"},
        "status": {"type": "string"},
        "objective": {"type": "number"},
        "outer_iters": {"type": "integer", "minimum": 0},
        "total_inner_iters": {"type": "integer", "minimum": 0},
        "time_s": {"type": "number"},
        "seed": {"type": ["integer", "null"]},
        "gap_pct": {"type": ["number", "null"]},
        "centralized_objective": {"type": ["number", "null"]},
        "residuals": {
            "type": "object",
            "required": ["d1", "d2", "d3", "primal_gap", "z_norm"],
            "properties": {k: {"type": "number", "minimum": 0}
                           for k in ["d1", "d2", "d3", "primal_gap", "z_norm"]},
        },
        "instance": {
            "type": "object",
            "required": ["family", "hash"],
            "properties": {
                "family": {"type": "string"},
                "params": {"type": "object"},
                "hash": {"type": "string"},
            },
        },
    },
}


@dataclass
class TraceRecord:
    solver: str
    scope: str  # "inner" or "outer"
    k: int
    t: int | None
    beta: float
    rho: float
    L_val: float | None
    d1: float | None
    d2: float | None
    d3: float | None
    z_norm: float
    primal_gap: float | None
    wall_time: float


class TraceSink:
    """Accumulates trace records with a shared wall clock."""

    def __init__(self):
        self.records: list[TraceRecord] = []
        self._start = time.perf_counter()

    def _now(self):
        return time.perf_counter() - self._start

    def inner(self, solver, k, t, beta, rho, L_val, d1, d2, d3, z_norm, primal_gap=None):
        self.records.append(TraceRecord(solver, "inner", k, t, beta, rho, L_val,
                                        d1, d2, d3, z_norm, primal_gap, self._now()))

    def outer(self, solver, k, beta, rho, z_norm, primal_gap, d1=None, d2=None, d3=None):
        self.records.append(TraceRecord(solver, "outer", k, None, beta, rho, None,
                                        d1, d2, d3, z_norm, primal_gap, self._now()))

    def rows(self):
        for rec in self.records:
            d = asdict(rec)
            yield [("" if d[c] is None else repr(d[c]) if isinstance(d[c], float) else d[c])
                   for c in TRACE_COLUMNS]


def write_trace_csv(sink: TraceSink, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"schema={TRACE_SCHEMA_VERSION}"] + [""] * (len(TRACE_COLUMNS) - 1))
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(sink.rows())


def load_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0][0].startswith("schema="):
        raise ValueError(f"{path}: missing trace schema stamp")
    header = rows[1]
    return [dict(zip(header, r)) for r in rows[2:]]


def write_summary(path, summary: dict):
    import jsonschema

    summary = dict(summary, schema_version=SUMMARY_SCHEMA_VERSION)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def load_summary(path):
    with open(path) as fh:
        return json.load(fh)
