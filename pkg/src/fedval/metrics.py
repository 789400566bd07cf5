"""Per-run result rows, the communication compression ratio, and table emission.

A MetricRow is one (experiment, algorithm, seed) run boiled down to the
numbers the comparison tables need. communication_times is the upload count
when the run first hit its accuracy target; it is None when the target was
never reached, emitted as an empty CSV field / JSON null.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "experiment",
    "algorithm",
    "communication_times",
    "ccr",
    "final_acc",
    "seed",
    "ccr_display",
)


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    algorithm: str
    communication_times: Optional[int]
    ccr: float
    final_acc: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ccr <= 1.0 or not math.isfinite(self.ccr):
            raise ValueError("ccr must lie in [0,1]")
        if self.communication_times is not None and self.communication_times < 0:
            raise ValueError("communication_times must be >= 0 when present")


def ccr(c_t0: int, c_t1: int) -> float:
    """Fraction of would-be uploads that were skipped: (c_t0 - c_t1)/c_t0."""
    if c_t0 < 1:
        raise ValueError("c_t0 must be >= 1")
    if not 0 <= c_t1 <= c_t0:
        raise ValueError("need 0 <= c_t1 <= c_t0")
    return (c_t0 - c_t1) / c_t0


def summarize(rows: Sequence[MetricRow]) -> dict:
    """Mean CCR over vafl rows plus per-experiment upload reduction vs afl.

    Reduction compares mean communication_times of vafl and afl rows within
    one experiment; experiments lacking an afl baseline (or usable counts)
    are excluded with a warning.
    """
    vafl_rows = [r for r in rows if r.algorithm == "vafl"]
    mean_ccr = (
        sum(r.ccr for r in vafl_rows) / len(vafl_rows) if vafl_rows else None
    )

    def mean_times(subset):
        times = [r.communication_times for r in subset if r.communication_times is not None]
        return sum(times) / len(times) if times else None

    per_experiment = {}
    for exp in sorted({r.experiment for r in rows}):
        vafl_mean = mean_times([r for r in vafl_rows if r.experiment == exp])
        afl_mean = mean_times(
            [r for r in rows if r.experiment == exp and r.algorithm == "afl"]
        )
        if vafl_mean is None or afl_mean is None or afl_mean == 0:
            log.warning("experiment %s lacks a usable afl/vafl pairing; excluded", exp)
            continue
        per_experiment[exp] = 1.0 - vafl_mean / afl_mean

    mean_reduction = (
        sum(per_experiment.values()) / len(per_experiment) if per_experiment else None
    )
    return {
        "n_rows": len(rows),
        "mean_vafl_ccr": mean_ccr,
        "per_experiment_reduction": per_experiment,
        "mean_reduction": mean_reduction,
    }


def _row_record(row: MetricRow) -> dict:
    return {
        "experiment": row.experiment,
        "algorithm": row.algorithm,
        "communication_times": row.communication_times,
        "ccr": row.ccr,
        "final_acc": row.final_acc,
        "seed": row.seed,
        "ccr_display": f"{row.ccr:.4f}",
    }


def emit(rows: Iterable[MetricRow], path, format: str = "csv") -> None:
    """Write rows as a CSV or JSON table; full precision plus a 4 d.p. CCR column."""
    rows = list(rows)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in rows:
                rec = _row_record(row)
                rec["ccr"] = repr(rec["ccr"])
                rec["final_acc"] = repr(rec["final_acc"])
                if rec["communication_times"] is None:
                    rec["communication_times"] = ""
                writer.writerow(rec)
    elif format == "json":
        with open(path, "w") as fh:
            json.dump([_row_record(r) for r in rows], fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {format!r}")


def load_rows(path) -> list[MetricRow]:
    """Inverse of emit, dispatching on the file extension."""
    text = open(path).read()
    if str(path).endswith(".json"):
        records = json.loads(text)
    else:
        records = list(csv.DictReader(text.splitlines()))
    out = []
    for rec in records:
        times = rec["communication_times"]
        if times in ("", None):
            times = None
        else:
            times = int(times)
        out.append(
            MetricRow(
                experiment=rec["experiment"],
                algorithm=rec["algorithm"],
                communication_times=times,
                ccr=float(rec["ccr"]),
                final_acc=float(rec["final_acc"]),
                seed=int(rec["seed"]),
            )
        )
    return out
