"""Run artifacts: report.json plus the accuracy matrix and overall series as CSV."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .checkpoint import atomic_write
from .metrics import average_forgetting, average_incremental_accuracy


def matrix_csv(rows: list[list[float]], overall: list[float]) -> str:
    """One line per finished task: a[t][0..T] (blank above the diagonal) and the overall accuracy.

    Floats use ``repr`` so the values round-trip exactly.
    """
    width = len(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_task"] + [f"task_{j}" for j in range(width)] + ["overall"])
    for t, row in enumerate(rows):
        w.writerow([t] + [repr(float(a)) for a in row] + [""] * (width - len(row)) + [repr(float(overall[t]))])
    return buf.getvalue()


def series_csv(overall: list[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_task", "overall_accuracy"])
    for t, a in enumerate(overall):
        w.writerow([t, repr(float(a))])
    return buf.getvalue()


def read_matrix_csv(path) -> tuple[list[list[float]], list[float]]:
    rows, overall = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for rec in reader:
            vals = rec[1:-1]
            rows.append([float(v) for v in vals if v != ""])
            overall.append(float(rec[-1]))
    return rows, overall


def write_run(out_dir, report: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, overall = report["accuracy_matrix"], report["overall_accuracy"]
    atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True).encode())
    atomic_write(out / "accuracy_matrix.csv", matrix_csv(rows, overall).encode())
    atomic_write(out / "accuracy_series.csv", series_csv(overall).encode())


def summarize(run_dir) -> dict:
    """Recompute metrics from a run's CSV and check them against its report.json."""
    run = Path(run_dir)
    report = json.loads((run / "report.json").read_text())
    rows, overall = read_matrix_csv(run / "accuracy_matrix.csv")
    num_tasks = len(report["schedule"]["increments"]) + 1
    aia = average_incremental_accuracy(overall, num_tasks)
    fgt = average_forgetting(rows, num_tasks)
    return {
        "method": report["method"],
        "average_incremental_accuracy": aia,
        "average_forgetting": fgt,
        "matches_report": aia == report["average_incremental_accuracy"] and fgt == report["average_forgetting"],
    }
