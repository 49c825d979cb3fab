"""Metrics CSV, timing sidecar and the bounds-vs-target chart."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

from .errors import ValidationError
from .kl_clip import f_estimator, solve_bounds
from .trainer import METRIC_COLUMNS, MetricsRow

# wall-clock time lives in timing.csv so metrics.csv is reproducible byte for byte
CSV_COLUMNS = tuple(c for c in METRIC_COLUMNS if c != "wall_time_s")
_INT_COLUMNS = {"iteration", "env_steps"}


def format_value(v) -> str:
    if isinstance(v, int):
        return str(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.9g}"


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(format_value(getattr(row, c)) for c in CSV_COLUMNS)


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValidationError(f"{path}: unexpected header {header}")
        out = []
        for rec in reader:
            out.append({c: int(v) if c in _INT_COLUMNS else float(v) for c, v in zip(header, rec)})
    return out


def write_timing_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "wall_time_s"))
        for row in rows:
            w.writerow((row.iteration, f"{row.wall_time_s:.6f}"))


def bounds_table(targets: Sequence[float]) -> list[tuple[float, float, float, float, float]]:
    """(target, lower, upper, lower residual, upper residual) per target."""
    out = []
    for t in targets:
        b = solve_bounds(t)
        out.append((t, b.lower, b.upper, f_estimator(b.lower) - t, f_estimator(b.upper) - t))
    return out


def write_bounds_svg(table, path: str | Path, epsilon: float = 0.2) -> None:
    """Lower/upper bound vs KL target, with the fixed PPO interval for reference."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    targets = [r[0] for r in table]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(targets, [r[2] for r in table], label="upper root")
    ax.plot(targets, [r[1] for r in table], label="lower root")
    ax.axhline(1.0 + epsilon, ls="--", lw=0.8, color="grey", label=f"1 +/- {epsilon}")
    ax.axhline(1.0 - epsilon, ls="--", lw=0.8, color="grey")
    ax.axhline(1.0, lw=0.5, color="black")
    ax.set_xlabel("KL target (nats)")
    ax.set_ylabel("ratio bound")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    # fixed hash salt keeps the SVG ids stable across runs
    matplotlib.rcParams["svg.hashsalt"] = "marpo"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
