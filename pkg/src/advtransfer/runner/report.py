"""CSV tables and heatmaps for a finished (or partial) run."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .aggregate import (
    AggregateTable, aggregate, amr_rows, failure_analysis, negative_amr_histogram, severity_distribution,
)

ONE_WAY = ("case", "strategy", "attack", "severity", "task")
HEATMAPS = (("strategy", "severity"), ("strategy", "case"))


def heatmap_matrix(table: AggregateTable, row_key: str, col_key: str):
    """(row labels, column labels, mean-AMR matrix, band matrix); NaN where a pair has no data."""
    rows = sorted({r[row_key] for r in table.rows})
    cols = sorted({r[col_key] for r in table.rows})
    values = np.full((len(rows), len(cols)), np.nan)
    bands = np.full((len(rows), len(cols)), "", dtype=object)
    for r in table.rows:
        i, j = rows.index(r[row_key]), cols.index(r[col_key])
        values[i, j] = r["mean_amr"]
        bands[i, j] = r["band"]
    return rows, cols, values, bands


def render_heatmap(table: AggregateTable, row_key: str, col_key: str, path, title: str = ""):
    """Save a heatmap of ``mean_amr``; each cell shows its value and sample-size band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, cols, values, bands = heatmap_matrix(table, row_key, col_key)
    fig, ax = plt.subplots(figsize=(1.1 * max(len(cols), 3) + 2, 0.6 * max(len(rows), 2) + 1.5))
    im = ax.imshow(np.ma.masked_invalid(values), cmap="RdBu", vmin=-1, vmax=1, aspect="auto")
    ax.set_xticks(range(len(cols)), [str(c) for c in cols])
    ax.set_yticks(range(len(rows)), [str(r) for r in rows])
    ax.set_xlabel(col_key)
    ax.set_ylabel(row_key)
    for i in range(len(rows)):
        for j in range(len(cols)):
            if not np.isnan(values[i, j]):
                ax.text(j, i, f"{values[i, j]:.2f}\n[{bands[i, j]}]", ha="center", va="center", fontsize=8,
                        color="white" if abs(values[i, j]) > 0.5 else "black")
    fig.colorbar(im, ax=ax, label="mean AMR")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return values


def build_tables(records, min_severity: int = 1, weighting: str = "cell") -> dict[str, AggregateTable]:
    """Every table of the report, keyed by its relative CSV path (without suffix)."""
    rows = amr_rows(records)
    flt = {"min_severity": min_severity}
    tables = {f"by_{k}": aggregate(rows, (k,), flt, weighting) for k in ONE_WAY}
    for task in sorted({r.task for r in rows}):
        for row_key, col_key in HEATMAPS:
            tables[f"{task}/{row_key}_x_{col_key}"] = aggregate(rows, (row_key, col_key), dict(flt, task=task),
                                                                 weighting)
    for dim, table in failure_analysis(rows, flt).items():
        tables[f"failure_{dim}"] = table
    tables["severity_distribution"] = severity_distribution(records)
    tables["negative_amr_histogram"] = negative_amr_histogram(rows, flt)
    return tables


def write_report(records, out_dir, min_severity: int = 1, weighting: str = "cell", plots: bool = True) -> list[Path]:
    """Write ``aggregates/*.csv`` and, with ``plots``, ``report/*.png`` under ``out_dir``."""
    out_dir = Path(out_dir)
    tables = build_tables(records, min_severity, weighting)
    written = [t.write_csv(out_dir / "aggregates" / f"{name}.csv") for name, t in tables.items()]
    if plots:
        for name, table in tables.items():
            if "/" not in name or not len(table):
                continue
            task, pair = name.split("/")
            row_key, col_key = pair.split("_x_")
            png = out_dir / "report" / f"{task}_{pair}.png"
            render_heatmap(table, row_key, col_key, png, title=f"{task}: mean AMR by {row_key} and {col_key}")
            written.append(png)
    return written
