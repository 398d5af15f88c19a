"""AMR pairing and grouped statistics over evaluation records.

Every statistic uses exactly rounded summation (``math.fsum``) over sorted
values, so tables do not depend on record order.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from ..metrics import amr
from .store import ResultStore

GROUP_KEYS = ("task", "case", "strategy", "attack", "severity", "kind", "arch", "balance")
FILTER_KEYS = ("task", "case", "strategy", "attack", "kind", "arch", "balance")
FAILURE_DIMENSIONS = ("case", "strategy", "attack", "severity")


class AggregationError(ValueError):
    pass


def band(n: int) -> str:
    """Sample-size band: S up to 10 values, L from 50, M between."""
    if n <= 10:
        return "S"
    return "M" if n < 50 else "L"


@dataclass(frozen=True)
class AMRRow:
    task: str
    kind: str
    attack: str
    case: str
    strategy: str
    arch: str
    balance: str
    severity: int  # severity of the attack on the undefended reference victim
    asr_base: float
    asr_defended: float
    amr: float
    cell: str


def _records(source) -> list[dict]:
    if isinstance(source, ResultStore):
        return source.records()
    return list(source)


def _pair_key(r: Mapping, strategy: str) -> tuple:
    return (r["task"], r["attack"], r["source"] or "", r["image_source"], r["victim_source"],
            r["victim_balance"], r["victim_arch"], strategy)


def amr_rows(source) -> list[AMRRow]:
    """Pair each defended victim with its undefended (Base) counterpart.

    The counterpart shares task, attack, attacker and the victim's dataset and
    architecture. Pairs whose baseline ASR is zero have no AMR and are dropped,
    as are pairs where either side errored.
    """
    ok = [r for r in _records(source) if r.get("status") == "ok"]
    base = {_pair_key(r, "Base"): r for r in ok if r["victim_strategy"] == "Base"}
    rows = []
    for r in ok:
        if r["victim_strategy"] == "Base":
            continue
        ref = base.get(_pair_key(r, "Base"))
        if ref is None:
            continue
        value = amr(ref["asr"], r["asr"])
        if not value.defined:
            continue
        rows.append(AMRRow(r["task"], r["kind"], r["attack"], r["case"], r["victim_strategy"], r["victim_arch"],
                           r["victim_balance"], ref["severity"], ref["asr"], r["asr"], value.amr, r["cell"]))
    rows.sort(key=lambda x: x.cell)
    return rows


def _stats(values: list[float]) -> dict:
    values = sorted(values)
    n = len(values)
    mean = math.fsum(values) / n
    return {"n": n, "mean_amr": mean, "std": math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n),
            "median": statistics.median(values), "pct_negative": 100.0 * sum(v < 0 for v in values) / n,
            "band": band(n)}


@dataclass
class AggregateTable:
    group_by: tuple[str, ...]
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def row(self, **keys) -> dict:
        hits = [r for r in self.rows if all(r[k] == v for k, v in keys.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {keys}")
        return hits[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


def _matches(row: AMRRow, filters: Mapping) -> bool:
    for key, want in filters.items():
        if key == "min_severity":
            if row.severity < want:
                return False
            continue
        if key not in FILTER_KEYS:
            raise AggregationError(f"unknown filter {key!r}; expected min_severity or one of {FILTER_KEYS}")
        have = getattr(row, key)
        if isinstance(want, (list, tuple, set, frozenset)):
            if have not in want:
                return False
        elif have != want:
            return False
    return True


def filter_rows(rows: Iterable[AMRRow], filters: Mapping | None = None) -> list[AMRRow]:
    filters = dict(filters or {})
    return [r for r in rows if _matches(r, filters)]


def aggregate(source, group_by: Iterable[str] = ("case",), filters: Mapping | None = None,
              weighting: str = "cell") -> AggregateTable:
    """Mean AMR (and spread) per group of defended victims.

    ``source`` is a ResultStore, a list of evaluation records or a list of
    AMRRow. With ``weighting="scenario"`` each case contributes equally to a
    group's mean instead of each cell.
    """
    group_by = tuple(group_by)
    bad = [k for k in group_by if k not in GROUP_KEYS]
    if bad:
        raise AggregationError(f"unknown group key(s) {bad}; expected one of {GROUP_KEYS}")
    if weighting not in ("cell", "scenario"):
        raise AggregationError(f"unknown weighting {weighting!r}")
    rows = _as_amr_rows(source)
    groups: dict[tuple, list[AMRRow]] = {}
    for r in filter_rows(rows, filters):
        groups.setdefault(tuple(getattr(r, k) for k in group_by), []).append(r)
    table = AggregateTable(group_by, group_by + ("n", "mean_amr", "std", "median", "pct_negative", "band"))
    for key in sorted(groups):
        members = groups[key]
        stats = _stats([m.amr for m in members])
        if weighting == "scenario":
            by_case: dict[str, list[float]] = {}
            for m in members:
                by_case.setdefault(m.case, []).append(m.amr)
            stats["mean_amr"] = math.fsum(math.fsum(v) / len(v) for _, v in sorted(by_case.items())) / len(by_case)
        table.rows.append(dict(zip(group_by, key), **stats))
    return table


def _as_amr_rows(source) -> list[AMRRow]:
    items = _records(source)
    if items and isinstance(items[0], AMRRow):
        return sorted(items, key=lambda x: x.cell)
    return amr_rows(items)


def failure_analysis(source, filters: Mapping | None = None) -> dict[str, AggregateTable]:
    """Negative-AMR breakdown per dimension, values in percent.

    Each table lists, per dimension value, its share of all negative AMR
    values and their mean, population std and median (all x100).
    """
    negatives = [r for r in filter_rows(_as_amr_rows(source), filters) if r.amr < 0]
    out = {}
    for dim in FAILURE_DIMENSIONS:
        table = AggregateTable((dim,), (dim, "n", "pct_of_negatives", "mean_pct", "std_pct", "median_pct"))
        groups: dict = {}
        for r in negatives:
            groups.setdefault(getattr(r, dim), []).append(100.0 * r.amr)
        for key in sorted(groups):
            s = _stats(groups[key])
            table.rows.append({dim: key, "n": s["n"], "pct_of_negatives": 100.0 * s["n"] / len(negatives),
                               "mean_pct": s["mean_amr"], "std_pct": s["std"], "median_pct": s["median"]})
        out[dim] = table
    return out


def severity_distribution(source) -> AggregateTable:
    """Share of each severity level per attack, over undefended victims."""
    counts: dict[str, dict[int, int]] = {}
    for r in _records(source):
        if r.get("status") == "ok" and r["victim_strategy"] == "Base":
            counts.setdefault(r["attack"], {}).setdefault(r["severity"], 0)
            counts[r["attack"]][r["severity"]] += 1
    cols = ("attack", "n") + tuple(f"pct_severity_{s}" for s in range(1, 6))
    table = AggregateTable(("attack",), cols)
    for attack in sorted(counts):
        n = sum(counts[attack].values())
        table.rows.append({"attack": attack, "n": n,
                           **{f"pct_severity_{s}": 100.0 * counts[attack].get(s, 0) / n for s in range(1, 6)}})
    return table


HIST_EDGES = tuple(round(-1.0 + 0.1 * i, 1) for i in range(11))


def negative_amr_histogram(source, filters: Mapping | None = None) -> AggregateTable:
    """Counts of negative AMR values per attack in ten bins over [-1, 0)."""
    table = AggregateTable(("attack",), ("attack", "bin_low", "bin_high", "count"))
    rows = [r for r in filter_rows(_as_amr_rows(source), filters) if r.amr < 0]
    for attack in sorted({r.attack for r in rows}):
        values = [r.amr for r in rows if r.attack == attack]
        for lo, hi in zip(HIST_EDGES, HIST_EDGES[1:]):
            table.rows.append({"attack": attack, "bin_low": lo, "bin_high": hi,
                               "count": sum(lo <= v < hi for v in values)})
    return table
