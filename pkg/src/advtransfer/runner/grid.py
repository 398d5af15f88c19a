"""Experiment grid: source models, target models and evaluation cells."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import NamedTuple

from ..attacks import SourceModelKey
from ..data import DatasetKey
from ..models import ModelKey
from .manifest import RunManifest


class MathCell(NamedTuple):
    task: str
    attack: str
    source: SourceModelKey
    victim: ModelKey

    @property
    def cell_id(self) -> str:
        return f"math|{self.task}|{self.attack}|{self.source.slug}|{self.victim.slug}"


class NonMathCell(NamedTuple):
    task: str
    attack: str
    image_source: str
    victim: ModelKey

    @property
    def cell_id(self) -> str:
        return f"nonmath|{self.task}|{self.attack}|{self.image_source}|{self.victim.slug}"


@dataclass(frozen=True)
class Grid:
    dataset_keys: tuple[DatasetKey, ...]
    source_models: tuple[SourceModelKey, ...]
    targets: tuple[ModelKey, ...]
    math_cells: tuple[MathCell, ...]
    nonmath_cells: tuple[NonMathCell, ...]
    n_tasks: int

    def counts(self) -> dict[str, int]:
        return {
            "source_models_per_task": len(self.source_models) // self.n_tasks,
            "targets_per_task": len(self.targets) // self.n_tasks,
            "math_cells": len(self.math_cells),
            "nonmath_cells": len(self.nonmath_cells),
        }


def enumerate_grid(m: RunManifest) -> Grid:
    """Every model and evaluation cell of the manifest, in a fixed order.

    Per task: sources x archs x balances source models, times strategies for
    the targets; math cells pair each math attack and source model with every
    target, non-math cells pair each transform and image source with every
    target.
    """
    datasets = tuple(DatasetKey(t, s, b) for t, s, b in product(m.tasks, m.sources, m.balances))
    sources = tuple(SourceModelKey(d, a) for d, a in product(datasets, m.architectures))
    targets = tuple(ModelKey(s.dataset, s.arch, st) for s, st in product(sources, m.strategies))
    by_task: dict[str, tuple[list, list]] = {t: ([], []) for t in m.tasks}
    for s in sources:
        by_task[s.dataset.task][0].append(s)
    for v in targets:
        by_task[v.dataset.task][1].append(v)

    math_cells, nonmath_cells = [], []
    for task in m.tasks:
        srcs, vics = by_task[task]
        for attack in m.math_attacks:
            math_cells.extend(MathCell(task, attack.kind, s, v) for s in srcs for v in vics)
        for attack in m.nonmath_attacks:
            nonmath_cells.extend(NonMathCell(task, attack.kind, img, v) for img in m.sources for v in vics)
    return Grid(datasets, sources, targets, tuple(math_cells), tuple(nonmath_cells), len(m.tasks))
