"""Synthetic two-source binary image tasks, class balancing and leakage-free splits.

Each task renders a shape-plus-texture object on a background. Class 0 (the
minority class under imbalance) is an elongated, striped blob; class 1 is a
round, dotted blob. The overlap between the two class distributions grows
with task difficulty. The two dataset sources share label semantics but use
different background, palette and noise statistics.

Pixel values are quantized to multiples of 1/255 so pools round-trip through
8-bit PNG exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .seeding import stable_seed

MINORITY, MAJORITY = 0, 1


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    minority_class_name: str
    majority_class_name: str
    difficulty: int
    overlap: float


TASKS = {
    "TaskBM": TaskSpec("TaskBM", "bikes", "motorbikes", 1, 0.0),
    "TaskCD": TaskSpec("TaskCD", "cats", "dogs", 2, 0.35),
    "TaskMW": TaskSpec("TaskMW", "men", "women", 3, 0.65),
}
SOURCES = ("SourceA", "SourceB")
# minority share in percent
BALANCES = {"B50": 50, "B40": 40, "B30": 30, "B20": 20}


@dataclass(frozen=True, order=True)
class DatasetKey:
    task: str
    source: str
    balance: str = "B50"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        if self.balance not in BALANCES:
            raise ValueError(f"unknown balance {self.balance!r}; expected one of {sorted(BALANCES)}")

    @property
    def minority_fraction(self) -> float:
        return BALANCES[self.balance] / 100

    @property
    def slug(self) -> str:
        return f"{self.task}-{self.source}-{self.balance}"


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) ints, 0 = minority class
    ids: tuple[str, ...]
    role: str = "pool"
    seed: int = 0
    source: str | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = tuple(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal length")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in (MINORITY, MAJORITY)}

    def subset(self, idx, role: str | None = None) -> "LabeledImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       ids=tuple(self.ids[i] for i in idx), role=role or self.role)


@dataclass
class SplitBundle:
    train: LabeledImageSet
    val: LabeledImageSet
    test: LabeledImageSet
    key: DatasetKey | None = None
    meta: dict = field(default_factory=dict)

    def roles(self) -> dict[str, LabeledImageSet]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_SOURCE_STYLE = {
    # background endpoints, object palette, pixel noise, clutter lines
    "SourceA": dict(bg=((0.10, 0.16, 0.30), (0.25, 0.35, 0.55)), palette=(0.85, 0.75, 0.35),
                    noise=0.03, lines=0, vertical=True),
    "SourceB": dict(bg=((0.55, 0.45, 0.30), (0.75, 0.65, 0.50)), palette=(0.20, 0.35, 0.15),
                    noise=0.06, lines=3, vertical=False),
}


def _aspect_range(label: int, overlap: float) -> tuple[float, float]:
    if label == MINORITY:
        return 2.2 - 1.1 * overlap, 3.0 - 0.9 * overlap
    return 1.0 + 0.5 * overlap, 1.3 + 0.9 * overlap


def render(label: int, task: TaskSpec, source: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) image for the given class."""
    style = _SOURCE_STYLE[source]
    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    lo, hi = (np.array(c) for c in style["bg"])
    ramp = (yy if style["vertical"] else xx)[None] * 0.5 + 0.5
    bg = lo[:, None, None] + (hi - lo)[:, None, None] * ramp
    for _ in range(style["lines"]):
        theta, off = rng.uniform(0, np.pi), rng.uniform(-1, 1)
        d = np.abs(np.cos(theta) * xx + np.sin(theta) * yy - off)
        bg = bg + 0.12 * (d < 0.04)[None]

    aspect = rng.uniform(*_aspect_range(label, task.overlap))
    radius = rng.uniform(0.35, 0.5)
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    theta = rng.uniform(0, np.pi)
    u = (np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) / (radius * np.sqrt(aspect))
    v = (-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)) / (radius / np.sqrt(aspect))
    mask = np.clip((1.0 - (u ** 2 + v ** 2)) * 6.0, 0.0, 1.0)

    striped = label == MINORITY
    if rng.random() < task.overlap / 2:
        striped = not striped
    freq = rng.uniform(2.5, 3.5)
    phase = rng.uniform(0, 2 * np.pi)
    if striped:
        texture = (np.sin(2 * np.pi * freq * v * 0.5 + phase) > 0).astype(float)
    else:
        texture = ((np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy + phase)) > 0.4).astype(float)

    color = np.clip(np.array(style["palette"]) + rng.normal(0, 0.08, size=3), 0, 1)
    obj = color[:, None, None] + 0.35 * (texture - 0.5)[None]
    img = bg * (1 - mask)[None] + obj * mask[None]
    img = img + rng.normal(0, style["noise"], size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def generate(key: DatasetKey, n_per_class: int, img_size: int = 32, seed: int = 0) -> LabeledImageSet:
    """Balanced master pool for ``key.task`` / ``key.source``.

    The pool does not depend on ``key.balance``; balancing applies to the
    training split only.
    """
    if n_per_class < 50:
        raise ValueError(f"n_per_class must be >= 50, got {n_per_class}")
    if img_size < 16:
        raise ValueError(f"img_size must be >= 16, got {img_size}")
    task = TASKS[key.task]
    base = stable_seed("generate", key.task, key.source, seed)
    images, labels, ids = [], [], []
    for label in (MINORITY, MAJORITY):
        for i in range(n_per_class):
            rng = np.random.default_rng([base, label, i])
            images.append(render(label, task, key.source, img_size, rng))
            labels.append(label)
            ids.append(f"{key.task}/{key.source}/{label}-{i:05d}")
    return LabeledImageSet(np.stack(images), np.array(labels), ids, role="pool", seed=seed, source=key.source)


# ---------------------------------------------------------------------------
# Balancing and splitting
# ---------------------------------------------------------------------------

def minority_target(majority_count: int, balance: str) -> int:
    pct = BALANCES[balance]
    return majority_count * pct // (100 - pct)


def apply_balance(pool: LabeledImageSet, balance: str, seed: int = 0) -> LabeledImageSet:
    """Undersample the minority class to the requested share; majority untouched."""
    if balance not in BALANCES:
        raise ValueError(f"unknown balance {balance!r}")
    counts = pool.class_counts()
    if counts[MINORITY] != counts[MAJORITY]:
        raise ValueError(f"pool must be balanced before undersampling, got {counts}")
    if balance == "B50":
        return pool
    target = minority_target(counts[MAJORITY], balance)
    if target < 1:
        raise ValueError(f"balance {balance} leaves no minority samples (majority={counts[MAJORITY]})")
    rng = np.random.default_rng(stable_seed("balance", balance, seed))
    minority_idx = np.flatnonzero(pool.labels == MINORITY)
    keep = np.sort(rng.choice(minority_idx, size=target, replace=False))
    keep = np.sort(np.concatenate([keep, np.flatnonzero(pool.labels == MAJORITY)]))
    return pool.subset(keep)


def split(pool: LabeledImageSet, fractions=(0.6, 0.2, 0.2), seed: int = 0,
          key: DatasetKey | None = None, min_per_class: int = 10) -> SplitBundle:
    """Per-class stratified train/val/test split with equal class counts in val and test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n_min = min(pool.class_counts().values())
    n_val = int(round(fractions[1] * n_min))
    n_test = int(round(fractions[2] * n_min))
    if n_val < min_per_class or n_test < min_per_class:
        raise ValueError(
            f"insufficient samples: val/test would hold {n_val}/{n_test} images per class, need {min_per_class}")
    rng = np.random.default_rng(stable_seed("split", seed))
    parts = {"train": [], "val": [], "test": []}
    for c in (MINORITY, MAJORITY):
        idx = rng.permutation(np.flatnonzero(pool.labels == c))
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val:n_val + n_test])
        parts["train"].append(idx[n_val + n_test:])
    sets = {role: pool.subset(np.sort(np.concatenate(ix)), role=role) for role, ix in parts.items()}
    return SplitBundle(sets["train"], sets["val"], sets["test"], key=key)


def make_bundle(key: DatasetKey, pool: LabeledImageSet, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitBundle:
    """Split a balanced pool, then undersample only the train part to ``key.balance``."""
    bundle = split(pool, fractions, seed=seed, key=key)
    # train part is per-class balanced only when the split left equal counts
    train = bundle.train
    counts = train.class_counts()
    if counts[MINORITY] != counts[MAJORITY]:
        n = min(counts.values())
        keep = np.concatenate([np.flatnonzero(train.labels == c)[:n] for c in (MINORITY, MAJORITY)])
        train = train.subset(np.sort(keep))
    bundle.train = apply_balance(train, key.balance, seed=stable_seed(key.slug, seed))
    return bundle


# ---------------------------------------------------------------------------
# Lossless export / import
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("id", "label", "role", "source", "file")


def export_images(sets: Iterable[LabeledImageSet], directory) -> Path:
    """Write images as 8-bit PNG plus ``manifest.csv`` (id, label, role, source, file)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in sets:
        for img, label, image_id in zip(s.images, s.labels, s.ids):
            rel = f"{s.role}/{image_id.replace('/', '__')}.png"
            (directory / rel).parent.mkdir(parents=True, exist_ok=True)
            arr = np.round(np.transpose(img, (1, 2, 0)) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(directory / rel)
            rows.append({"id": image_id, "label": int(label), "role": s.role, "source": s.source or "", "file": rel})
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return directory / "manifest.csv"


def import_images(directory) -> dict[str, LabeledImageSet]:
    """Read a directory written by :func:`export_images` (or prepared by hand)."""
    directory = Path(directory)
    grouped: dict[str, list[dict]] = {}
    with open(directory / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault(row["role"], []).append(row)
    out = {}
    for role, rows in grouped.items():
        imgs = [np.transpose(np.asarray(Image.open(directory / r["file"]).convert("RGB"), dtype=np.float64) / 255,
                             (2, 0, 1)) for r in rows]
        sources = {r["source"] for r in rows}
        out[role] = LabeledImageSet(np.stack(imgs), np.array([int(r["label"]) for r in rows]),
                                    [r["id"] for r in rows], role=role,
                                    source=sources.pop() if len(sources) == 1 else None)
    return out


def save_bundle(bundle: SplitBundle, path) -> Path:
    """All three roles in one ``.npz`` archive, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for role, s in bundle.roles().items():
        arrays[f"{role}_images"] = s.images
        arrays[f"{role}_labels"] = s.labels
        arrays[f"{role}_ids"] = np.array(s.ids)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, **arrays)
    tmp.replace(path)
    return path


def load_bundle(path, key: DatasetKey | None = None) -> SplitBundle:
    with np.load(Path(path)) as z:
        sets = {role: LabeledImageSet(z[f"{role}_images"], z[f"{role}_labels"], [str(i) for i in z[f"{role}_ids"]],
                                      role=role, source=key.source if key else None)
                for role in ("train", "val", "test")}
    return SplitBundle(sets["train"], sets["val"], sets["test"], key=key)
