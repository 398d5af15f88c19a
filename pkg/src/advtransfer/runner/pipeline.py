"""Phase-ordered, resumable execution of a run manifest.

Phases: datagen -> baseline training -> attack tuning -> adversarial pools ->
strategy training -> evaluation. Every artifact is written atomically and a
phase skips units whose artifact already exists, so rerunning a finished
manifest computes nothing. Evaluation records go to a JSON-lines store in
grid order, whatever the worker count.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import shutil
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..attacks import (
    AdversarialPool, AttackSpec, SourceModelKey, build_adv_pool, spec_from_dict, spec_id, spec_to_dict,
    tune_attack,
)
from ..data import DatasetKey, generate, load_bundle, make_bundle, save_bundle
from ..defense import (
    PoolSlice, TrainingStrategy, strategy_slices, train_with_strategy, training_pool_specs,
)
from ..metrics import UndefinedASRError, asr, classify_case, nonmath_bucket
from ..models import ModelKey, TrainedModel, build, train_nominal
from ..seeding import stable_seed
from .grid import Grid, MathCell, enumerate_grid
from .manifest import DEFAULT_NONMATH_PARAMS, RunManifest
from .store import ResultStore

log = logging.getLogger(__name__)

PHASES = ("datagen", "train", "tune", "pools", "strategies", "evaluate")


class CellError(RuntimeError):
    pass


@dataclass
class RunStats:
    computed: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    errors: list = field(default_factory=list)
    interrupted: bool = False

    @property
    def total_computed(self) -> int:
        return sum(self.computed.values())

    def to_dict(self) -> dict:
        return {"computed": dict(self.computed), "total_computed": self.total_computed,
                "errors": list(self.errors), "interrupted": self.interrupted}


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    root: Path

    def bundle(self, d: DatasetKey) -> Path:
        return self.root / "data" / f"{d.slug}.npz"

    def model(self, k: ModelKey) -> Path:
        return self.root / "models" / k.slug

    def model_error(self, k: ModelKey) -> Path:
        return self.root / "models" / f"{k.slug}.error.json"

    def tuning(self, kind: str, key: str) -> Path:
        return self.root / "tuning" / kind / f"{key}.json"

    def train_pool(self, d: DatasetKey, spec: AttackSpec) -> Path:
        return self.root / "pools" / "train" / d.slug / spec_id(spec)

    def eval_pool(self, kind: str, key: str) -> Path:
        return self.root / "pools" / "eval" / kind / key

    @property
    def store(self) -> Path:
        return self.root / "results.jsonl"


def _model_done(layout: Layout, k: ModelKey) -> bool:
    return layout.model(k).with_suffix(".json").exists() or layout.model_error(k).exists()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def _save_model(model: TrainedModel, path: Path) -> None:
    # parameters first, metadata last: the .json file marks completion
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_name(path.name + ".tmp.npz"), **model.params)
    path.with_name(path.name + ".tmp.npz").replace(path.with_suffix(".npz"))
    _write_json(path.with_suffix(".json"), model.metadata())


def _save_pool(pool: AdversarialPool, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    pool.save(tmp)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def _pool_done(path: Path) -> bool:
    return (path / "manifest.csv").exists() or (path / "error.json").exists()


def _save_pool_error(path: Path, msg: str) -> None:
    _write_json(path / "error.json", {"error": msg})


@lru_cache(maxsize=64)
def _load_model(path: str) -> TrainedModel:
    return TrainedModel.load(path)


@lru_cache(maxsize=16)
def _load_bundle(path: str, key: DatasetKey):
    return load_bundle(path, key)


def _load_pool(path: Path) -> AdversarialPool:
    err = path / "error.json"
    if err.exists():
        raise CellError(json.loads(err.read_text())["error"])
    return AdversarialPool.load(path)


def _require_model(layout: Layout, k: ModelKey) -> TrainedModel:
    err = layout.model_error(k)
    if err.exists():
        raise CellError(f"model {k.slug} unavailable: {json.loads(err.read_text())['error']}")
    return _load_model(str(layout.model(k)))


def _load_spec(path: Path) -> AttackSpec:
    doc = json.loads(path.read_text())
    if "error" in doc:
        raise CellError(f"tuning failed: {doc['error']}")
    return spec_from_dict(doc)


def _imap(fn: Callable, items: list, workers: int) -> Iterable:
    if workers <= 1 or len(items) <= 1:
        yield from map(fn, items)
        return
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        yield from ex.map(fn, items)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _err(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# Phase units (top-level so worker processes can pickle them)
# ---------------------------------------------------------------------------

def _datagen_unit(args):
    m, layout, task, source = args
    seed = stable_seed(m.seed, "data", task, source)
    pool = generate(DatasetKey(task, source), m.n_per_class, m.img_size, seed=seed)
    written = 0
    for balance in m.balances:
        key = DatasetKey(task, source, balance)
        if not layout.bundle(key).exists():
            save_bundle(make_bundle(key, pool, m.fractions, seed=seed), layout.bundle(key))
            written += 1
    return written, None


def _baseline_unit(args):
    m, layout, src = args
    key = src.model_key
    try:
        bundle = _load_bundle(str(layout.bundle(src.dataset)), src.dataset)
        model = build(src.arch, m.img_size, seed=stable_seed(m.seed, "init", src.slug), key=key, hyper=m.hyper)
        model = train_nominal(model, bundle, m.hyper, seed=stable_seed(m.seed, "train", key.slug))
        _save_model(model, layout.model(key))
        return None
    except Exception as exc:  # cell isolation
        _write_json(layout.model_error(key), {"error": _err(exc)})
        return {"phase": "train", "unit": key.slug, "error": _err(exc)}


def _nonmath_models(m: RunManifest, layout: Layout, task: str, source: str) -> list:
    out = []
    for balance in m.balances:
        for arch in m.architectures:
            k = ModelKey(DatasetKey(task, source, balance), arch)
            if not layout.model_error(k).exists():
                out.append(_require_model(layout, k))
    if not out:
        raise CellError(f"no baseline model available for {task}/{source}")
    return out


def _tune_unit(args):
    m, layout, kind, key_str, target = args
    cfg = m.attack(kind)
    path = layout.tuning(kind, key_str)
    seed = stable_seed(m.seed, "tune", kind, key_str)
    try:
        if isinstance(target, SourceModelKey):
            tuning_set = _load_bundle(str(layout.bundle(target.dataset)), target.dataset).val
            scorer = _require_model(layout, target.model_key)
            if cfg.grid:
                spec = tune_attack(kind, scorer, tuning_set, cfg.grid_points(), m.ssim_floor, seed=seed,
                                   source_key=target, base_params=cfg.params)
            else:
                spec = AttackSpec(kind, dict(cfg.params), source=target)
        else:
            task, source = target
            d0 = _image_dataset(m, task, source)
            tuning_set = _load_bundle(str(layout.bundle(d0)), d0).val
            if cfg.grid:
                spec = tune_attack(kind, _nonmath_models(m, layout, task, source), tuning_set, cfg.grid_points(),
                                   m.ssim_floor, seed=seed, base_params=cfg.params)
            else:
                spec = AttackSpec(kind, dict(cfg.params))
        _write_json(path, spec_to_dict(spec))
        return None
    except Exception as exc:
        _write_json(path, {"error": _err(exc)})
        return {"phase": "tune", "unit": f"{kind}/{key_str}", "error": _err(exc)}


def _eval_pool_unit(args):
    m, layout, kind, key_str, target = args
    path = layout.eval_pool(kind, key_str)
    try:
        spec = _load_spec(layout.tuning(kind, key_str))
        if isinstance(target, SourceModelKey):
            clean = _load_bundle(str(layout.bundle(target.dataset)), target.dataset).test
            models = {target.slug: _require_model(layout, target.model_key)}
        else:
            d0 = _image_dataset(m, *target)
            clean = _load_bundle(str(layout.bundle(d0)), d0).test
            models = {}
        pool = build_adv_pool(clean, [spec], models, seed=stable_seed(m.seed, "eval-pool", kind, key_str))
        _save_pool(pool, path)
        return None
    except Exception as exc:
        _save_pool_error(path, _err(exc))
        return {"phase": "pools", "unit": f"eval/{kind}/{key_str}", "error": _err(exc)}


def _train_pool_unit(args):
    m, layout, dataset, spec = args
    path = layout.train_pool(dataset, spec)
    try:
        val = _load_bundle(str(layout.bundle(dataset)), dataset).val
        models = {}
        if spec.source is not None:
            models[spec.source.slug] = _require_model(layout, spec.source.model_key)
        pool = build_adv_pool(val, [spec], models, seed=stable_seed(m.seed, "train-pool", dataset.slug, spec_id(spec)))
        _save_pool(pool, path)
        return None
    except Exception as exc:
        _save_pool_error(path, _err(exc))
        return {"phase": "pools", "unit": f"train/{dataset.slug}/{spec_id(spec)}", "error": _err(exc)}


def _strategy_unit(args):
    m, layout, target, specs = args
    try:
        bundle = _load_bundle(str(layout.bundle(target.dataset)), target.dataset)
        pool = None
        if specs:
            pool = AdversarialPool.concat([_load_pool(layout.train_pool(target.dataset, s)) for s in specs])
        strategy = _strategy(m, target.strategy)
        own = SourceModelKey(target.dataset, target.arch)
        siblings = [SourceModelKey(target.dataset, a).slug for a in m.architectures if a != target.arch]
        if strategy.id == "Curriculum":
            slices = [PoolSlice("FGSM", own.slug)]
        else:
            slices = strategy_slices(strategy.id, own.slug, siblings if strategy.id == "Surrogate" else ())
        # same initialization as the baseline so each defended model pairs with its reference
        model = build(target.arch, m.img_size, seed=stable_seed(m.seed, "init", own.slug), key=target, hyper=m.hyper)
        model = train_with_strategy(strategy, model, bundle, pool, m.hyper,
                                    seed=stable_seed(m.seed, "train", target.slug), slices=slices)
        _save_model(model, layout.model(target))
        return None
    except Exception as exc:
        _write_json(layout.model_error(target), {"error": _err(exc)})
        return {"phase": "strategies", "unit": target.slug, "error": _err(exc)}


def _strategy(m: RunManifest, sid: str) -> TrainingStrategy:
    return TrainingStrategy(sid, schedule=m.schedule if sid in ("Curriculum", "Adaptive") else None)


def _victim_record(base: dict, victim: ModelKey, layout: Layout, clean, x_adv) -> dict:
    try:
        model = _require_model(layout, victim)
        r = asr(model.predict(clean.images), model.predict(x_adv), clean.labels)
    except (CellError, UndefinedASRError) as exc:
        return _error_record(base, victim, exc, n_images=len(clean))
    return dict(base, **_victim_fields(victim), status="ok", error=None, n_images=len(clean),
                n_clean_correct=r.n_clean_correct, n_flipped=r.n_flipped, asr=r.asr, severity=r.severity,
                timestamp=_now())


def _victim_fields(victim: ModelKey) -> dict:
    return dict(victim=victim.slug, victim_source=victim.dataset.source, victim_balance=victim.dataset.balance,
                victim_arch=victim.arch, victim_strategy=victim.strategy)


def _error_record(base: dict, victim: ModelKey, exc: BaseException, n_images=None) -> dict:
    return dict(base, **_victim_fields(victim), status="error", error=_err(exc), n_images=n_images,
                n_clean_correct=None, n_flipped=None, asr=None, severity=None, timestamp=_now())


def _evaluate_unit(args):
    """One attacker (math source model or non-math image source) against pending victims."""
    m, layout, kind, key_str, attacker, cells = args
    records = []
    try:
        pool = _load_pool(layout.eval_pool(kind, key_str))
        spec = _load_spec(layout.tuning(kind, key_str))
        failure = None
    except CellError as exc:
        pool, spec, failure = None, None, exc
    for cell in cells:
        base = {"cell": cell.cell_id, "task": cell.task, "attack": kind,
                "params": spec.params if spec else None, "tuned": spec.tuned if spec else None}
        if isinstance(cell, MathCell):
            label = classify_case((cell.source.dataset, cell.source.arch), (cell.victim.dataset, cell.victim.arch))
            base.update(kind="math", source=cell.source.slug, image_source=cell.source.dataset.source,
                        case=label.case, source_match=label.source_match, arch_match=label.arch_match,
                        balance_match=label.balance_match)
        else:
            base.update(kind="nonmath", source=None, image_source=cell.image_source,
                        case=nonmath_bucket(cell.image_source, cell.victim.dataset.source),
                        source_match=cell.image_source == cell.victim.dataset.source,
                        arch_match=None, balance_match=None)
        if failure is not None:
            records.append(_error_record(base, cell.victim, failure))
            continue
        try:
            clean = _clean_images(m, layout, cell, pool)
        except CellError as exc:
            records.append(_error_record(base, cell.victim, exc))
            continue
        records.append(_victim_record(base, cell.victim, layout, clean, pool.images))
    return records


def _clean_images(m: RunManifest, layout: Layout, cell, pool: AdversarialPool):
    """Clean counterparts of the pool rows: the attacker's test split, in pool order."""
    d = cell.source.dataset if isinstance(cell, MathCell) else _image_dataset(m, cell.task, cell.image_source)
    test = _load_bundle(str(layout.bundle(d)), d).test
    if test.ids != pool.clean_ids:
        raise CellError(f"evaluation pool out of sync with the test split of {d.slug}")
    return test


def _image_dataset(m: RunManifest, task: str, source: str) -> DatasetKey:
    """Dataset whose test images feed non-math attacks for (task, source)."""
    return DatasetKey(task, source, m.balances[0])


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _run_units(stats: RunStats, phase: str, fn, items: list, workers: int) -> None:
    for item, result in zip(items, _imap(fn, items, workers)):
        if phase == "datagen":
            stats.computed[phase] += result[0]
            continue
        stats.computed[phase] += 1
        if result is not None:
            stats.errors.append(result)
            log.warning("%s failed: %s", result["unit"], result["error"])


def _math_key(src: SourceModelKey) -> str:
    return src.slug


def _nonmath_key(task: str, source: str) -> str:
    return f"{task}-{source}"


def run(manifest: RunManifest, out=None, workers: int = 1, phases=PHASES, max_cells: int | None = None) -> RunStats:
    """Execute (or resume) ``manifest`` up to and including ``phases``."""
    root = Path(out or manifest.output_dir or "runs/" + manifest.name)
    layout = Layout(root)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "manifest.json", manifest.to_dict())
    grid = enumerate_grid(manifest)
    stats = RunStats()
    m = manifest
    _load_model.cache_clear()
    _load_bundle.cache_clear()

    if "datagen" in phases:
        todo = [(m, layout, t, s) for t in m.tasks for s in m.sources
                if any(not layout.bundle(DatasetKey(t, s, b)).exists() for b in m.balances)]
        _run_units(stats, "datagen", _datagen_unit, todo, workers)

    if "train" in phases:
        todo = [(m, layout, s) for s in grid.source_models if not _model_done(layout, s.model_key)]
        _run_units(stats, "train", _baseline_unit, todo, workers)

    nonmath_targets = [(t, s) for t in m.tasks for s in m.sources]
    if "tune" in phases:
        todo = [(m, layout, a.kind, _math_key(s), s) for a in m.math_attacks for s in grid.source_models]
        todo += [(m, layout, a.kind, _nonmath_key(*ts), ts) for a in m.nonmath_attacks for ts in nonmath_targets]
        todo = [u for u in todo if not layout.tuning(u[2], u[3]).exists()]
        _run_units(stats, "tune", _tune_unit, todo, workers)

    train_specs = _training_specs(m, grid, layout) if {"pools", "strategies"} & set(phases) else {}
    if "pools" in phases:
        todo = [(m, layout, a.kind, _math_key(s), s) for a in m.math_attacks for s in grid.source_models]
        todo += [(m, layout, a.kind, _nonmath_key(*ts), ts) for a in m.nonmath_attacks for ts in nonmath_targets]
        todo = [u for u in todo if not _pool_done(layout.eval_pool(u[2], u[3]))]
        _run_units(stats, "pools", _eval_pool_unit, todo, workers)
        unique = {}
        for target in grid.targets:
            for s in train_specs.get(target.slug, ()):
                unique.setdefault((target.dataset, spec_id(s)), (target.dataset, s))
        todo = [(m, layout, d, s) for (d, _), (_, s) in sorted(unique.items(), key=lambda kv: (kv[0][0].slug, kv[0][1]))
                if not _pool_done(layout.train_pool(d, s))]
        _run_units(stats, "pools", _train_pool_unit, todo, workers)

    if "strategies" in phases:
        todo = [(m, layout, t, train_specs[t.slug]) for t in grid.targets
                if t.strategy != "Base" and not _model_done(layout, t)]
        _run_units(stats, "strategies", _strategy_unit, todo, workers)

    if "evaluate" in phases:
        store = ResultStore(layout.store)
        units = _evaluation_units(m, layout, grid, store, max_cells)
        stats.interrupted = max_cells is not None and sum(len(u[-1]) for u in units) < _pending(grid, store)
        for records in _imap(_evaluate_unit, units, workers):
            stats.computed["evaluate"] += store.append(records)
            stats.errors.extend({"phase": "evaluate", "unit": r["cell"], "error": r["error"]}
                                for r in records if r["status"] == "error")
    return stats


def _pending(grid: Grid, store: ResultStore) -> int:
    return sum(c.cell_id not in store for c in grid.math_cells + grid.nonmath_cells)


def _evaluation_units(m: RunManifest, layout: Layout, grid: Grid, store: ResultStore, max_cells: int | None):
    groups: dict[tuple, list] = defaultdict(list)
    order = []
    budget = max_cells if max_cells is not None else float("inf")
    for cell in grid.math_cells + grid.nonmath_cells:
        if cell.cell_id in store:
            continue
        if budget <= 0:
            break
        budget -= 1
        if isinstance(cell, MathCell):
            key = (cell.attack, _math_key(cell.source), cell.source)
        else:
            key = (cell.attack, _nonmath_key(cell.task, cell.image_source), (cell.task, cell.image_source))
        if key not in groups:
            order.append(key)
        groups[key].append(cell)
    return [(m, layout, kind, key_str, attacker, groups[(kind, key_str, attacker)]) for kind, key_str, attacker in order]


def _training_specs(m: RunManifest, grid: Grid, layout: Layout) -> dict[str, list[AttackSpec]]:
    """Pool specs per non-Base target, with transforms at their tuned strengths."""
    out = {}
    for t in grid.targets:
        if t.strategy == "Base":
            continue
        own = SourceModelKey(t.dataset, t.arch)
        siblings = [SourceModelKey(t.dataset, a) for a in m.architectures if a != t.arch]
        out[t.slug] = training_pool_specs(_strategy(m, t.strategy), own, siblings,
                                     _nonmath_training_specs(m, layout, t.dataset))
    return out


def _nonmath_training_specs(m: RunManifest, layout: Layout, d: DatasetKey) -> dict[str, AttackSpec]:
    specs = {k: AttackSpec(k, dict(p)) for k, p in DEFAULT_NONMATH_PARAMS.items()}
    for a in m.nonmath_attacks:
        path = layout.tuning(a.kind, _nonmath_key(d.task, d.source))
        if path.exists():
            doc = json.loads(path.read_text())
            if "error" not in doc:
                specs[a.kind] = AttackSpec(a.kind, doc["params"])
    return specs
