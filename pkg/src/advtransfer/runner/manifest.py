"""Run manifest: the YAML document that fully determines an experiment run."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..attacks import GRADIENT_KINDS, NONMATH_KINDS, STRENGTH_PARAM, normalize_grid
from ..data import BALANCES, SOURCES, TASKS
from ..defense import EpsSchedule
from ..models import ARCHITECTURES, STRATEGY_IDS, Hyper

# Fixed strengths for transforms that strategies need but the manifest does not tune.
DEFAULT_NONMATH_PARAMS = {
    "GaussianNoise": {"sigma": 0.05}, "Grayscale": {}, "BoxBlur": {"radius": 1},
    "SaltPepper": {"density": 0.05}, "RandomBlackBox": {"patch": 8}, "Invert": {},
}
WEIGHTINGS = ("cell", "scenario")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    grid: tuple = ()  # tuning grid, ascending strength; empty = apply ``params`` as-is
    params: dict = field(default_factory=dict)  # fixed extra parameters (steps, max_queries, ...)

    @property
    def is_math(self) -> bool:
        return self.kind in GRADIENT_KINDS

    def grid_points(self) -> list[dict]:
        return normalize_grid(self.kind, self.grid)


@dataclass(frozen=True)
class RunManifest:
    name: str = "run"
    seed: int = 0
    output_dir: str | None = None
    tasks: tuple = ("TaskBM",)
    sources: tuple = SOURCES
    architectures: tuple = ARCHITECTURES
    balances: tuple = tuple(BALANCES)
    strategies: tuple = STRATEGY_IDS
    attacks: tuple = ()
    n_per_class: int = 100
    img_size: int = 32
    fractions: tuple = (0.6, 0.2, 0.2)
    hyper: Hyper = field(default_factory=Hyper)
    schedule: EpsSchedule = field(default_factory=EpsSchedule)
    ssim_floor: float = 0.4
    weighting: str = "cell"
    min_severity: int = 2

    def __post_init__(self):
        for name, allowed in (("tasks", TASKS), ("sources", SOURCES), ("architectures", ARCHITECTURES),
                              ("balances", BALANCES), ("strategies", STRATEGY_IDS)):
            values = getattr(self, name)
            if not values:
                raise ManifestError(f"grid dimension {name!r} is empty")
            unknown = [v for v in values if v not in allowed]
            if unknown:
                raise ManifestError(f"unknown {name}: {unknown}")
            if len(set(values)) != len(values):
                raise ManifestError(f"duplicate entries in {name}: {list(values)}")
        if not self.attacks:
            raise ManifestError("attack list is empty")
        kinds = [a.kind for a in self.attacks]
        if len(set(kinds)) != len(kinds):
            raise ManifestError(f"duplicate attacks: {kinds}")
        if "Base" not in self.strategies:
            raise ManifestError("strategies must include Base: it is the reference for AMR")
        if "Surrogate" in self.strategies and len(self.architectures) != 3:
            raise ManifestError("Surrogate needs all three architectures in the grid")
        if self.weighting not in WEIGHTINGS:
            raise ManifestError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.n_per_class < 50:
            raise ManifestError(f"data.n_per_class must be >= 50, got {self.n_per_class}")
        if self.img_size < 16:
            raise ManifestError(f"data.img_size must be >= 16, got {self.img_size}")
        if not 1 <= self.min_severity <= 5:
            raise ManifestError(f"min_severity must lie in 1..5, got {self.min_severity}")

    @property
    def math_attacks(self) -> list[AttackConfig]:
        return [a for a in self.attacks if a.is_math]

    @property
    def nonmath_attacks(self) -> list[AttackConfig]:
        return [a for a in self.attacks if not a.is_math]

    def attack(self, kind: str) -> AttackConfig | None:
        return next((a for a in self.attacks if a.kind == kind), None)

    def with_overrides(self, **kw) -> "RunManifest":
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update({k: v for k, v in kw.items() if v is not None})
        return RunManifest(**data)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["attacks"] = {a.kind: {"grid": list(a.grid), "params": dict(a.params)} for a in self.attacks}
        d["hyper"], d["schedule"] = asdict(self.hyper), asdict(self.schedule)
        for k in ("tasks", "sources", "architectures", "balances", "strategies", "fractions"):
            d[k] = list(d[k])
        return d


def _attack_configs(raw: Any) -> tuple[AttackConfig, ...]:
    if isinstance(raw, list):
        raw = {k: {} for k in raw}
    if not isinstance(raw, dict):
        raise ManifestError("attacks must be a mapping of kind -> {grid, params} or a list of kinds")
    out = []
    for kind, cfg in raw.items():
        if kind not in GRADIENT_KINDS + NONMATH_KINDS:
            raise ManifestError(f"unknown attack {kind!r}")
        cfg = cfg or {}
        extra = set(cfg) - {"grid", "params"}
        if extra:
            raise ManifestError(f"attack {kind}: unknown keys {sorted(extra)}")
        grid = tuple(cfg.get("grid") or ())
        if grid and STRENGTH_PARAM[kind] is None and not all(isinstance(g, dict) for g in grid):
            raise ManifestError(f"attack {kind} has no strength parameter; grid entries must be mappings")
        params = dict(cfg.get("params") or {})
        if not grid and not params:
            if kind in GRADIENT_KINDS:
                raise ManifestError(f"attack {kind}: give a tuning grid or fixed params")
            params = dict(DEFAULT_NONMATH_PARAMS[kind])
        out.append(AttackConfig(kind, grid, params))
    return tuple(out)


_TOP_KEYS = {"name", "seed", "output_dir", "tasks", "sources", "architectures", "balances", "strategies",
             "attacks", "data", "train", "schedule", "tuning", "aggregation"}


def manifest_from_dict(doc: dict) -> RunManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    data = doc.get("data") or {}
    agg = doc.get("aggregation") or {}
    try:
        hyper = Hyper(**(doc.get("train") or {}))
        schedule = EpsSchedule(**(doc.get("schedule") or {}))
    except TypeError as exc:
        raise ManifestError(str(exc)) from exc
    kw = dict(
        name=doc.get("name", "run"), seed=int(doc.get("seed", 0)), output_dir=doc.get("output_dir"),
        attacks=_attack_configs(doc.get("attacks") or {}),
        n_per_class=int(data.get("n_per_class", 100)), img_size=int(data.get("img_size", 32)),
        fractions=tuple(data.get("fractions", (0.6, 0.2, 0.2))), hyper=hyper, schedule=schedule,
        ssim_floor=float((doc.get("tuning") or {}).get("ssim_floor", 0.4)),
        weighting=agg.get("weighting", "cell"), min_severity=int(agg.get("min_severity", 2)),
    )
    for dim in ("tasks", "sources", "architectures", "balances", "strategies"):
        if dim in doc:
            kw[dim] = tuple(doc[dim] or ())
    return RunManifest(**kw)


def load_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path}: invalid YAML: {exc}") from exc
    return manifest_from_dict(doc)
