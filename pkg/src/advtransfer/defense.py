"""Training strategies: composing clean/adversarial training mixes and the
epsilon schedules for curriculum and adaptive adversarial training."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .attacks import NONMATH_KINDS, AdversarialPool, AttackSpec, SourceModelKey, fgsm
from .data import MAJORITY, MINORITY, LabeledImageSet, SplitBundle
from .models import STRATEGY_IDS, Hyper, ModelKey, TrainedModel, fit
from .seeding import stable_seed

FIXED_EPS = 0.2
DEFAULT_MIX = 0.2
CURRICULUM_LEVELS = 5
SCHEDULED = ("Curriculum", "Adaptive")


class LeakageError(ValueError):
    pass


class MissingPoolKindsError(ValueError):
    pass


@dataclass(frozen=True)
class EpsSchedule:
    eps_min: float = 0.05
    eps_max: float = 0.25
    mode: str = "linear-per-epoch"

    def __post_init__(self):
        if not 0 <= self.eps_min <= self.eps_max:
            raise ValueError(f"need 0 <= eps_min <= eps_max, got {self.eps_min}, {self.eps_max}")
        if self.mode not in ("fixed", "linear-per-epoch"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    def at(self, epoch: int, epochs: int) -> float:
        """eps_min + (eps_max - eps_min) * e / (E - 1); a one-epoch run uses eps_min."""
        if self.mode == "fixed":
            return self.eps_max
        if epochs <= 1:
            return self.eps_min
        return self.eps_min + (self.eps_max - self.eps_min) * epoch / (epochs - 1)

    def sequence(self, epochs: int) -> list[float]:
        return [self.at(e, epochs) for e in range(epochs)]

    def levels(self, n: int = CURRICULUM_LEVELS) -> list[float]:
        """The eps values at which offline curriculum pools are generated."""
        if self.mode == "fixed" or self.eps_min == self.eps_max:
            return [self.eps_max]
        return [float(v) for v in np.linspace(self.eps_min, self.eps_max, n)]


def snap(eps: float, levels) -> float:
    """Nearest pooled level; exact ties go to the lower level."""
    levels = sorted(levels)
    return min(levels, key=lambda v: (abs(v - eps), v))


@dataclass(frozen=True)
class TrainingStrategy:
    id: str
    schedule: EpsSchedule | None = None
    mix_fraction: float | None = None

    def __post_init__(self):
        if self.id not in STRATEGY_IDS:
            raise ValueError(f"unknown strategy {self.id!r}")
        if self.mix_fraction is None:
            object.__setattr__(self, "mix_fraction", 0.0 if self.id == "Base" else DEFAULT_MIX)
        if not 0 <= self.mix_fraction < 1:
            raise ValueError(f"mix_fraction must lie in [0, 1), got {self.mix_fraction}")
        if self.id in SCHEDULED and self.schedule is None:
            object.__setattr__(self, "schedule", EpsSchedule())

    def n_adversarial(self, n_clean: int) -> int:
        """Adversarial count so that it makes up ``mix_fraction`` of the final set."""
        # exact rational with half-up rounding, so 0.2 gives exactly a quarter of n_clean
        f = Fraction(str(self.mix_fraction))
        return math.floor(n_clean * f / (1 - f) + Fraction(1, 2))


STRATEGIES = {s: TrainingStrategy(s) for s in STRATEGY_IDS}


# ---------------------------------------------------------------------------
# Pool slices: which adversarial samples each strategy draws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolSlice:
    kind: str
    source: str | None = None  # source model slug; None matches any
    params: tuple = ()  # (name, value) pairs that must match

    def select(self, pool: AdversarialPool) -> np.ndarray:
        return np.array([i for i in range(len(pool))
                         if pool.kinds[i] == self.kind
                         and (self.source is None or pool.sources[i] == self.source)
                         and all(np.isclose(pool.params[i].get(k, np.nan), v) for k, v in self.params)],
                        dtype=np.int64)

    def describe(self) -> str:
        parts = [self.kind] + [f"{k}={v}" for k, v in self.params]
        if self.source:
            parts.append(f"from {self.source}")
        return " ".join(parts)


def strategy_slices(strategy_id: str, source: str | None = None, siblings=(), eps: float = FIXED_EPS) -> list[PoolSlice]:
    """Pool slices drawn in equal shares by the fixed-mix strategies.

    ``source`` is the slug of the baseline model of the same dataset and
    architecture; ``siblings`` are the baseline slugs of the other two
    architectures (Surrogate only).
    """
    at_eps = (("eps", eps),)
    if strategy_id in ("Base",) + SCHEDULED:
        return []
    if strategy_id in ("FGSM", "PGD"):
        return [PoolSlice(strategy_id, source, at_eps)]
    if strategy_id == "Ensemble":
        return [PoolSlice("FGSM", source, at_eps), PoolSlice("PGD", source, at_eps)]
    if strategy_id == "Surrogate":
        if len(siblings) != 2:
            raise ValueError(f"Surrogate needs the two sibling architectures, got {list(siblings)}")
        return [PoolSlice(kind, s, at_eps) for s in siblings for kind in ("FGSM", "PGD")]
    if strategy_id == "NonMathMix":
        return [PoolSlice(kind) for kind in NONMATH_KINDS]
    if strategy_id == "Gaussian":
        return [PoolSlice("GaussianNoise")]
    if strategy_id == "SaltPepper":
        return [PoolSlice("SaltPepper")]
    raise ValueError(f"unknown strategy {strategy_id!r}")


def training_pool_specs(strategy: TrainingStrategy, own: SourceModelKey, siblings=(),
                        nonmath_specs: dict[str, AttackSpec] | None = None) -> list[AttackSpec]:
    """Attack specs whose validation-split pool feeds ``strategy``."""
    sid = strategy.id
    at = {"eps": FIXED_EPS}
    if sid == "Base" or sid == "Adaptive":
        return []
    if sid in ("FGSM", "PGD"):
        return [AttackSpec(sid, at, source=own)]
    if sid == "Ensemble":
        return [AttackSpec("FGSM", at, source=own), AttackSpec("PGD", at, source=own)]
    if sid == "Surrogate":
        return [AttackSpec(kind, at, source=s) for s in siblings for kind in ("FGSM", "PGD")]
    if sid == "Curriculum":
        return [AttackSpec("FGSM", {"eps": e}, source=own) for e in strategy.schedule.levels()]
    kinds = {"NonMathMix": NONMATH_KINDS, "Gaussian": ("GaussianNoise",), "SaltPepper": ("SaltPepper",)}[sid]
    nonmath_specs = nonmath_specs or {}
    return [nonmath_specs.get(k, AttackSpec(k)) for k in kinds]


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _class_targets(n_adv: int, labels: np.ndarray) -> dict[int, int]:
    """Split ``n_adv`` across classes in the clean-train proportion."""
    if n_adv == 0 or len(labels) == 0:
        return {MINORITY: 0, MAJORITY: 0}
    n_min = int(round(n_adv * np.mean(labels == MINORITY)))
    return {MINORITY: n_min, MAJORITY: n_adv - n_min}


def _equal_shares(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (i < extra) for i in range(k)]


def _allocate(shares: list[int], class_targets: dict[int, int]) -> list[dict[int, int]]:
    """Per-slice class counts that respect both slice sizes and class totals."""
    total = sum(shares)
    p_min = class_targets[MINORITY] / total if total else 0.0
    ideal = [s * p_min for s in shares]
    n_min = [int(np.floor(v)) for v in ideal]
    leftover = class_targets[MINORITY] - sum(n_min)
    for i in sorted(range(len(shares)), key=lambda i: (-(ideal[i] - n_min[i]), i))[:leftover]:
        n_min[i] += 1
    return [{MINORITY: m, MAJORITY: s - m} for s, m in zip(shares, n_min)]


def check_pool_leakage(pool: AdversarialPool, clean_train: LabeledImageSet, val_ids=None) -> None:
    if pool.origin != "val":
        raise LeakageError(f"adversarial training pool must come from the validation split, got {pool.origin!r}")
    overlap = set(pool.clean_ids) & set(clean_train.ids)
    if overlap:
        raise LeakageError(f"{len(overlap)} pool images are training images, e.g. {sorted(overlap)[0]}")
    if val_ids is not None:
        outside = set(pool.clean_ids) - set(val_ids)
        if outside:
            raise LeakageError(f"{len(outside)} pool images are not validation images, e.g. {sorted(outside)[0]}")


def compose_training_set(strategy: TrainingStrategy, clean_train: LabeledImageSet, adv_pool: AdversarialPool | None,
                         seed: int = 0, slices: list[PoolSlice] | None = None, val_ids=None) -> LabeledImageSet:
    """Clean training images plus the strategy's adversarial share.

    The adversarial part has round(f / (1 - f) * |clean|) images split equally
    across ``slices`` (defaults to :func:`strategy_slices` without source
    filtering) and stratified to the clean class proportions. Samples are drawn
    without replacement while the slice has enough images, with replacement
    otherwise. Adversarial images keep their clean labels.
    """
    if slices is None:
        slices = strategy_slices(strategy.id) if strategy.id not in SCHEDULED else []
    n_adv = strategy.n_adversarial(len(clean_train))
    if strategy.id == "Base" or n_adv == 0:
        return clean_train
    if not slices:
        raise ValueError(f"{strategy.id}: no pool slices to draw from")
    if adv_pool is None:
        raise MissingPoolKindsError(f"{strategy.id}: no adversarial pool given; needs "
                                    + ", ".join(s.describe() for s in slices))
    check_pool_leakage(adv_pool, clean_train, val_ids)

    selected = [s.select(adv_pool) for s in slices]
    missing = [s.describe() for s, idx in zip(slices, selected) if idx.size == 0]
    if missing:
        raise MissingPoolKindsError(f"{strategy.id}: adversarial pool lacks required kinds: {', '.join(missing)}")

    rng = np.random.default_rng(stable_seed("compose", strategy.id, seed))
    per_slice = _allocate(_equal_shares(n_adv, len(slices)), _class_targets(n_adv, clean_train.labels))
    chosen = []
    for s, idx, counts in zip(slices, selected, per_slice):
        for c, need in counts.items():
            if need == 0:
                continue
            cand = idx[adv_pool.labels[idx] == c]
            if cand.size == 0:
                raise MissingPoolKindsError(f"{strategy.id}: no class-{c} samples for {s.describe()}")
            chosen.append(rng.choice(cand, size=need, replace=need > cand.size))
    picked = adv_pool.take(np.concatenate(chosen))
    adv_ids = tuple(f"adv/{k}/{j}/{cid}" for j, (k, cid) in enumerate(zip(picked.kinds, picked.clean_ids)))
    return LabeledImageSet(
        images=np.concatenate([clean_train.images, picked.images]),
        labels=np.concatenate([clean_train.labels, picked.labels]),
        ids=clean_train.ids + adv_ids, role="train", seed=seed, source=clean_train.source,
    )


def adversarial_fraction(composed: LabeledImageSet) -> float:
    return sum(i.startswith("adv/") for i in composed.ids) / len(composed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _online_fgsm_set(strategy: TrainingStrategy, bundle: SplitBundle, model: TrainedModel, eps: float,
                     seed: int) -> LabeledImageSet:
    """Fresh FGSM images from the validation split against the current parameters."""
    clean, val = bundle.train, bundle.val
    targets = _class_targets(strategy.n_adversarial(len(clean)), clean.labels)
    rng = np.random.default_rng(stable_seed("online", seed))
    idx = []
    for c, need in targets.items():
        cand = np.flatnonzero(val.labels == c)
        if need and cand.size == 0:
            raise RuntimeError(f"online generation failed: validation split has no class-{c} images")
        if need:
            idx.append(rng.choice(cand, size=need, replace=need > cand.size))
    idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    try:
        x_adv = fgsm(model, val.images[idx], val.labels[idx], eps)
    except Exception as exc:  # surface as a generation failure with context
        raise RuntimeError(f"online generation failed at eps={eps}: {exc}") from exc
    ids = tuple(f"adv/FGSM/{j}/{val.ids[i]}" for j, i in enumerate(idx))
    return LabeledImageSet(np.concatenate([clean.images, x_adv]), np.concatenate([clean.labels, val.labels[idx]]),
                           clean.ids + ids, role="train", seed=seed, source=clean.source)


def train_with_strategy(strategy: TrainingStrategy, model: TrainedModel, bundle: SplitBundle,
                        adv_pool: AdversarialPool | None = None, hyper: Hyper | None = None, seed: int = 0,
                        slices: list[PoolSlice] | None = None) -> TrainedModel:
    """Train ``model`` from its initialization under ``strategy``.

    Curriculum draws its adversarial share per epoch from offline FGSM pools
    at the schedule's levels (nearest level to eps(e)); Adaptive regenerates
    it per epoch with FGSM against the parameters at the start of the epoch.
    The eps used in each epoch is recorded in the training history.
    """
    hyper = hyper or model.hyper
    if model.key is not None and model.key.strategy != strategy.id:
        model.key = replace(model.key, strategy=strategy.id)
    val_ids = bundle.val.ids

    if strategy.id not in SCHEDULED:
        train = compose_training_set(strategy, bundle.train, adv_pool, seed, slices, val_ids)
        return fit(model, train, bundle.val, hyper, seed=seed)

    schedule = strategy.schedule
    if schedule is None:
        raise ValueError(f"{strategy.id} requires an eps schedule")
    eps_seq = schedule.sequence(hyper.epochs)

    if strategy.id == "Curriculum":
        levels = schedule.levels()
        source = slices[0].source if slices else None
        cache: dict[float, LabeledImageSet] = {}

        def provider(epoch, _current):
            level = snap(eps_seq[epoch], levels)
            if level not in cache:
                cache[level] = compose_training_set(
                    strategy, bundle.train, adv_pool, stable_seed(seed, level),
                    [PoolSlice("FGSM", source, (("eps", level),))], val_ids)
            return cache[level]

        used = [snap(e, levels) for e in eps_seq]
    else:
        def provider(epoch, current):
            return _online_fgsm_set(strategy, bundle, current, eps_seq[epoch], stable_seed(seed, epoch))

        used = eps_seq

    model = fit(model, provider, bundle.val, hyper, seed=seed)
    for entry, eps in zip(model.history, used):
        entry["eps"] = eps
    return model


def strategy_model_key(base: ModelKey, strategy_id: str) -> ModelKey:
    return replace(base, strategy=strategy_id)
