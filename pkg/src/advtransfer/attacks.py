"""Gradient-based and model-agnostic evasion attacks, SSIM, SSIM-gated tuning and
adversarial pools.

Update rules follow the original formulations of each attack (FGSM, BIM, PGD,
R+FGSM, DeepFool for the binary case, translation-invariant FGSM, L-inf Square
random search). All results are clipped to [0, 1] and, for the L-inf attacks,
projected onto the eps-ball around the clean input.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .data import DatasetKey, LabeledImageSet
from .metrics import UndefinedASRError, asr
from .models import Classifier, ModelKey
from .seeding import stable_seed

GRADIENT_KINDS = ("FGSM", "BIM", "PGD", "RFGSM", "DeepFool", "TIFGSM", "Square")
NONMATH_KINDS = ("GaussianNoise", "Grayscale", "BoxBlur", "SaltPepper", "RandomBlackBox", "Invert")
ITERATIVE_KINDS = ("BIM", "PGD", "RFGSM", "TIFGSM")
EPS_BOUNDED = ("FGSM", "BIM", "PGD", "RFGSM", "TIFGSM", "Square")
ALL_KINDS = GRADIENT_KINDS + NONMATH_KINDS

# parameter that controls attack strength; None for parameter-free transforms
STRENGTH_PARAM = {
    "FGSM": "eps", "BIM": "eps", "PGD": "eps", "RFGSM": "eps", "TIFGSM": "eps", "Square": "eps",
    "DeepFool": "overshoot", "GaussianNoise": "sigma", "BoxBlur": "radius",
    "SaltPepper": "density", "RandomBlackBox": "patch", "Grayscale": None, "Invert": None,
}
NONNEGATIVE_PARAMS = ("eps", "sigma", "density", "radius", "overshoot", "prestep", "patch")

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class AttackError(RuntimeError):
    pass


class DegenerateBoundaryError(AttackError):
    pass


class TuningError(AttackError):
    pass


@dataclass(frozen=True, order=True)
class SourceModelKey:
    """A baseline-trained model used to craft gradient-based attacks."""

    dataset: DatasetKey
    arch: str

    @property
    def model_key(self) -> ModelKey:
        return ModelKey(self.dataset, self.arch, "Base")

    @property
    def slug(self) -> str:
        return self.model_key.slug


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    tuned: bool = False
    source: SourceModelKey | None = None
    tuning: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind in GRADIENT_KINDS and self.source is None:
            raise ValueError(f"{self.kind} requires a source model")
        if self.kind in NONMATH_KINDS and self.source is not None:
            raise ValueError(f"{self.kind} is model-agnostic and takes no source model")
        for name in NONNEGATIVE_PARAMS:
            if name in self.params and self.params[name] < 0:
                raise ValueError(f"{self.kind}: parameter {name} must be >= 0, got {self.params[name]}")

    @property
    def strength(self):
        name = STRENGTH_PARAM[self.kind]
        return self.params.get(name) if name else None


# ---------------------------------------------------------------------------
# Gradient attacks
# ---------------------------------------------------------------------------

def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _input_grad(model: Classifier, x, y) -> np.ndarray:
    try:
        _, g = model.input_gradient(x, y)
    except (AttributeError, NotImplementedError) as exc:
        raise AttackError(f"gradient unavailable for {type(model).__name__}") from exc
    return g


def fgsm(model: Classifier, x, y, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    return np.clip(x + eps * np.sign(_input_grad(model, x, y)), 0.0, 1.0)


def gaussian_kernel(size: int, nsig: float = 3.0) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"translation-invariant kernel size must be odd, got {size}")
    t = np.linspace(-nsig, nsig, size)
    k1 = np.exp(-t ** 2 / 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def _smooth(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n, c, h, w = g.shape
    k = kernel.shape[0]
    out = nx.conv2d(g.reshape(n * c, 1, h, w), kernel[None, None], np.zeros(1), padding=k // 2)
    return out.data.reshape(n, c, h, w)


def iterative_attack(kind: str, model: Classifier, x, y, eps: float, alpha: float | None = None,
                     steps: int = 10, extra: Mapping | None = None, seed: int = 0) -> np.ndarray:
    """BIM, PGD, R+FGSM and TI-FGSM under one L-inf projected-sign loop.

    ``extra`` carries ``prestep`` (R+FGSM random step, default eps/2) and
    ``kernel_size`` (TI-FGSM smoothing kernel, odd, default 5).
    """
    if kind not in ITERATIVE_KINDS:
        raise ValueError(f"{kind} is not an iterative attack")
    extra = dict(extra or {})
    kernel = gaussian_kernel(int(extra.get("kernel_size", 5))) if kind == "TIFGSM" else None
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    if alpha is None:
        alpha = eps / 4 or eps  # eps/4 underflows for subnormal eps
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")

    rng = np.random.default_rng(stable_seed("iterative", kind, seed))
    x_adv = x.copy()
    if kind == "PGD":
        x_adv = _project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
    elif kind == "RFGSM":
        prestep = float(extra.get("prestep", eps / 2))
        x_adv = _project(x + prestep * np.sign(rng.standard_normal(size=x.shape)), x, eps)

    for _ in range(steps):
        g = _input_grad(model, x_adv, y)
        if kernel is not None:
            g = _smooth(g, kernel)
        x_adv = _project(x_adv + alpha * np.sign(g), x, eps)
    return x_adv


def deepfool(model: Classifier, x, overshoot: float = 0.02, max_iter: int = 50, y=None) -> np.ndarray:
    """Binary DeepFool on the logit difference f = z1 - z0.

    Each iteration adds r = -f(x) grad f / ||grad f||^2 to the accumulated
    perturbation; the candidate is x + (1 + overshoot) * r_total. Samples stop
    once their predicted label flips. Samples already misclassified w.r.t.
    ``y`` are returned untouched.
    """
    if overshoot < 0:
        raise ValueError(f"overshoot must be >= 0, got {overshoot}")
    x = np.asarray(x, dtype=np.float64)
    f, _ = model.margin_gradient(x)
    orig = (f > 0).astype(np.int64)
    active = np.ones(len(x), dtype=bool) if y is None else orig == np.asarray(y)
    r_total = np.zeros_like(x)
    x_adv = x.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        f, g = model.margin_gradient(x_adv[idx])
        norms = np.sum(g.reshape(len(idx), -1) ** 2, axis=1)
        if np.any(norms == 0):
            raise DegenerateBoundaryError("degenerate boundary: zero gradient norm of the logit difference")
        r_total[idx] += (-f / norms).reshape(-1, *([1] * (x.ndim - 1))) * g
        x_adv[idx] = np.clip(x[idx] + (1 + overshoot) * r_total[idx], 0.0, 1.0)
        f_new, _ = model.margin_gradient(x_adv[idx])
        active[idx[(f_new > 0).astype(np.int64) != orig[idx]]] = False
    return x_adv


# ---------------------------------------------------------------------------
# Square attack (score-based black box)
# ---------------------------------------------------------------------------

class QueryOracle:
    """Probability-only view of a classifier; counts queried samples."""

    __slots__ = ("_fn", "n_queries")

    def __init__(self, predict_proba: Callable[[np.ndarray], np.ndarray]):
        self._fn = predict_proba
        self.n_queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.n_queries += len(x)
        return np.array(self._fn(np.array(x)), dtype=np.float64)


@dataclass
class SquareResult:
    x_adv: np.ndarray
    queries: np.ndarray  # per-sample query count
    loss_history: list[np.ndarray]  # per-sample accepted margins, in acceptance order


def _margin(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    logp = np.log(np.clip(probs, 1e-300, None))
    rows = np.arange(len(y))
    true = logp[rows, y]
    other = logp.copy()
    other[rows, y] = -np.inf
    return true - other.max(axis=1)


def _p_schedule(p_init: float, it: int, max_queries: int) -> float:
    it = int(it / max_queries * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32),
                       (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def square_attack_run(query_fn: Callable[[np.ndarray], np.ndarray], x, y, eps: float,
                      max_queries: int = 1000, p_init: float = 0.1, seed: int = 0) -> SquareResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, c, h, w = x.shape
    queries = np.zeros(n, dtype=np.int64)
    if max_queries <= 0 or eps == 0 or n == 0:
        return SquareResult(x.copy(), queries, [[] for _ in range(n)])
    rng = np.random.default_rng(stable_seed("square", seed))

    x_best = np.clip(x + eps * rng.choice([-1.0, 1.0], size=(n, c, 1, w)), 0.0, 1.0)
    margin = _margin(query_fn(x_best), y)
    queries += 1
    history = [[m] for m in margin]

    for it in range(1, max_queries):
        active = np.flatnonzero(margin > 0)
        if active.size == 0:
            break
        p = _p_schedule(p_init, it, max_queries)
        s = int(round(np.sqrt(p * h * w)))
        s = min(max(s, 1), h - 1, w - 1) if min(h, w) > 1 else 1
        delta = x_best[active] - x[active]
        for j in range(active.size):
            r0, c0 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
            delta[j, :, r0:r0 + s, c0:c0 + s] = eps * rng.choice([-1.0, 1.0], size=(c, 1, 1))
        cand = np.clip(x[active] + delta, 0.0, 1.0)
        new_margin = _margin(query_fn(cand), y[active])
        queries[active] += 1
        better = new_margin < margin[active]
        upd = active[better]
        x_best[upd] = cand[better]
        margin[upd] = new_margin[better]
        for i, m in zip(upd, new_margin[better]):
            history[i].append(m)
    return SquareResult(x_best, queries, [np.array(hh) for hh in history])


def square_attack(query_fn, x, y, eps: float, max_queries: int = 1000, p_init: float = 0.1,
                  seed: int = 0) -> np.ndarray:
    return square_attack_run(query_fn, x, y, eps, max_queries, p_init, seed).x_adv


# ---------------------------------------------------------------------------
# Model-agnostic transforms
# ---------------------------------------------------------------------------

def nonmath(kind: str, x, params: Mapping | None = None, seed: int = 0) -> np.ndarray:
    params = dict(params or {})
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    rng = np.random.default_rng(stable_seed("nonmath", kind, seed))
    if kind == "GaussianNoise":
        out = x + rng.normal(0.0, float(params.get("sigma", 0.1)), size=x.shape)
    elif kind == "Grayscale":
        y = np.tensordot(LUMA, x, axes=([0], [1])) if c == 3 else x.mean(axis=1)
        out = np.repeat(y[:, None], c, axis=1)
    elif kind == "BoxBlur":
        r = int(params.get("radius", 1))
        if r == 0:
            out = x.copy()
        else:
            padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
            out = sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(2, 3)).mean(axis=(-1, -2))
    elif kind == "SaltPepper":
        p = float(params.get("density", 0.05))
        hit = rng.random((n, 1, h, w)) < p
        salt = rng.random((n, 1, h, w)) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), x)
    elif kind == "RandomBlackBox":
        s = int(params.get("patch", 8))
        if s > h or s > w:
            raise ValueError(f"patch {s} larger than image {h}x{w}")
        out = x.copy()
        for i in range(n):
            r0, c0 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
            out[i, :, r0:r0 + s, c0:c0 + s] = 0.0
    elif kind == "Invert":
        out = 1.0 - x
    else:
        raise ValueError(f"unknown non-mathematical attack {kind!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=([0], [0]))
    if img.shape[0] == 1:
        return img[0]
    raise ValueError(f"unsupported channel count {img.shape[0]}")


def ssim_batch(a, b) -> np.ndarray:
    """Per-image SSIM over (N, C, H, W) batches; see :func:`ssim`."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    ya = np.tensordot(a, LUMA, axes=([1], [0])) if a.shape[1] == 3 else a[:, 0]
    yb = np.tensordot(b, LUMA, axes=([1], [0])) if b.shape[1] == 3 else b[:, 0]
    if ya.shape[-1] < SSIM_WINDOW or ya.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {ya.shape[-2:]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(ya, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
    wb = sliding_window_view(yb, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-1, -2))
    var_b = (db * db).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    smap = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return smap.mean(axis=(1, 2))


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) of the luminance channel, L = 1."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(ssim_batch(a[None], b[None])[0])


# ---------------------------------------------------------------------------
# Dispatch, tuning, pools
# ---------------------------------------------------------------------------

def apply_attack(spec: AttackSpec, x, y, model: Classifier | None = None, seed: int = 0) -> np.ndarray:
    """Run ``spec`` on a batch. Gradient kinds need ``model`` (the source model)."""
    p = spec.params
    if spec.kind in NONMATH_KINDS:
        return nonmath(spec.kind, x, p, seed)
    if model is None:
        raise AttackError(f"{spec.kind} needs a source model")
    if spec.kind == "FGSM":
        return fgsm(model, x, y, p["eps"])
    if spec.kind in ITERATIVE_KINDS:
        return iterative_attack(spec.kind, model, x, y, p["eps"], p.get("alpha"), int(p.get("steps", 10)),
                                extra=p, seed=seed)
    if spec.kind == "DeepFool":
        return deepfool(model, x, p.get("overshoot", 0.02), int(p.get("max_iter", 50)), y=y)
    if spec.kind == "Square":
        return square_attack(QueryOracle(model.predict_proba), x, y, p["eps"],
                             int(p.get("max_queries", 1000)), p.get("p_init", 0.1), seed)
    raise AttackError(f"no dispatcher for {spec.kind}")


def normalize_grid(kind: str, grid: Iterable) -> list[dict]:
    """Accept scalars (the strength parameter) or full parameter dicts."""
    out = []
    for point in grid:
        if isinstance(point, Mapping):
            out.append(dict(point))
        else:
            name = STRENGTH_PARAM[kind]
            if name is None:
                raise ValueError(f"{kind} has no strength parameter; pass dicts")
            out.append({name: point})
    return out


def tune_attack(kind: str, source_model, tuning_set: LabeledImageSet, param_grid,
                ssim_floor: float = 0.4, seed: int = 0, source_key: SourceModelKey | None = None,
                base_params: Mapping | None = None) -> AttackSpec:
    """Pick the grid point with the highest ASR whose mean SSIM stays above the floor.

    Ties go to the weaker (earlier) grid point. ``tuning_set`` must be a
    validation split. Model-agnostic kinds may pass a sequence of models, in
    which case their ASRs are averaged.
    """
    grid = normalize_grid(kind, param_grid)
    if not grid:
        raise ValueError("param_grid must be non-empty")
    if tuning_set.role == "test":
        raise ValueError("tuning on the test split would leak into evaluation")
    scorers = list(source_model) if isinstance(source_model, (list, tuple)) else [source_model]
    if not scorers or any(m is None for m in scorers):
        raise ValueError(f"{kind}: tuning needs at least one model to score ASR")
    if kind in GRADIENT_KINDS:
        if len(scorers) != 1:
            raise ValueError(f"{kind}: gradient attacks are tuned against exactly one source model")
        if source_key is None:
            key = getattr(scorers[0], "key", None)
            if key is None:
                raise ValueError(f"{kind}: source_key required when the model carries no key")
            source_key = SourceModelKey(key.dataset, key.arch)
    else:
        source_key = None
    x, y = tuning_set.images, tuning_set.labels
    clean = [m.predict(x) for m in scorers]
    best, best_ssim, trials = None, -np.inf, []
    for point in grid:
        params = {**(base_params or {}), **point}
        spec = AttackSpec(kind, params, source=source_key)
        x_adv = apply_attack(spec, x, y, scorers[0], seed=stable_seed(seed, "tune", kind))
        mean_ssim = float(ssim_batch(x, x_adv).mean())
        rates = []
        for m, c in zip(scorers, clean):
            try:
                rates.append(asr(c, m.predict(x_adv), y).asr)
            except UndefinedASRError:
                rates.append(0.0)
        rate = float(np.mean(rates))
        trials.append({"params": params, "asr": rate, "ssim": mean_ssim})
        best_ssim = max(best_ssim, mean_ssim)
        if mean_ssim >= ssim_floor and (best is None or rate > best[1]):
            best = (params, rate, mean_ssim)
    if best is None:
        raise TuningError(f"{kind}: no grid point reaches SSIM >= {ssim_floor}; best SSIM found {best_ssim:.4f}")
    return AttackSpec(kind, best[0], tuned=True, source=source_key,
                      tuning={"asr": best[1], "ssim": best[2], "trials": trials})


@dataclass
class AdversarialPool:
    clean_ids: tuple[str, ...]
    labels: np.ndarray
    images: np.ndarray
    kinds: tuple[str, ...]
    params: tuple[dict, ...]
    sources: tuple[str, ...]  # source model slug, "" for model-agnostic kinds
    ssim: np.ndarray
    origin: str = "val"
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.origin not in ("val", "test"):
            raise ValueError(f"pool origin must be 'val' or 'test', got {self.origin!r}")
        if not self.seeds:
            self.seeds = (0,) * len(self.clean_ids)

    def __len__(self):
        return len(self.clean_ids)

    def take(self, idx) -> "AdversarialPool":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda seq: tuple(seq[i] for i in idx)  # noqa: E731
        return replace(self, clean_ids=pick(self.clean_ids), labels=self.labels[idx], images=self.images[idx],
                       kinds=pick(self.kinds), params=pick(self.params), sources=pick(self.sources),
                       ssim=self.ssim[idx], seeds=pick(self.seeds))

    def where(self, kind: str | None = None, source: str | None = None, **param_match) -> "AdversarialPool":
        keep = [i for i in range(len(self))
                if (kind is None or self.kinds[i] == kind)
                and (source is None or self.sources[i] == source)
                and all(np.isclose(self.params[i].get(k, np.nan), v) for k, v in param_match.items())]
        return self.take(keep)

    @staticmethod
    def concat(pools: Sequence["AdversarialPool"]) -> "AdversarialPool":
        pools = [p for p in pools if len(p)]
        if not pools:
            raise ValueError("nothing to concatenate")
        origins = {p.origin for p in pools}
        if len(origins) != 1:
            raise ValueError(f"cannot mix pool origins {origins}")
        return AdversarialPool(
            clean_ids=sum((p.clean_ids for p in pools), ()),
            labels=np.concatenate([p.labels for p in pools]),
            images=np.concatenate([p.images for p in pools]),
            kinds=sum((p.kinds for p in pools), ()),
            params=sum((p.params for p in pools), ()),
            sources=sum((p.sources for p in pools), ()),
            ssim=np.concatenate([p.ssim for p in pools]),
            origin=origins.pop(),
            seeds=sum((p.seeds for p in pools), ()),
        )

    def save(self, directory) -> Path:
        """``images.npz`` plus ``manifest.csv`` (row, clean_id, label, kind, params, source, ssim, seed)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(directory / "images.npz", images=self.images)
        with open(directory / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "clean_id", "label", "kind", "params", "source", "ssim", "seed", "origin"])
            for i in range(len(self)):
                writer.writerow([i, self.clean_ids[i], int(self.labels[i]), self.kinds[i],
                                 json.dumps(self.params[i], sort_keys=True), self.sources[i],
                                 repr(float(self.ssim[i])), self.seeds[i], self.origin])
        return directory

    @classmethod
    def load(cls, directory) -> "AdversarialPool":
        directory = Path(directory)
        with np.load(directory / "images.npz") as z:
            images = z["images"]
        with open(directory / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            clean_ids=tuple(r["clean_id"] for r in rows),
            labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
            images=images,
            kinds=tuple(r["kind"] for r in rows),
            params=tuple(json.loads(r["params"]) for r in rows),
            sources=tuple(r["source"] for r in rows),
            ssim=np.array([float(r["ssim"]) for r in rows]),
            origin=rows[0]["origin"] if rows else "val",
            seeds=tuple(int(r["seed"]) for r in rows),
        )


def build_adv_pool(clean: LabeledImageSet, specs: Iterable[AttackSpec],
                   models: Mapping[str, Classifier] | None = None, seed: int = 0) -> AdversarialPool:
    """Attack every clean image once per spec; specs usually span a parameter grid.

    ``models`` maps source-model slugs to the models named by gradient specs.
    """
    if len(clean) == 0:
        raise ValueError(f"empty {clean.role} split: nothing to attack")
    origin = "test" if clean.role == "test" else "val"
    models = models or {}
    parts = []
    for spec in specs:
        model = None
        if spec.source is not None:
            if spec.source.slug not in models:
                raise KeyError(f"source model {spec.source.slug} not provided")
            model = models[spec.source.slug]
        s = stable_seed(seed, spec.kind, json.dumps(spec.params, sort_keys=True),
                        spec.source.slug if spec.source else "")
        x_adv = apply_attack(spec, clean.images, clean.labels, model, seed=s)
        n = len(clean)
        parts.append(AdversarialPool(
            clean_ids=clean.ids, labels=clean.labels.copy(), images=x_adv,
            kinds=(spec.kind,) * n, params=(dict(spec.params),) * n,
            sources=(spec.source.slug if spec.source else "",) * n,
            ssim=ssim_batch(clean.images, x_adv), origin=origin, seeds=(s,) * n))
    if not parts:
        raise ValueError("no attack specs given")
    return AdversarialPool.concat(parts)


def spec_to_dict(spec: AttackSpec) -> dict:
    src = None
    if spec.source is not None:
        d = spec.source.dataset
        src = {"task": d.task, "source": d.source, "balance": d.balance, "arch": spec.source.arch}
    return {"kind": spec.kind, "params": dict(spec.params), "tuned": spec.tuned, "source": src,
            "tuning": spec.tuning}


def spec_from_dict(d: Mapping) -> AttackSpec:
    src = d.get("source")
    if src is not None:
        src = SourceModelKey(DatasetKey(src["task"], src["source"], src["balance"]), src["arch"])
    return AttackSpec(d["kind"], dict(d.get("params") or {}), bool(d.get("tuned")), src, dict(d.get("tuning") or {}))


def spec_id(spec: AttackSpec) -> str:
    """Short stable directory name for a spec's pool."""
    payload = json.dumps([spec.kind, spec.params, spec.source.slug if spec.source else ""], sort_keys=True)
    return f"{spec.kind}-{stable_seed(payload) % 16 ** 10:010x}"
