"""Three small CNNs standing in for the plain / residual / deep architecture axis,
plus the nominal training loop, prediction and checkpointing."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import DatasetKey, LabeledImageSet, SplitBundle
from .metrics import f1_score
from .numerics import Tensor
from .seeding import stable_seed

log = logging.getLogger(__name__)

ARCHITECTURES = ("ArchPlain", "ArchResidual", "ArchDeep")
STRATEGY_IDS = ("Base", "FGSM", "PGD", "Ensemble", "Surrogate", "Curriculum",
                "Adaptive", "NonMathMix", "Gaussian", "SaltPepper")
N_CLASSES = 2
PREDICT_CHUNK = 256


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}".rstrip(": "))


@dataclass(frozen=True, order=True)
class ModelKey:
    dataset: DatasetKey
    arch: str
    strategy: str = "Base"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.strategy not in STRATEGY_IDS:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def slug(self) -> str:
        return f"{self.dataset.slug}-{self.arch}-{self.strategy}"

    def to_dict(self) -> dict:
        return {"task": self.dataset.task, "source": self.dataset.source, "balance": self.dataset.balance,
                "arch": self.arch, "strategy": self.strategy}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelKey":
        return cls(DatasetKey(d["task"], d["source"], d["balance"]), d["arch"], d.get("strategy", "Base"))


@dataclass
class Hyper:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9


# ---------------------------------------------------------------------------
# Layer plans
# ---------------------------------------------------------------------------

# (name, out_channels, kernel) convolution specs per architecture
_CONVS = {
    "ArchPlain": [("c1", 8, 5), ("c2", 16, 3)],
    "ArchResidual": [("c1", 8, 3), ("r1a", 8, 3), ("r1b", 8, 3), ("c2", 16, 3)],
    "ArchDeep": [("c1", 8, 3), ("c2", 8, 3), ("c3", 16, 3), ("c4", 16, 3)],
}

# The residual branch starts as the identity so early training sees the plain path.
_ZERO_INIT = {"r1b"}


def _head_inputs(arch: str, img_size: int) -> int:
    return 16 * (img_size // 4) ** 2


def init_params(arch: str, img_size: int, seed: int, in_channels: int = 3) -> dict[str, np.ndarray]:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if img_size < 16 or img_size % 4:
        raise ValueError(f"unsupported image size {img_size}: must be a multiple of 4 and >= 16")
    rng = np.random.default_rng(stable_seed("init", arch, img_size, seed))
    params = {}
    c_in = in_channels
    for name, c_out, k in _CONVS[arch]:
        fan_in = c_in * k * k
        params[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        if name in _ZERO_INIT:
            params[f"{name}.w"] *= 0.0
        params[f"{name}.b"] = np.zeros(c_out)
        c_in = c_out
    d = _head_inputs(arch, img_size)
    params["fc.w"] = rng.normal(0.0, 0.1 * np.sqrt(1.0 / d), size=(d, N_CLASSES))
    params["fc.b"] = np.zeros(N_CLASSES)
    return params


def _conv(x, p, name):
    w = p[f"{name}.w"]
    return nx.conv2d(x, w, p[f"{name}.b"], padding=w.shape[-1] // 2)


def _center(x):
    # [0, 1] pixels -> [-1, 1]
    return nx.add(nx.scale(x, 2.0), -np.ones(x.shape))


def forward_plain(x, p):
    x = _center(x)
    h = nx.max_pool2d(nx.relu(_conv(x, p, "c1")))
    h = nx.max_pool2d(nx.relu(_conv(h, p, "c2")))
    return nx.dense(nx.flatten(h), p["fc.w"], p["fc.b"])


def forward_residual(x, p):
    x = _center(x)
    h = nx.max_pool2d(nx.relu(_conv(x, p, "c1")))
    r = _conv(nx.relu(_conv(h, p, "r1a")), p, "r1b")
    h = nx.relu(nx.add(h, r))  # identity skip
    h = nx.max_pool2d(nx.relu(_conv(h, p, "c2")))
    return nx.dense(nx.flatten(h), p["fc.w"], p["fc.b"])


def forward_deep(x, p):
    x = _center(x)
    h = nx.relu(_conv(x, p, "c1"))
    h = nx.max_pool2d(nx.relu(_conv(h, p, "c2")))
    h = nx.relu(_conv(h, p, "c3"))
    h = nx.max_pool2d(nx.relu(_conv(h, p, "c4")))
    return nx.dense(nx.flatten(h), p["fc.w"], p["fc.b"])


FORWARD = {"ArchPlain": forward_plain, "ArchResidual": forward_residual, "ArchDeep": forward_deep}


# ---------------------------------------------------------------------------
# Classifier interface used by the attacks
# ---------------------------------------------------------------------------

class Classifier:
    """Anything with a differentiable ``forward`` returning (N, 2) logits."""

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(Tensor(x[i:i + PREDICT_CHUNK])).data for i in range(0, len(x), PREDICT_CHUNK)]
        return np.concatenate(out) if out else np.zeros((0, N_CLASSES))

    def predict_proba(self, x) -> np.ndarray:
        return nx.softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum, so ties go to class 0
        return self.logits(x).argmax(axis=1)

    def input_gradient(self, x, y) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient with respect to the input batch."""
        xt = Tensor(x, requires_grad=True)
        loss = nx.softmax_cross_entropy(self.forward(xt), y)
        return loss.item(), nx.grad(loss, [xt])[xt].numpy()

    def margin_gradient(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample logit difference f = z1 - z0 and its input gradient.

        Samples do not interact, so differentiating the batch sum yields the
        per-sample gradients.
        """
        xt = Tensor(x, requires_grad=True)
        f = nx.dense(self.forward(xt), np.array([[-1.0], [1.0]]), np.zeros(1))
        return f.data[:, 0].copy(), nx.grad(nx.total(f), [xt])[xt].numpy()


class LinearClassifier(Classifier):
    """Logits (0, w.x + b); the logit difference is exactly affine in x."""

    def __init__(self, w, b: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64).reshape(-1)
        self.b = float(b)

    def forward(self, x: Tensor) -> Tensor:
        flat = nx.flatten(x) if x.data.ndim > 2 else x
        w = np.zeros((self.w.size, N_CLASSES))
        w[:, 1] = self.w
        return nx.dense(flat, w, np.array([0.0, self.b]))


@dataclass
class TrainedModel(Classifier):
    arch: str
    params: dict[str, np.ndarray]
    img_size: int
    seed: int = 0
    key: ModelKey | None = None
    hyper: Hyper = field(default_factory=Hyper)
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    val_f1: float | None = None

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        if x.data.ndim != 4 or x.shape[2:] != (self.img_size, self.img_size):
            raise nx.ShapeError(f"{self.arch}.forward", x.shape, (None, 3, self.img_size, self.img_size))
        return FORWARD[self.arch](x, params if params is not None else self.params)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- persistence -------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "arch": self.arch, "img_size": self.img_size, "seed": self.seed,
            "key": self.key.to_dict() if self.key else None,
            "hyper": asdict(self.hyper), "history": self.history,
            "best_epoch": self.best_epoch, "val_f1": self.val_f1,
        }

    def save(self, path) -> Path:
        """Write ``<path>.npz`` (parameters) and ``<path>.json`` (metadata)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path.with_suffix(".npz"), **self.params)
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            params = {k: z[k].astype(np.float64) for k in z.files}
        return cls(arch=meta["arch"], params=params, img_size=meta["img_size"], seed=meta["seed"],
                   key=ModelKey.from_dict(meta["key"]) if meta["key"] else None,
                   hyper=Hyper(**meta["hyper"]), history=meta["history"],
                   best_epoch=meta["best_epoch"], val_f1=meta["val_f1"])


def build(arch: str, img_size: int = 32, seed: int = 0, key: ModelKey | None = None,
          hyper: Hyper | None = None) -> TrainedModel:
    return TrainedModel(arch=arch, params=init_params(arch, img_size, seed), img_size=img_size,
                        seed=seed, key=key, hyper=hyper or Hyper())


def predict(model: Classifier, images) -> tuple[np.ndarray, np.ndarray]:
    logits = model.logits(images)
    return logits.argmax(axis=1), nx.softmax(logits)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

TrainSource = LabeledImageSet | Callable[[int, TrainedModel], LabeledImageSet]


def fit(model: TrainedModel, train: TrainSource, val: LabeledImageSet, hyper: Hyper,
        seed: int = 0) -> TrainedModel:
    """SGD with momentum; keeps the parameters of the best validation-F1 epoch.

    ``train`` is either a fixed set or a callable ``(epoch, current_model)``
    returning that epoch's training set.
    """
    if hyper.epochs == 0:
        return model
    rng = np.random.default_rng(stable_seed("fit", seed))
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history, best = [], None
    for epoch in range(hyper.epochs):
        current = model if not callable(train) else _snapshot(model, params)
        data = train(epoch, current) if callable(train) else train
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            try:
                tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                loss = nx.softmax_cross_entropy(model.forward(Tensor(data.images[idx]), tp), data.labels[idx])
            except nx.NonFiniteError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            grads = nx.grad(loss, tp.values())
            for k, t in tp.items():
                velocity[k] = hyper.momentum * velocity[k] - hyper.lr * grads[t].data
                params[k] = params[k] + velocity[k]
            losses.append(loss.item() * len(idx))
        mean_loss = float(np.sum(losses) / len(order))
        if not np.isfinite(mean_loss) or not all(np.isfinite(v).all() for v in params.values()):
            raise TrainingDivergedError(epoch, f"loss={mean_loss}")
        val_f1 = f1_score(val.labels, _snapshot(model, params).predict(val.images))
        history.append({"epoch": epoch, "loss": mean_loss, "val_f1": val_f1})
        log.debug("%s epoch %d loss %.4f val_f1 %.4f", model.key.slug if model.key else model.arch,
                  epoch, mean_loss, val_f1)
        if best is None or val_f1 > best[0]:
            best = (val_f1, epoch, {k: v.copy() for k, v in params.items()})
    model.params = best[2]
    model.best_epoch, model.val_f1 = best[1], best[0]
    model.history = history
    model.hyper = hyper
    return model


def _snapshot(model: TrainedModel, params) -> TrainedModel:
    return TrainedModel(arch=model.arch, params=params, img_size=model.img_size, seed=model.seed, key=model.key)


def train_nominal(model: TrainedModel, bundle: SplitBundle, hyper: Hyper | None = None,
                  seed: int | None = None) -> TrainedModel:
    """Train on the clean training split, selecting the best validation-F1 epoch."""
    hyper = hyper or model.hyper
    return fit(model, bundle.train, bundle.val, hyper, seed=model.seed if seed is None else seed)
