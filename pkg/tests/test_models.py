import numpy as np
import pytest

from advtransfer import numerics as nx
from advtransfer.data import DatasetKey, generate, make_bundle
from advtransfer.metrics import f1_score
from advtransfer.models import (
    ARCHITECTURES, Hyper, LinearClassifier, ModelKey, TrainedModel, TrainingDivergedError, build, fit,
    predict, train_nominal,
)


@pytest.fixture(scope="module")
def easy_bundle():
    key = DatasetKey("TaskBM", "SourceA")
    return make_bundle(key, generate(key, 200, 32, seed=0), seed=0)


@pytest.fixture(scope="module")
def small_bundle():
    key = DatasetKey("TaskBM", "SourceA")
    return make_bundle(key, generate(key, 50, 16, seed=0), seed=0)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_build_is_deterministic(arch):
    a, b = build(arch, 32, seed=3), build(arch, 32, seed=3)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(arch, 32, seed=4)
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("size", [16, 32])
def test_forward_shapes_and_zero_input(arch, size):
    m = build(arch, size)
    logits = m.logits(np.zeros((3, 3, size, size)))
    assert logits.shape == (3, 2) and np.isfinite(logits).all()


def test_parameter_count_ordering():
    counts = {a: build(a, 32).n_parameters() for a in ARCHITECTURES}
    assert counts == {"ArchPlain": 3826, "ArchResidual": 4610, "ArchDeep": 6346}
    assert counts["ArchPlain"] < counts["ArchDeep"]


@pytest.mark.parametrize("size", [15, 18, 12])
def test_unsupported_size(size):
    with pytest.raises(ValueError, match="image size"):
        build("ArchPlain", size)


def test_forward_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        build("ArchDeep", 16).logits(np.zeros((1, 3, 32, 32)))


def test_unknown_arch():
    with pytest.raises(ValueError):
        build("ArchWide")


# -- predict -------------------------------------------------------------------

class FixedLogits(LinearClassifier):
    def __init__(self, logits):
        super().__init__(np.zeros(1))
        self._logits = np.asarray(logits, dtype=float)

    def logits(self, x):
        return self._logits


def test_tie_goes_to_class_zero():
    labels, probs = predict(FixedLogits([[0.0, 0.0]]), None)
    assert labels.tolist() == [0]
    assert probs.tolist() == [[0.5, 0.5]]


def test_confident_class_zero():
    assert predict(FixedLogits([[5.0, -5.0]]), None)[0].tolist() == [0]


def test_probabilities_sum_to_one():
    m = build("ArchResidual", 16, seed=1)
    x = np.random.default_rng(0).random((7, 3, 16, 16))
    labels, probs = predict(m, x)
    assert labels.shape == (7,)
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-9
    assert np.array_equal(labels, m.predict(x))


def test_linear_classifier_logit_difference_is_affine():
    w = np.array([1.0, -2.0, 0.5])
    m = LinearClassifier(w, b=0.25)
    x = np.array([[0.2, 0.1, 0.4]])
    f, g = m.margin_gradient(x)
    assert f[0] == pytest.approx(w @ x[0] + 0.25)
    assert np.allclose(g[0], w)


# -- training ------------------------------------------------------------------

def test_zero_epochs_returns_model_unchanged(small_bundle):
    m = build("ArchPlain", 16, seed=0)
    before = {k: v.copy() for k, v in m.params.items()}
    out = train_nominal(m, small_bundle, Hyper(epochs=0))
    assert out is m and out.history == []
    assert all(np.array_equal(before[k], out.params[k]) for k in before)


def test_training_is_deterministic(small_bundle):
    hyper = Hyper(epochs=2)
    a = train_nominal(build("ArchResidual", 16, seed=2), small_bundle, hyper)
    b = train_nominal(build("ArchResidual", 16, seed=2), small_bundle, hyper)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.history == b.history


def test_best_epoch_selection(small_bundle):
    m = train_nominal(build("ArchPlain", 16, seed=1), small_bundle, Hyper(epochs=4))
    assert len(m.history) == 4
    assert m.val_f1 == max(h["val_f1"] for h in m.history)
    assert m.history[m.best_epoch]["val_f1"] == m.val_f1
    # the kept parameters reproduce the recorded validation F1
    assert f1_score(small_bundle.val.labels, m.predict(small_bundle.val.images)) == m.val_f1
    assert all(np.isfinite(v).all() for v in m.params.values())


def test_divergence_names_epoch(small_bundle):
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            train_nominal(build("ArchPlain", 16, seed=0), small_bundle, Hyper(epochs=2, lr=1e300))


def test_fit_accepts_per_epoch_callable(small_bundle):
    seen = []

    def provider(epoch, current):
        seen.append((epoch, isinstance(current, TrainedModel)))
        return small_bundle.train

    fit(build("ArchPlain", 16), provider, small_bundle.val, Hyper(epochs=3))
    assert seen == [(0, True), (1, True), (2, True)]


def test_checkpoint_roundtrip(tmp_path, small_bundle):
    key = ModelKey(DatasetKey("TaskBM", "SourceA", "B30"), "ArchDeep", "PGD")
    m = train_nominal(build("ArchDeep", 16, seed=5, key=key), small_bundle, Hyper(epochs=1))
    m.save(tmp_path / key.slug)
    back = TrainedModel.load(tmp_path / key.slug)
    assert back.key == key and back.key.strategy == "PGD"
    assert back.history == m.history and back.hyper == m.hyper
    x = small_bundle.test.images
    assert np.array_equal(back.logits(x), m.logits(x))


def test_model_key_roundtrip():
    key = ModelKey(DatasetKey("TaskCD", "SourceB", "B40"), "ArchResidual", "Curriculum")
    assert ModelKey.from_dict(key.to_dict()) == key


def test_easy_task_default_hyper(easy_bundle):
    m = train_nominal(build("ArchResidual", 32, seed=0), easy_bundle)
    assert f1_score(easy_bundle.test.labels, m.predict(easy_bundle.test.images)) >= 0.95


def test_imbalance_lowers_minority_recall():
    votes = 0
    for seed in range(3):
        key = DatasetKey("TaskCD", "SourceA")
        pool = generate(key, 150, 32, seed=seed)
        recalls = []
        for balance in ("B50", "B20"):
            bundle = make_bundle(DatasetKey("TaskCD", "SourceA", balance), pool, seed=seed)
            m = train_nominal(build("ArchPlain", 32, seed=seed), bundle, Hyper(epochs=10))
            minority = bundle.test.labels == 0
            recalls.append(np.mean(m.predict(bundle.test.images[minority]) == 0))
        votes += recalls[1] <= recalls[0]
    assert votes >= 2
