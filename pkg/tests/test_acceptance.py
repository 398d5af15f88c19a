"""Acceptance criteria 1-9, each at its stated tolerance.

Every test reports a single PASS/FAIL line in the "acceptance criteria"
section of the pytest terminal summary.
"""

import math
import time
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from advtransfer.attacks import (
    EPS_BOUNDED, QueryOracle, SourceModelKey, TuningError, build_adv_pool, deepfool, fgsm,
    square_attack_run, ssim, tune_attack,
)
from advtransfer.data import BALANCES, SOURCES, TASKS, DatasetKey, LabeledImageSet, apply_balance, generate, \
    make_bundle
from advtransfer.defense import STRATEGIES, train_with_strategy, training_pool_specs
from advtransfer.metrics import UndefinedASRError, amr, asr, classify_case, f1_score, severity
from advtransfer.models import ARCHITECTURES, STRATEGY_IDS, Hyper, LinearClassifier, ModelKey, build, train_nominal
from advtransfer.runner import cli
from advtransfer.runner.aggregate import FAILURE_DIMENSIONS, failure_analysis
from advtransfer.runner.grid import enumerate_grid
from advtransfer.runner.manifest import AttackConfig, RunManifest
from advtransfer.runner.store import ResultStore
from oracles import CASE_ROWS, amr_oracle, asr_oracle, case_oracle, f1_oracle, severity_oracle
from test_attacks import ThresholdModel, cnn, random_batch, random_linear, run_bounded
from test_metrics import random_vectors
from test_numerics import PRIMITIVES, central_diff, check_primitive, max_rel_err, two_layer
from test_runner import pair

ROOT = Path(__file__).resolve().parents[1]
N_ORACLE = 1000


# -- 1. grid cardinalities at full dimensions -------------------------------------------

def test_criterion_1_full_scale_grid(acceptance):
    with acceptance.criterion(1, "full-scale grid cardinalities") as notes:
        m = RunManifest(
            tasks=tuple(TASKS), sources=SOURCES, architectures=ARCHITECTURES, balances=tuple(BALANCES),
            strategies=STRATEGY_IDS,
            attacks=tuple(AttackConfig(k, (0.1,)) for k in ("FGSM", "BIM", "PGD", "RFGSM", "TIFGSM", "Square"))
            + (AttackConfig("DeepFool", ({"overshoot": 0.02},)),)
            + tuple(AttackConfig(k) for k in ("GaussianNoise", "Grayscale", "BoxBlur", "SaltPepper",
                                               "RandomBlackBox", "Invert")))
        start = time.perf_counter()
        grid = enumerate_grid(m)
        elapsed = time.perf_counter() - start
        counts = grid.counts()
        notes.append(f"{counts}, {elapsed:.3f}s")
        assert counts["source_models_per_task"] == 24
        assert counts["targets_per_task"] == 240
        assert counts["math_cells"] == 120_960
        assert counts["nonmath_cells"] == 8_640
        assert elapsed < 1.0


# -- 2. metric oracles -------------------------------------------------------------------

def test_criterion_2_metric_oracles(acceptance):
    with acceptance.criterion(2, "metrics agree with brute-force oracles") as notes:
        rng = np.random.default_rng(2024)
        for _ in range(N_ORACLE):
            labels, preds, _ = random_vectors(rng)
            assert f1_score(labels, preds) == float(f1_oracle(labels, preds))

        checked = 0
        while checked < N_ORACLE:
            labels, clean, adv = random_vectors(rng)
            expected = asr_oracle(clean, adv, labels)
            if expected is None:
                with pytest.raises(UndefinedASRError):
                    asr(clean, adv, labels)
                continue
            rec = asr(clean, adv, labels)
            assert (rec.n_flipped, rec.n_clean_correct) == expected
            assert rec.asr == float(Fraction(*expected))
            assert rec.severity == severity_oracle(Fraction(*expected))
            checked += 1

        for _ in range(N_ORACLE):
            den = int(rng.integers(1, 50))
            v = Fraction(int(rng.integers(0, den + 1)), den)
            assert severity(float(v)) == severity_oracle(v)

        for _ in range(N_ORACLE):
            da, db = rng.integers(1, 30, size=2)
            a, b = int(rng.integers(0, da + 1)) / da, int(rng.integers(0, db + 1)) / db
            expected = amr_oracle(a, b)
            got = amr(a, b).amr
            assert got == (None if expected is None else float(expected))

        archs, balances = ARCHITECTURES, tuple(BALANCES)
        for _ in range(N_ORACLE):
            a = (DatasetKey("TaskMW", rng.choice(SOURCES), rng.choice(balances)), rng.choice(archs))
            v = (DatasetKey("TaskMW", rng.choice(SOURCES), rng.choice(balances)), rng.choice(archs))
            want = case_oracle(a[0].source == v[0].source, a[1] == v[1], a[0].balance == v[0].balance)
            assert classify_case(a, v).case == want

        for case, src, arch, bal in CASE_ROWS:
            attacker = (DatasetKey("TaskBM", "SourceA", "B50"), "ArchPlain")
            victim = (DatasetKey("TaskBM", "SourceA" if src else "SourceB", "B50" if bal else "B20"),
                      "ArchPlain" if arch else "ArchDeep")
            label = classify_case(attacker, victim)
            assert (label.case, label.source_match, label.arch_match, label.balance_match) == (case, src, arch, bal)
        notes.append(f"{N_ORACLE} instances per metric, 8 case rows")


# -- 3. balance arithmetic ---------------------------------------------------------------

def test_criterion_3_balance_worked_example(acceptance):
    with acceptance.criterion(3, "balance worked example 3500 -> 875") as notes:
        n = 3500
        labels = np.array([0] * n + [1] * n)
        pool = LabeledImageSet(np.zeros((2 * n, 1, 1, 1)), labels, [f"p/{i}" for i in range(2 * n)], role="train")
        out = apply_balance(pool, "B20", seed=0)
        counts = out.class_counts()
        notes.append(f"majority {counts[1]}, minority {counts[0]}")
        assert counts == {0: 875, 1: 3500}


# -- 4. gradients ------------------------------------------------------------------------

def test_criterion_4_gradients(acceptance):
    with acceptance.criterion(4, "autodiff vs central differences") as notes:
        worst = {}
        for name, (fn, shapes) in sorted(PRIMITIVES.items()):
            worst[name] = check_primitive(fn, shapes, np.random.default_rng(zlib.crc32(name.encode())))
        for seed in range(3):
            rng = np.random.default_rng(seed)
            labels = rng.integers(0, 2, size=6)
            worst[f"mlp{seed}"] = check_primitive(lambda *p: two_layer(*p, labels),
                                                  [(6, 5), (5, 8), (8,), (8, 2), (2,)], rng)
        for arch in ARCHITECTURES:
            model = build(arch, 16, seed=5)
            x = np.random.default_rng(9).random((2, 3, 16, 16))
            y = np.array([0, 1])
            _, g = model.input_gradient(x, y)
            fd = central_diff(lambda v: model.input_gradient(v, y)[0], x, 1e-5)
            worst[arch] = max_rel_err(g, fd)
        top = max(worst, key=worst.get)
        notes.append(f"max relative error {worst[top]:.2e} ({top})")
        assert worst[top] <= 1e-4


# -- 5. attack invariants ----------------------------------------------------------------

def test_criterion_5_attack_invariants(acceptance):
    with acceptance.criterion(5, "attack invariants") as notes:
        rng = np.random.default_rng(55)
        triples = 0
        for kind in EPS_BOUNDED:
            for t in range(90):
                seed = int(rng.integers(0, 10 ** 6))
                eps = float(rng.uniform(0, 0.5))
                if t % 3 == 0:
                    model, (x, y) = cnn(seed % 3), random_batch(seed, n=2, shape=(3, 16, 16))
                else:
                    model, (x, y) = random_linear(seed), random_batch(seed)
                x_adv = run_bounded(kind, model, x, y, eps, seed)
                assert np.abs(x_adv - x).max() <= eps + 1e-9, kind
                assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0, kind
                triples += 1

        for seed in range(40):
            eps = 0.01 + 0.29 * seed / 39
            model, (x, y) = random_linear(seed), random_batch(seed)
            res = square_attack_run(QueryOracle(model.predict_proba), x, y, eps, max_queries=60, seed=seed)
            assert all(np.all(np.diff(h) < 0) for h in res.loss_history)

        worst = 0.0
        for seed in range(50):
            r = np.random.default_rng(seed)
            w = r.normal(size=12)
            x = r.uniform(0.4, 0.6, size=(1, 12))
            b = -float(w @ x[0]) + r.choice([-1, 1]) * r.uniform(0.01, 0.05)
            step = deepfool(LinearClassifier(w, b), x, overshoot=0.0, max_iter=1) - x
            worst = max(worst, abs(np.linalg.norm(step) - abs(float(w @ x[0] + b)) / np.linalg.norm(w)))
        notes.append(f"{triples} eps-ball triples, 40 Square runs, DeepFool max error {worst:.1e}")
        assert triples >= 500
        assert worst <= 1e-6


# -- 6. SSIM -----------------------------------------------------------------------------

def test_criterion_6_ssim(acceptance):
    with acceptance.criterion(6, "SSIM identities and tuning floor") as notes:
        rng = np.random.default_rng(66)
        self_err = sym_err = 0.0
        for i in range(50):
            a = rng.random((3, 16, 16)) if i % 5 else np.full((3, 16, 16), rng.random())
            b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
            self_err = max(self_err, abs(ssim(a, a) - 1.0))
            sym_err = max(sym_err, abs(ssim(a, b) - ssim(b, a)))
        assert self_err <= 1e-9 and sym_err <= 1e-12

        key = DatasetKey("TaskBM", "SourceA")
        val = make_bundle(key, generate(key, 50, 16, seed=0), seed=0).val.subset(np.arange(12))
        model = ThresholdModel(3 * 16 * 16, threshold=float(np.median(val.images.mean(axis=(1, 2, 3)))))
        src = SourceModelKey(key, "ArchPlain")
        emitted = 0
        for trial in range(40):
            floor = float(rng.uniform(0, 0.95))
            kind = ("GaussianNoise", "FGSM", "SaltPepper")[trial % 3]
            grid = sorted(rng.uniform(0, 0.6, size=int(rng.integers(1, 5))).tolist())
            try:
                spec = tune_attack(kind, model, val, grid, ssim_floor=floor,
                                   source_key=src if kind == "FGSM" else None)
            except TuningError:
                continue
            emitted += 1
            chosen = next(t for t in spec.tuning["trials"] if t["params"] == spec.params)
            assert spec.tuning["ssim"] >= floor and chosen["ssim"] >= floor
        notes.append(f"self {self_err:.1e}, symmetry {sym_err:.1e}, {emitted}/40 tuned specs above floor")


# -- 7. behaviour at desk scale ----------------------------------------------------------

BEHAVIOUR_SEEDS = (0, 1, 2)
BEHAVIOUR_HYPER = Hyper(epochs=20)
FGSM_GRID = [0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]


def _bundle(source, balance, seed):
    key = DatasetKey("TaskBM", source, balance)
    return make_bundle(key, generate(DatasetKey("TaskBM", source), 200, 32, seed=seed), seed=seed)


def _baseline(bundle, arch, seed):
    return train_nominal(build(arch, 32, seed=seed, key=ModelKey(bundle.key, arch)), bundle, BEHAVIOUR_HYPER,
                         seed=seed)


def _behaviour(seed):
    own = _bundle("SourceA", "B50", seed)
    other = _bundle("SourceB", "B20", seed)
    test = own.test
    out = {"f1": {}, "c1": [], "c8": []}
    baselines = {a: _baseline(own, a, seed) for a in ARCHITECTURES}
    for arch, model in baselines.items():
        out["f1"][arch] = f1_score(test.labels, model.predict(test.images))

    # (b) PGD-strategy defence against white-box FGSM at eps 0.2
    base = baselines["ArchPlain"]
    src = SourceModelKey(own.key, "ArchPlain")
    pool = build_adv_pool(own.val, training_pool_specs(STRATEGIES["PGD"], src), {src.slug: base}, seed=seed)
    defended = train_with_strategy(STRATEGIES["PGD"], build("ArchPlain", 32, seed=seed, key=src.model_key), own,
                                   pool, BEHAVIOUR_HYPER, seed=seed)
    x_adv = fgsm(base, test.images, test.labels, 0.2)
    a_base = asr(base.predict(test.images), base.predict(x_adv), test.labels).asr
    a_def = asr(defended.predict(test.images), defended.predict(x_adv), test.labels).asr
    out["amr"] = amr(a_base, a_def).amr

    # (c) tuned FGSM: white-box severity against its C8 transfer (other source, balance and architecture)
    for i, arch in enumerate(ARCHITECTURES):
        attacker = baselines[arch]
        key = SourceModelKey(own.key, arch)
        spec = tune_attack("FGSM", attacker, own.val, FGSM_GRID, source_key=key, seed=seed)
        adv = build_adv_pool(test, [spec], {key.slug: attacker}, seed=seed).images
        victim_arch = ARCHITECTURES[(i + 1) % 3]
        victim = _baseline(other, victim_arch, seed)
        assert classify_case((own.key, arch), (other.key, victim_arch)).case == "C8"
        out["c1"].append(asr(attacker.predict(test.images), attacker.predict(adv), test.labels).severity)
        out["c8"].append(asr(victim.predict(test.images), victim.predict(adv), test.labels).severity)
    return out


@pytest.fixture(scope="module")
def behaviour():
    return {s: _behaviour(s) for s in BEHAVIOUR_SEEDS}


def test_criterion_7_desk_scale_behaviour(acceptance, behaviour):
    with acceptance.criterion(7, "desk-scale behaviour on TaskBM") as notes:
        f1s = [v for b in behaviour.values() for v in b["f1"].values()]
        amrs = [b["amr"] for b in behaviour.values()]
        c1 = [s for b in behaviour.values() for s in b["c1"]]
        c8 = [s for b in behaviour.values() for s in b["c8"]]
        notes.append(f"(a) min F1 {min(f1s):.3f}")
        notes.append(f"(b) AMR {[round(a, 3) if a is not None else None for a in amrs]}")
        notes.append(f"(c) mean severity C1 {np.mean(c1):.2f} vs C8 {np.mean(c8):.2f}")
        assert min(f1s) >= 0.90, "(a) baseline F1"
        assert sum(a is not None and a > 0 for a in amrs) >= 2, "(b) PGD AMR"
        assert np.mean(c1) >= np.mean(c8), "(c) severity"


# -- 8 and 9. smoke run ------------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    manifest = str(ROOT / "manifests" / "smoke.yaml")
    start = time.perf_counter()
    code, first = cli.execute(["all", "--manifest", manifest, "--out", str(out)])
    elapsed = time.perf_counter() - start
    csvs = {p.relative_to(out): p.read_bytes() for p in sorted((out / "aggregates").rglob("*.csv"))}
    return out, manifest, code, first, csvs, elapsed


def test_criterion_8_failure_analysis_schema(acceptance, smoke_run):
    with acceptance.criterion(8, "failure-analysis tables partition the negatives") as notes:
        rng = np.random.default_rng(88)
        synthetic = []
        for _ in range(300):
            synthetic += pair(float(rng.integers(1, 21)) / 20, float(rng.integers(0, 21)) / 20,
                              case=f"C{rng.integers(1, 9)}", strategy=str(rng.choice(STRATEGY_IDS[1:])),
                              attack=str(rng.choice(["FGSM", "PGD", "GaussianNoise"])))
        out, _, code, _, _, _ = smoke_run
        assert code == 0
        smoke = ResultStore(out / "results.jsonl").records()
        for name, records in (("synthetic", synthetic), ("smoke", smoke)):
            tables = failure_analysis(records)
            assert tuple(tables) == FAILURE_DIMENSIONS
            n_neg = sum(r["n"] for r in tables["case"].rows)
            assert n_neg > 0, f"{name} store has no negative AMR"
            for dim, table in tables.items():
                total = math.fsum(r["pct_of_negatives"] for r in table.rows)
                assert abs(total - 100.0) <= 0.01, (name, dim, total)
                assert sum(r["n"] for r in table.rows) == n_neg
            notes.append(f"{name}: {n_neg} negatives")
        for dim in FAILURE_DIMENSIONS:
            assert (out / "aggregates" / f"failure_{dim}.csv").exists()


def test_criterion_9_smoke_rerun_is_idempotent(acceptance, smoke_run):
    with acceptance.criterion(9, "smoke rerun computes nothing, CSVs byte-identical") as notes:
        out, manifest, code, first, csvs, elapsed = smoke_run
        assert code == 0 and first["total_computed"] > 0
        code, second = cli.execute(["all", "--manifest", manifest, "--out", str(out), "--resume"])
        again = {p.relative_to(out): p.read_bytes() for p in sorted((out / "aggregates").rglob("*.csv"))}
        notes.append(f"first run {first['total_computed']} units in {elapsed:.0f}s, "
                     f"rerun {second['total_computed']}, {len(again)} CSVs")
        assert code == 0
        assert second["total_computed"] == 0
        assert again == csvs
