from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advtransfer.data import DatasetKey
from advtransfer.metrics import (
    CASES, ConfusionCounts, UndefinedASRError, amr, asr, classify_case, f1, f1_score,
    nonmath_bucket, severity,
)
from oracles import (
    CASE_ROWS, all_match_flags, amr_oracle, asr_oracle, case_oracle, f1_oracle, severity_oracle,
)

N_RANDOM = 1000


def random_vectors(rng, n_max=12):
    n = int(rng.integers(1, n_max + 1))
    return (rng.integers(0, 2, size=n) for _ in range(3))


# -- F1 ------------------------------------------------------------------------

def test_f1_perfect():
    assert f1(ConfusionCounts(tp=5, fp=0, fn=0, tn=3)) == 1.0


def test_f1_zero_tp_is_zero():
    assert f1(ConfusionCounts(tp=0, fp=2, fn=3, tn=1)) == 0.0
    assert f1(ConfusionCounts(tp=0, fp=0, fn=0, tn=4)) == 0.0


def test_f1_half_precision_half_recall():
    counts = ConfusionCounts(tp=1, fp=1, fn=1, tn=0)
    assert counts.precision == counts.recall == 0.5
    assert f1(counts) == 0.5


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1, fp=0, fn=0, tn=0)


def test_f1_matches_oracle_on_random_vectors():
    rng = np.random.default_rng(101)
    for _ in range(N_RANDOM):
        labels, preds, _ = random_vectors(rng)
        assert f1_score(labels, preds) == float(f1_oracle(labels, preds))


def test_confusion_counts_sum_to_sample_count():
    rng = np.random.default_rng(5)
    for _ in range(200):
        labels, preds, _ = random_vectors(rng)
        assert ConfusionCounts.from_predictions(labels, preds).total == len(labels)


# -- ASR and severity ----------------------------------------------------------

def test_asr_none_flipped():
    rec = asr([0, 1, 1], [0, 1, 1], [0, 1, 1])
    assert (rec.asr, rec.severity) == (0.0, 1)


def test_asr_four_of_ten():
    labels = np.ones(10, dtype=int)
    adv = labels.copy()
    adv[:4] = 0
    assert asr(labels, adv, labels).asr == 0.4


def test_asr_ignores_clean_incorrect_samples():
    rec = asr(clean_preds=[1, 1], adv_preds=[0, 0], labels=[0, 1])
    assert (rec.n_clean_correct, rec.n_flipped, rec.asr) == (1, 1, 1.0)


def test_asr_undefined_without_correct_samples():
    with pytest.raises(UndefinedASRError, match="ASR undefined"):
        asr([1, 0], [1, 0], [0, 1])


def test_asr_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        asr([1, 0], [1], [0, 1])


def test_asr_and_severity_match_oracle_on_random_vectors():
    rng = np.random.default_rng(202)
    checked = 0
    while checked < N_RANDOM:
        labels, clean, adv = random_vectors(rng)
        expected = asr_oracle(clean, adv, labels)
        if expected is None:
            with pytest.raises(UndefinedASRError):
                asr(clean, adv, labels)
            continue
        num, den = expected
        rec = asr(clean, adv, labels)
        assert (rec.n_flipped, rec.n_clean_correct) == (num, den)
        assert rec.asr == float(Fraction(num, den))
        assert rec.severity == severity_oracle(Fraction(num, den))
        checked += 1


@pytest.mark.parametrize("value,level", [
    (0.0, 1), (0.19, 1), (0.2, 2), (0.4, 3), (0.45, 3), (0.6, 4), (0.79, 4), (0.8, 5), (1.0, 5),
])
def test_severity_bins(value, level):
    assert severity(value) == level


@pytest.mark.parametrize("value", [-0.01, 1.01])
def test_severity_out_of_range(value):
    with pytest.raises(ValueError):
        severity(value)


@given(st.floats(0, 1), st.floats(0, 1))
def test_severity_monotone(a, b):
    lo, hi = sorted((a, b))
    assert severity(lo) <= severity(hi)


def test_severity_has_five_levels():
    assert {severity(v) for v in np.linspace(0, 1, 101)} == {1, 2, 3, 4, 5}


# -- AMR -----------------------------------------------------------------------

def test_amr_halved():
    assert amr(0.5, 0.25).amr == 0.5


def test_amr_capped_at_minus_one():
    assert amr(0.1, 0.3).amr == -1.0


def test_amr_unchanged_is_zero():
    assert amr(0.37, 0.37).amr == 0.0


def test_amr_undefined_for_zero_baseline():
    rec = amr(0.0, 0.4)
    assert rec.amr is None and not rec.defined


def test_amr_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(303)
    for _ in range(N_RANDOM):
        den_a, den_b = rng.integers(1, 30, size=2)
        a = int(rng.integers(0, den_a + 1)) / den_a
        b = int(rng.integers(0, den_b + 1)) / den_b
        expected = amr_oracle(a, b)
        got = amr(a, b).amr
        if expected is None:
            assert got is None
        else:
            assert got == float(expected)
            assert -1.0 <= got <= 1.0


@given(st.floats(0.01, 1), st.floats(0, 1), st.floats(0, 1))
def test_amr_antitone_in_defended_asr(a, b1, b2):
    lo, hi = sorted((b1, b2))
    assert amr(a, lo).amr >= amr(a, hi).amr


# -- Case grid -----------------------------------------------------------------

ARCHS = ("ArchPlain", "ArchResidual")


def pair_for(source_match, arch_match, balance_match):
    attacker = (DatasetKey("TaskBM", "SourceA", "B50"), ARCHS[0])
    victim = (DatasetKey("TaskBM", "SourceA" if source_match else "SourceB",
                         "B50" if balance_match else "B20"),
              ARCHS[0] if arch_match else ARCHS[1])
    return attacker, victim


@pytest.mark.parametrize("case,src,arch,bal", CASE_ROWS)
def test_case_table_rows(case, src, arch, bal):
    label = classify_case(*pair_for(src, arch, bal))
    assert label.case == case
    assert (label.source_match, label.arch_match, label.balance_match) == (src, arch, bal)


def test_case_mapping_is_a_bijection():
    cases = [classify_case(*pair_for(*flags)).case for flags in all_match_flags()]
    assert sorted(cases) == sorted(CASES) and len(set(cases)) == 8


def test_classify_case_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(404)
    archs = ("ArchPlain", "ArchResidual", "ArchDeep")
    sources, balances = ("SourceA", "SourceB"), ("B50", "B40", "B30", "B20")
    for _ in range(N_RANDOM):
        a = (DatasetKey("TaskCD", rng.choice(sources), rng.choice(balances)), rng.choice(archs))
        v = (DatasetKey("TaskCD", rng.choice(sources), rng.choice(balances)), rng.choice(archs))
        expected = case_oracle(a[0].source == v[0].source, a[1] == v[1], a[0].balance == v[0].balance)
        assert classify_case(a, v).case == expected


def test_cross_task_pair_rejected():
    with pytest.raises(ValueError, match="cross-task"):
        classify_case((DatasetKey("TaskBM", "SourceA"), "ArchPlain"),
                      (DatasetKey("TaskMW", "SourceA"), "ArchPlain"))


def test_nonmath_bucket():
    assert nonmath_bucket("SourceA", "SourceA") == "NM-C1"
    assert nonmath_bucket("SourceA", "SourceB") == "NM-C5"
