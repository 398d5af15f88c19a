"""Classification and robustness metrics: F1, ASR, severity, AMR, scenario cases."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

SEVERITY_EDGES = (0.2, 0.4, 0.6, 0.8)
AMR_FLOOR = -1.0

# (source match, architecture match, balance match) -> case, in table row order.
CASE_TABLE = {
    (True, True, True): "C1",
    (True, True, False): "C2",
    (True, False, True): "C3",
    (True, False, False): "C4",
    (False, True, True): "C5",
    (False, True, False): "C6",
    (False, False, True): "C7",
    (False, False, False): "C8",
}
CASES = tuple(CASE_TABLE.values())


class UndefinedASRError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count in {self}")

    @classmethod
    def from_predictions(cls, labels, preds, positive: int = 1) -> "ConfusionCounts":
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        if labels.shape != preds.shape:
            raise ValueError(f"labels {labels.shape} and predictions {preds.shape} differ")
        pos_true, pos_pred = labels == positive, preds == positive
        return cls(
            tp=int(np.sum(pos_true & pos_pred)),
            fp=int(np.sum(~pos_true & pos_pred)),
            fn=int(np.sum(pos_true & ~pos_pred)),
            tn=int(np.sum(~pos_true & ~pos_pred)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def f1(counts: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 when both vanish.

    Evaluated as 2tp / (2tp + fp + fn), which is the same quantity with a
    single rounding step.
    """
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if counts.tp else 0.0


def f1_score(labels, preds, positive: int = 1) -> float:
    return f1(ConfusionCounts.from_predictions(labels, preds, positive))


@dataclass(frozen=True)
class ASRRecord:
    n_clean_correct: int
    n_flipped: int
    asr: float
    severity: int


def severity(asr_value: float) -> int:
    """Five even bins over [0, 1], lower edge inclusive, top bin closed."""
    if not 0.0 <= asr_value <= 1.0:
        raise ValueError(f"ASR {asr_value} outside [0, 1]")
    return 1 + bisect.bisect_right(SEVERITY_EDGES, asr_value)


def asr(clean_preds, adv_preds, labels) -> ASRRecord:
    clean_preds, adv_preds, labels = map(np.asarray, (clean_preds, adv_preds, labels))
    if not clean_preds.shape == adv_preds.shape == labels.shape:
        raise ValueError(
            f"length mismatch: clean {clean_preds.shape}, adv {adv_preds.shape}, labels {labels.shape}")
    correct = clean_preds == labels
    n_correct = int(correct.sum())
    if n_correct == 0:
        raise UndefinedASRError("ASR undefined: no sample is classified correctly on clean input")
    n_flipped = int(np.sum(correct & (adv_preds != labels)))
    value = n_flipped / n_correct
    return ASRRecord(n_correct, n_flipped, value, severity(value))


@dataclass(frozen=True)
class AMRRecord:
    asr_original: float
    asr_adv: float
    amr: float | None

    @property
    def defined(self) -> bool:
        return self.amr is not None


def amr(asr_original: float, asr_adv: float) -> AMRRecord:
    """Relative ASR reduction of a defended model, floored at -1.

    Undefined (``amr is None``) when the baseline ASR is zero.
    """
    for v in (asr_original, asr_adv):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"ASR {v} outside [0, 1]")
    if asr_original == 0:
        return AMRRecord(asr_original, asr_adv, None)
    # exact rational evaluation so the result is correctly rounded
    a, b = Fraction(asr_original), Fraction(asr_adv)
    return AMRRecord(asr_original, asr_adv, max(AMR_FLOOR, float((a - b) / a)))


@dataclass(frozen=True)
class CaseLabel:
    case: str
    source_match: bool
    arch_match: bool
    balance_match: bool


def classify_case(attacker, victim) -> CaseLabel:
    """Map attacker/victim (DatasetKey, arch) pairs onto C1..C8."""
    (a_data, a_arch), (v_data, v_arch) = attacker, victim
    if a_data.task != v_data.task:
        raise ValueError(f"cross-task pair: {a_data.task} vs {v_data.task}")
    flags = (a_data.source == v_data.source, a_arch == v_arch, a_data.balance == v_data.balance)
    return CaseLabel(CASE_TABLE[flags], *flags)


def nonmath_bucket(image_source: str, victim_source: str) -> str:
    """Non-math attacks only vary the image source; labelled apart from C1..C8."""
    return "NM-C1" if image_source == victim_source else "NM-C5"

