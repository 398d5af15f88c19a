"""Independent brute-force reference implementations used by several test modules.

These deliberately avoid the package's own helpers: plain loops and exact
rationals only.
"""

from fractions import Fraction
from itertools import product

import numpy as np


def f1_oracle(labels, preds, positive=1):
    tp = fp = fn = 0
    for y, p in zip(labels, preds):
        if p == positive and y == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif y == positive:
            fn += 1
    precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    if precision + recall == 0:
        return Fraction(0)
    return 2 * precision * recall / (precision + recall)


def asr_oracle(clean, adv, labels):
    """(numerator, denominator) or None when undefined."""
    den = num = 0
    for c, a, y in zip(clean, adv, labels):
        if c == y:
            den += 1
            if a != y:
                num += 1
    return None if den == 0 else (num, den)


def severity_oracle(value: Fraction) -> int:
    return min(5, int(value * 5) + 1)


def amr_oracle(a: float, b: float):
    fa, fb = Fraction(a), Fraction(b)
    if fa == 0:
        return None
    return max(Fraction(-1), 1 - fb / fa)


CASE_ROWS = [
    # case, source match, arch match, balance match
    ("C1", True, True, True),
    ("C2", True, True, False),
    ("C3", True, False, True),
    ("C4", True, False, False),
    ("C5", False, True, True),
    ("C6", False, True, False),
    ("C7", False, False, True),
    ("C8", False, False, False),
]


def case_oracle(same_source, same_arch, same_balance):
    # Rows are ordered as a binary count with "mismatch" as the 1 bit.
    index = 4 * (not same_source) + 2 * (not same_arch) + (not same_balance)
    return f"C{index + 1}"


def all_match_flags():
    return list(product([True, False], repeat=3))


def ssim_oracle(a, b, win=8, c1=1e-4, c2=9e-4):
    """Mean SSIM over every 8x8 window of the luminance planes, looped."""
    weights = (0.299, 0.587, 0.114)
    la = sum(w * a[i] for i, w in enumerate(weights))
    lb = sum(w * b[i] for i, w in enumerate(weights))
    h, w = la.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = la[i:i + win, j:j + win].ravel()
            pb = lb[i:i + win, j:j + win].ravel()
            ma, mb = pa.mean(), pb.mean()
            va = ((pa - ma) ** 2).mean()
            vb = ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
