"""Brute-force reference implementations used as test oracles.

Each oracle is written from the textbook definition with exact rational arithmetic or plain
pairwise enumeration, so it shares no code path with the package.
"""
from fractions import Fraction
from itertools import combinations

import mpmath


def km_product_limit(times, events):
    """{event time: S(t)} by direct product over distinct event times, in exact fractions."""
    out = {}
    s = Fraction(1)
    for t in sorted({t for t, e in zip(times, events) if e}):
        n = sum(1 for u in times if u >= t)
        d = sum(1 for u, e in zip(times, events) if u == t and e)
        s *= 1 - Fraction(d, n)
        out[t] = s
    return out


def _above(scores, i):
    """Items ranked at or above item i under 'descending score, ties in input order'."""
    return [j for j in range(len(scores))
            if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]


def average_precision(scores, labels):
    pos = [i for i, y in enumerate(labels) if y]
    total = Fraction(0)
    for i in pos:
        above = _above(scores, i)
        total += Fraction(sum(labels[j] for j in above), len(above))
    return total / len(pos)


def precision_at_top(scores, labels, k):
    top = [i for i in range(len(scores)) if len(_above(scores, i)) <= k]
    return Fraction(sum(labels[i] for i in top), k)


def roc_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else 0
               for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def concordance(risk, time, event):
    num, den = Fraction(0), 0
    for i, j in combinations(range(len(risk)), 2):
        for a, b in ((i, j), (j, i)):
            if event[a] and time[a] < time[b]:
                den += 1
                num += 1 if risk[a] > risk[b] else Fraction(1, 2) if risk[a] == risk[b] else 0
    return num / den if den else None


def aft_weibull_survival(t, x, beta, intercept, scale, shape, dps=50):
    """exp(-(t exp(b0 + x.beta) / scale)^shape) at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        eta = mpmath.mpf(intercept) + mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b)
                                                  for a, b in zip(x, beta))
        u = mpmath.mpf(t) * mpmath.exp(eta) / mpmath.mpf(scale)
        return mpmath.exp(-u ** mpmath.mpf(shape))
