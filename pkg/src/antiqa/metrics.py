"""Correlation and similarity metrics used throughout the evaluation.

PLCC and SROCC are the headline agreement measures against mean opinion
scores; normalized edit similarity scores OCR transcripts; the trimmed
mean turns raw rating vectors into a MOS.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (a constant input vector)."""


def _validate_pair(predicted, reference):
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.ndim != 1 or r.ndim != 1:
        raise ValueError("correlation inputs must be 1-d vectors")
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {r.shape[0]}")
    if p.shape[0] < 2:
        raise ValueError("correlation needs at least 2 points")
    if not (np.isfinite(p).all() and np.isfinite(r).all()):
        raise ValueError("correlation inputs must be finite")
    return p, r


def plcc(predicted, reference) -> float:
    """Pearson linear correlation coefficient."""
    p, r = _validate_pair(predicted, reference)
    pc = p - p.mean()
    rc = r - r.mean()
    den = np.sqrt((pc * pc).sum() * (rc * rc).sum())
    if den == 0.0:
        raise UndefinedCorrelationError("constant input vector")
    return float((pc * rc).sum() / den)


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(predicted, reference) -> float:
    """Spearman rank-order correlation: Pearson correlation of mid-ranks.

    Equivalent to 1 - 6*sum(d^2)/(n(n^2-1)) when there are no ties.
    """
    p, r = _validate_pair(predicted, reference)
    return plcc(midranks(p), midranks(r))


def levenshtein(ref: str, hyp: str) -> int:
    """Classic DP edit distance with unit insert/delete/substitute costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, ca in enumerate(ref, start=1):
        cur = [i]
        for j, cb in enumerate(hyp, start=1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def nsim(ref: str, hyp: str) -> float:
    """Normalized edit similarity: 1 - d_lev / max(|ref|, |hyp|, 1)."""
    return 1.0 - levenshtein(ref, hyp) / max(len(ref), len(hyp), 1)


def trimmed_mos(ratings: Sequence[float]) -> float:
    """Symmetric trimmed mean of ratings: drops floor(0.1*N) from each end.

    At N=50 this discards the 5 lowest and 5 highest ratings and averages
    the remaining 40.
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 3:
        raise ValueError("trimmed_mos needs at least 3 ratings")
    t = int(np.floor(0.1 * r.shape[0]))
    r = np.sort(r)
    kept = r[t:r.shape[0] - t] if t > 0 else r
    return float(kept.mean())
