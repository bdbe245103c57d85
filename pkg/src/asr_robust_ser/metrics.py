"""Transcript normalisation, word alignment / WER, and the SER evaluation metrics."""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PUNCTUATION = frozenset(string.punctuation)
_STRIP = str.maketrans("", "", string.punctuation)

IEMOCAP_CLASSES = ("angry", "happy", "neutral", "sad")


class EmptyReference(ValueError):
    """An alignment was requested against an empty reference."""


def normalize_text(raw: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace.

    >>> normalize_text("it's FINE.")
    ['its', 'fine']
    """
    return raw.lower().translate(_STRIP).split()


MATCH, SUB, DEL, INS = "M", "S", "D", "I"


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref_index: int | None
    hyp_index: int | None


@dataclass(frozen=True)
class Alignment:
    ops: tuple[EditOp, ...]
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def matches(self) -> int:
        return self.ref_len - self.substitutions - self.deletions

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def replay(self, ref: Sequence[str], hyp: Sequence[str]) -> list[str]:
        """Apply the edit script to ``ref``; equals ``hyp`` for a valid alignment."""
        out = []
        for op in self.ops:
            if op.kind == MATCH:
                out.append(ref[op.ref_index])
            elif op.kind in (SUB, INS):
                out.append(hyp[op.hyp_index])
        return out


def levenshtein_align(ref: Sequence[str], hyp: Sequence[str]) -> Alignment:
    """Unit-cost minimal edit alignment of ``hyp`` against ``ref``.

    The backtrace walks from the end and, among optimal predecessors, prefers
    match, then substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        raise EmptyReference("reference transcript is empty")
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        r = ref[i - 1]
        prev = cost[-1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if r == hyp[j - 1] else 1)
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
        cost.append(row)

    ops: list[EditOp] = []
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        c = cost[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and c == cost[i - 1][j - 1]:
            ops.append(EditOp(MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and c == cost[i - 1][j - 1] + 1:
            ops.append(EditOp(SUB, i - 1, j - 1))
            s += 1
            i, j = i - 1, j - 1
        elif i > 0 and c == cost[i - 1][j] + 1:
            ops.append(EditOp(DEL, i - 1, None))
            d += 1
            i -= 1
        else:
            ops.append(EditOp(INS, None, j - 1))
            ins += 1
            j -= 1
    ops.reverse()
    return Alignment(tuple(ops), s, d, ins, n)


def wer(alignment: Alignment) -> float:
    """(S + D + I) / N. Can exceed 1 when the hypothesis has many insertions."""
    return alignment.errors / alignment.ref_len


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Corpus-level WER: total edit errors over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("empty corpus")
    errors = words = 0
    for r, h in zip(refs, hyps):
        a = levenshtein_align(r, h)
        errors += a.errors
        words += a.ref_len
    return errors / words


# --------------------------------------------------------------------------- SER metrics


def _pair(preds, labels, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if p.shape[0] < min_len:
        raise ValueError(f"need at least {min_len} samples, got {p.shape[0]}")
    return p, y


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def acc7_class(x) -> np.ndarray:
    return np.clip(round_half_away(x), -3, 3).astype(np.int64)


def acc2_class(x) -> np.ndarray:
    """1 for positive, 0 for non-positive (a score of exactly 0 counts as negative)."""
    return (np.asarray(x, dtype=np.float64) > 0).astype(np.int64)


def accuracy(preds, labels, scheme: str = "acc4") -> float:
    """Acc4: exact class match. Acc2: sign agreement. Acc7: agreement of
    half-away-from-zero rounding clamped to [-3, 3]."""
    p, y = _pair(preds, labels)
    scheme = scheme.lower()
    if scheme == "acc4":
        return float(np.mean(p == y))
    if scheme == "acc2":
        return float(np.mean(acc2_class(p) == acc2_class(y)))
    if scheme == "acc7":
        return float(np.mean(acc7_class(p) == acc7_class(y)))
    raise ValueError(f"unknown accuracy scheme {scheme!r}")


def mae(preds, labels) -> float:
    """Mean absolute error; the sum is exactly rounded so the result is order-independent."""
    p, y = _pair(preds, labels)
    return math.fsum(np.abs(p.astype(np.float64) - y).tolist()) / p.shape[0]


def ccc(x, y) -> float:
    """Lin's concordance correlation with population moments; 0 if the denominator is 0."""
    x, y = _pair(x, y, min_len=2)
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    mx, my = x.mean(), y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    denom = vx + vy + (mx - my) ** 2
    if denom == 0:
        return 0.0
    return float(2.0 * cov / denom)


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    if np.ptp(np.asarray(x, dtype=np.float64)) == 0 or np.ptp(np.asarray(y, dtype=np.float64)) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if not math.isnan(rho) else 0.0
