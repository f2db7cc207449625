"""Expression- and token-level recognition metrics.

The "<= k error" rates use token edit distance as a proxy for structural
errors; comparison is token-exact (``x^{2}`` and ``x^2`` differ).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from abm import kernels
from abm.nn import ConfigError

DEFAULT_BUCKETS = ((1, 10), (11, 20), (21, 30), (31, 40), (41, math.inf))


class MetricInputError(ValueError):
    """Prediction and reference corpora cannot be compared."""


def _ids(seq) -> np.ndarray:
    """Map arbitrary hashable tokens to int64 codes (shared per call site)."""
    return np.asarray(seq, dtype=np.int64)


def edit_distance(pred: Sequence, ref: Sequence) -> int:
    """Token-level Levenshtein distance with unit costs."""
    if all(isinstance(t, (int, np.integer)) for t in pred) and all(isinstance(t, (int, np.integer)) for t in ref):
        return int(kernels.levenshtein(_ids(pred), _ids(ref)))
    table: dict = {}
    a = [table.setdefault(t, len(table)) for t in pred]
    b = [table.setdefault(t, len(table)) for t in ref]
    return int(kernels.levenshtein(_ids(a), _ids(b)))


def _check_pair(preds, refs) -> None:
    if len(preds) != len(refs):
        raise MetricInputError(f"{len(preds)} predictions for {len(refs)} references")


def exprate_at_k(preds, refs, k: int = 0) -> float:
    _check_pair(preds, refs)
    if not refs:
        raise MetricInputError("empty corpus")
    hits = sum(edit_distance(p, r) <= k for p, r in zip(preds, refs))
    return 100.0 * hits / len(refs)


def wer(preds, refs, per_sample: bool = False) -> float:
    """Corpus WER: total edits over total reference tokens, in percent.

    ``per_sample=True`` averages each sample's own rate instead.
    """
    _check_pair(preds, refs)
    if not refs:
        raise MetricInputError("empty corpus")
    dists = [edit_distance(p, r) for p, r in zip(preds, refs)]
    if per_sample:
        return 100.0 * float(np.mean([d / max(len(r), 1) for d, r in zip(dists, refs)]))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise MetricInputError("references contain no tokens")
    return 100.0 * sum(dists) / total


def prefix_suffix_accuracy(preds, refs, n: int) -> tuple[float, float]:
    """Share of samples whose first / last ``min(n, |ref|)`` tokens are right."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    _check_pair(preds, refs)
    if not refs:
        raise MetricInputError("empty corpus")
    pre = suf = 0
    for p, r in zip(preds, refs):
        m = min(n, len(r))
        p, r = list(p), list(r)
        pre += len(p) >= m and p[:m] == r[:m]
        suf += len(p) >= m and p[len(p) - m:] == r[len(r) - m:]
    return 100.0 * pre / len(refs), 100.0 * suf / len(refs)


def _bucket_label(lo, hi) -> str:
    return f"[{lo},{'inf' if hi == math.inf else hi}]"


def accuracy_by_length(preds, refs, buckets=DEFAULT_BUCKETS) -> dict[str, float]:
    """ExpRate per reference-length bucket; empty buckets are left out."""
    _check_pair(preds, refs)
    spans = sorted((lo, hi) for lo, hi in buckets)
    if not spans:
        raise ConfigError("no buckets given")
    for (lo, hi), (lo2, _) in zip(spans, spans[1:]):
        if lo2 <= hi:
            raise ConfigError(f"buckets {_bucket_label(lo, hi)} and {_bucket_label(lo2, _)} overlap")
    if any(lo > hi or lo < 1 for lo, hi in spans):
        raise ConfigError(f"invalid bucket in {spans}")
    out = {}
    for lo, hi in spans:
        sel = [(p, r) for p, r in zip(preds, refs) if lo <= len(r) <= hi]
        if sel:
            out[_bucket_label(lo, hi)] = 100.0 * sum(list(p) == list(r) for p, r in sel) / len(sel)
    return out


@dataclass
class EvalReport:
    exprate: float
    le1: float
    le2: float
    wer: float
    count: int
    buckets: dict = field(default_factory=dict)
    prefix_suffix: dict = field(default_factory=dict)   # n -> (prefix, suffix)

    @classmethod
    def compute(cls, preds, refs, ns=(2, 5), buckets=DEFAULT_BUCKETS) -> "EvalReport":
        return cls(
            exprate=exprate_at_k(preds, refs, 0),
            le1=exprate_at_k(preds, refs, 1),
            le2=exprate_at_k(preds, refs, 2),
            wer=wer(preds, refs),
            count=len(refs),
            buckets=accuracy_by_length(preds, refs, buckets),
            prefix_suffix={n: prefix_suffix_accuracy(preds, refs, n) for n in ns},
        )

    def rows(self) -> list[tuple[str, float]]:
        rows = [("exprate", self.exprate), ("le1", self.le1), ("le2", self.le2), ("wer", self.wer)]
        for n, (p, s) in self.prefix_suffix.items():
            rows += [(f"prefix{n}", p), (f"suffix{n}", s)]
        rows += [(f"len{k}", v) for k, v in self.buckets.items()]
        return rows

    def table(self) -> str:
        rows = [("metric", "value")] + [(k, f"{v:.2f}") for k, v in self.rows()] + [("samples", str(self.count))]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>8}" for k, v in rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for k, v in self.rows():
            writer.writerow([k, f"{v:.4f}"])
        writer.writerow(["samples", self.count])
        return buf.getvalue()
