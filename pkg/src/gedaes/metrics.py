"""GED and AES evaluation: token P/R/F0.5, quadratic weighted kappa, Spearman,
and paired approximate-randomization significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np


def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


def token_counts(predicted, gold) -> tuple[int, int, int]:
    """(tp, fp, fn) with label 1 ("incorrect") as the positive class."""
    pred, ref = _flatten(predicted), _flatten(gold)
    if pred.shape != ref.shape:
        raise ValueError(f"label count mismatch: {pred.size} predicted vs {ref.size} gold")
    tp = int(np.sum((pred == 1) & (ref == 1)))
    fp = int(np.sum((pred == 1) & (ref == 0)))
    fn = int(np.sum((pred == 0) & (ref == 1)))
    return tp, fp, fn


def _flatten(x) -> np.ndarray:
    # one flat label sequence or a list of per-essay sequences
    if len(x) and np.ndim(x[0]) > 0:
        return np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in x])
    return np.asarray(x, dtype=np.int64).reshape(-1)


def token_prf(predicted, gold) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F0.5 over all tokens."""
    tp, fp, fn = token_counts(predicted, gold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f_beta(precision, recall)


def round_scores(scores, score_min: int = 1, score_max: int = 20) -> np.ndarray:
    """Round half up and clip to the rating scale."""
    out = np.floor(np.asarray(scores, dtype=np.float64) + 0.5).astype(np.int64)
    return np.clip(out, score_min, score_max)


def qwk(predicted, gold, score_min: int = 1, score_max: int = 20) -> float:
    """Quadratic weighted kappa between integer ratings; NaN when undefined."""
    a = np.asarray(predicted, dtype=np.int64)
    b = np.asarray(gold, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("qwk: predicted and gold must be aligned 1-D sequences")
    if a.size < 2:
        raise ValueError("qwk: need at least two essays")
    if a.min() < score_min or b.min() < score_min or a.max() > score_max or b.max() > score_max:
        raise ValueError(f"qwk: ratings outside [{score_min}, {score_max}]")
    if np.all(a == a[0]) and np.all(b == b[0]):
        return math.nan
    k = score_max - score_min + 1
    observed = np.zeros((k, k))
    np.add.at(observed, (a - score_min, b - score_min), 1.0)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / a.size
    idx = np.arange(k)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    den = np.sum(weights * expected)
    if den == 0:
        return math.nan
    return float(1.0 - np.sum(weights * observed) / den)


def rankdata(x) -> np.ndarray:
    """Fractional (1-based) ranks; ties share their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    start = 0
    for end in range(1, x.size + 1):
        if end == x.size or sorted_x[end] != sorted_x[start]:
            ranks[order[start:end]] = (start + end + 1) / 2.0
            start = end
    return ranks


def spearman(predicted, gold) -> float:
    """Spearman's rho; NaN if either side has a single distinct value."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(gold, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("spearman: need two aligned sequences of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        return math.nan
    return float(np.dot(ra, rb) / den)


def significance_test(
    metric: Callable[[Sequence, Sequence], float],
    outputs_a: Sequence,
    outputs_b: Sequence,
    gold: Sequence,
    iterations: int = 10000,
    seed: int = 0,
) -> float:
    """Two-sided paired approximate randomization.

    Per iteration each essay's pair of system outputs is swapped with
    probability 1/2; the p-value is the smoothed share of shuffles whose
    metric difference is at least the observed one in absolute value.
    """
    if not len(outputs_a) == len(outputs_b) == len(gold):
        raise ValueError("significance_test: outputs and gold must be aligned")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    observed = abs(metric(outputs_a, gold) - metric(outputs_b, gold))
    rng = np.random.default_rng(seed)
    a = list(outputs_a)
    b = list(outputs_b)
    hits = 0
    for _ in range(iterations):
        swap = rng.random(len(a)) < 0.5
        sa = [y if s else x for x, y, s in zip(a, b, swap)]
        sb = [x if s else y for x, y, s in zip(a, b, swap)]
        diff = abs(metric(sa, gold) - metric(sb, gold))
        # tolerance keeps exact ties from flipping on float noise
        if diff >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (iterations + 1)


def f_half_metric(predicted_labels, gold_labels) -> float:
    return token_prf(predicted_labels, gold_labels)[2]


def qwk_metric(predicted_scores, gold_scores) -> float:
    return qwk(round_scores(predicted_scores), gold_scores)


def spearman_metric(predicted_scores, gold_scores) -> float:
    return spearman(predicted_scores, gold_scores)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_half: float
    spearman: float
    qwk: float
    n_essays: int
    n_tokens: int
    p_value: float | None = None

    def to_kv(self) -> str:
        parts = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            parts.append(f"{f.name}={_fmt(value)}")
        return " ".join(parts)

    @classmethod
    def from_kv(cls, line: str) -> "EvalReport":
        raw = dict(part.split("=", 1) for part in line.split())
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            kwargs[f.name] = int(v) if f.name in ("tp", "fp", "fn", "n_essays", "n_tokens") else float(v)
        return cls(**kwargs)

    def table(self) -> str:
        rows = [
            ("essays", str(self.n_essays)),
            ("tokens", str(self.n_tokens)),
            ("tp / fp / fn", f"{self.tp} / {self.fp} / {self.fn}"),
            ("precision", f"{self.precision:.4f}"),
            ("recall", f"{self.recall:.4f}"),
            ("F0.5", f"{self.f_half:.4f}"),
            ("Spearman", f"{self.spearman:.4f}"),
            ("QWK", f"{self.qwk:.4f}"),
        ]
        if self.p_value is not None:
            rows.append(("p-value", f"{self.p_value:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def evaluate(pred_labels, gold_labels, pred_scores, gold_scores, score_min=1, score_max=20) -> EvalReport:
    """Full report over a corpus: per-essay label sequences plus one score per essay."""
    tp, fp, fn = token_counts(pred_labels, gold_labels)
    precision, recall, f_half = token_prf(pred_labels, gold_labels)
    rounded = round_scores(pred_scores, score_min, score_max)
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f_half=f_half,
        spearman=spearman(pred_scores, gold_scores) if len(gold_scores) > 1 else math.nan,
        qwk=qwk(rounded, gold_scores, score_min, score_max) if len(gold_scores) > 1 else math.nan,
        n_essays=len(gold_scores),
        n_tokens=sum(len(g) for g in gold_labels),
    )
