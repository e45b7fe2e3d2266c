"""Evaluation metrics: component accuracy, marginal discrepancies, selective prediction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .tokenizer import MsgComponents

COMPONENTS = ("type", "side", "price_q", "volume_q", "full")
VARIABLES = ("price", "volume", "time")
THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# fixed binning so numbers are comparable across runs
BIN_EDGES = {
    "price": np.arange(0, 1002, 1, dtype=float),
    "volume": np.arange(0, 1520, 10, dtype=float),
    "time": np.arange(0, 252, 1, dtype=float),
}


def component_accuracy(pred: Sequence[MsgComponents | None], truth: Sequence[MsgComponents]) -> dict[str, float]:
    """Exact-match rate per token component; ``None`` predictions (decode failures) miss everything."""
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not truth:
        raise ValueError("no pairs to score")
    hits = dict.fromkeys(COMPONENTS, 0)
    for p, t in zip(pred, truth):
        if p is None:
            continue
        m = (p.mtype == t.mtype, p.side == t.side, p.price_bin == t.price_bin, p.volume_bin == t.volume_bin)
        for name, ok in zip(COMPONENTS, m + (all(m),)):
            hits[name] += ok
    return {k: v / len(truth) for k, v in hits.items()}


def w1(a, b) -> float:
    """Empirical Wasserstein-1 distance; mean |sorted differences| for equal sizes."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("W1 needs two non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


def _normalize_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = np.asarray(p, dtype=np.float64).ravel(), np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError(f"histograms differ in length: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("histogram entries must be non-negative")
    if p.sum() == 0 or q.sum() == 0:
        raise ValueError("all-zero histogram")
    return p / p.sum(), q / q.sum()


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits (bounded by 1)."""
    p, q = _normalize_pair(p, q)
    m = 0.5 * (p + q)
    return min(max(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0), 1.0)


def tvd(p, q) -> float:
    p, q = _normalize_pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def histogram(values, var: str) -> np.ndarray:
    """Counts over the fixed binning of ``var``; values beyond the last edge land in the last bin."""
    edges = BIN_EDGES[var]
    v = np.clip(np.asarray(values, dtype=np.float64), edges[0], edges[-1] - 1e-9)
    return np.histogram(v, bins=edges)[0]


def hist_pearson(pred, true, var: str | None = None, edges=None) -> float:
    """Pearson correlation of the two samples' bin counts over a shared binning."""
    if var is not None:
        hp, ht = histogram(pred, var), histogram(true, var)
    else:
        hp, ht = np.histogram(pred, bins=edges)[0], np.histogram(true, bins=edges)[0]
    if len(hp) < 2:
        raise ValueError("need at least two bins")
    if hp.std() == 0 or ht.std() == 0:
        raise ValueError("zero-variance histogram; correlation undefined")
    return float(np.corrcoef(hp, ht)[0, 1])


def marginal_metrics(pred, true, var: str) -> dict[str, float]:
    hp, ht = histogram(pred, var), histogram(true, var)
    return {"w1": w1(pred, true), "jsd": jsd(hp, ht), "tvd": tvd(hp, ht)}


# --------------------------------------------------------------------------- selective prediction


@dataclass(frozen=True)
class SelectiveResult:
    threshold: float
    macro_f1: float | None
    coverage: float

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "macro_f1": self.macro_f1, "coverage": self.coverage}


def macro_f1(pred, labels, n_classes: int = 3) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def selective_f1(probs, labels, thresholds: Sequence[float] = THRESHOLDS) -> list[SelectiveResult]:
    """Predict only where the top class probability strictly exceeds the threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError(f"probs {probs.shape} vs labels {labels.shape}")
    if len(probs) == 0:
        raise ValueError("no predictions to score")
    if np.any(np.abs(probs.sum(axis=1) - 1) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    top, pred = probs.max(axis=1), probs.argmax(axis=1)
    out = []
    for thr in thresholds:
        keep = top > thr
        n = int(keep.sum())
        f1 = macro_f1(pred[keep], labels[keep], probs.shape[1]) if n else None
        out.append(SelectiveResult(float(thr), f1, n / len(probs)))
    return out
