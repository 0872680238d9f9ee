"""Binary segmentation metrics and cross-fold aggregation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

NAMES = ("acc", "iou", "dice", "sens", "spec")
THRESHOLD = 0.5


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


class Metrics(NamedTuple):
    acc: float
    iou: float
    dice: float
    sens: float
    spec: float


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def confusion(pred, truth) -> Confusion:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"confusion: shape mismatch {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def evaluate(c: Confusion) -> Metrics:
    """Metrics from counts. Empty denominators count as a perfect score:
    both masks empty gives iou = dice = 1, no positives gives sens = 1, no
    negatives gives spec = 1."""
    if c.total <= 0:
        raise ValueError("evaluate: empty confusion")
    union = c.tp + c.fp + c.fn
    return Metrics(
        acc=(c.tp + c.tn) / c.total,
        iou=c.tp / union if union else 1.0,
        dice=2 * c.tp / (2 * c.tp + c.fp + c.fn) if union else 1.0,
        sens=c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0,
        spec=c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0,
    )


def score_batch(prob, truth, threshold: float = THRESHOLD) -> list:
    """Per-sample metrics for ``(N, ...)`` probability maps and binary truths."""
    prob, truth = np.asarray(prob), np.asarray(truth)
    return [evaluate(confusion(binarize(p, threshold), t > 0.5)) for p, t in zip(prob, truth)]


def mean_metrics(per_sample) -> Metrics:
    if not per_sample:
        raise ValueError("no samples")
    return Metrics(*np.mean(np.asarray(per_sample, dtype=np.float64), axis=0).tolist())


@dataclass
class MetricsReport:
    per_fold: list
    mean: Metrics
    std: Metrics
    per_sample: list = field(default_factory=list)  # one list of Metrics per fold

    def records(self) -> list:
        out = [{"fold": i, **m._asdict()} for i, m in enumerate(self.per_fold)]
        out.append({"summary": "mean", **self.mean._asdict()})
        out.append({"summary": "std", **self.std._asdict()})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def table(self, digits: int = 4) -> str:
        w = digits + 2
        head = f"{'':>6} " + " ".join(f"{n:>{2 * w + 3}}" for n in NAMES)
        rows = [head]
        for i, m in enumerate(self.per_fold):
            rows.append(f"{'fold' + str(i):>6} " + " ".join(
                f"{v:>{2 * w + 3}.{digits}f}" for v in m))
        rows.append(f"{'all':>6} " + " ".join(
            f"{mu:>{w}.{digits}f} ± {sd:<{w}.{digits}f}" for mu, sd in zip(self.mean, self.std)))
        return "\n".join(rows)


def aggregate(per_fold, per_sample=None) -> MetricsReport:
    """Mean and sample standard deviation (n - 1) across folds."""
    if not per_fold:
        raise ValueError("aggregate needs at least one fold")
    arr = np.asarray(per_fold, dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(arr.shape[1])
    return MetricsReport([Metrics(*r) for r in arr.tolist()], Metrics(*mean.tolist()),
                         Metrics(*std.tolist()), per_sample or [])
