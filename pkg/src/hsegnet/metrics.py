"""Pixel confusion counts, overlap metrics and batch aggregation.

Undefined metrics (zero denominators) are reported as NaN and listed in
``MetricReport.undefined``; nothing here raises on degenerate masks.  When
both masks are empty, IoU and Dice are reported as 1.0, flagged undefined.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError

METRIC_NAMES = ("accuracy", "recall", "specificity", "precision", "f1", "dice", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def _as_binary(m, name: str) -> np.ndarray:
    a = np.asarray(m)
    if not np.all((a == 0) | (a == 1)):
        raise DataError(f"{name} mask is not binary")
    return a.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p = _as_binary(pred, "predicted")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp=tp, tn=p.size - tp - fp - fn, fp=fp, fn=fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.nan


def iou(c: ConfusionCounts) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def dice(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def total_over_positives(c: ConfusionCounts) -> float:
    """``(TP+TN+FP+FN)/(TP+FN)``: all pixels over actual positives.  Not a true accuracy; audit use only."""
    return _ratio(c.total, c.tp + c.fn)


@dataclass
class MetricReport:
    accuracy: float
    recall: float
    specificity: float
    precision: float
    f1: float
    dice: float
    iou: float
    undefined: list[str] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        """Both masks empty: overlap metrics hold only by convention."""
        return "dice" in self.undefined

    def as_dict(self) -> dict:
        return asdict(self)

    def percent_row(self) -> list[str]:
        return [_pct(getattr(self, k)) for k in METRIC_NAMES]


def _pct(v: float) -> str:
    return "nan" if math.isnan(v) else f"{100 * v:.2f}"


def metric_suite(c: ConfusionCounts, accuracy_over_positives: bool = False) -> MetricReport:
    if c.total <= 0:
        raise DataError("cannot compute metrics over zero pixels")
    recall = _ratio(c.tp, c.tp + c.fn)
    precision = _ratio(c.tp, c.tp + c.fp)
    if math.isnan(precision) or math.isnan(recall):
        f1 = math.nan
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    accuracy = total_over_positives(c) if accuracy_over_positives else (c.tp + c.tn) / c.total
    rep = MetricReport(
        accuracy=accuracy,
        recall=recall,
        specificity=_ratio(c.tn, c.fp + c.tn),
        precision=precision,
        f1=f1,
        dice=dice(c),
        iou=iou(c),
    )
    rep.undefined = [k for k in METRIC_NAMES if math.isnan(getattr(rep, k))]
    if c.tp + c.fp + c.fn == 0:
        rep.undefined += ["dice", "iou"]
    return rep


@dataclass
class BatchReport:
    micro: MetricReport
    macro: MetricReport
    per_sample: list[tuple[str, ConfusionCounts, MetricReport]]

    @property
    def counts(self) -> ConfusionCounts:
        total = ConfusionCounts(0, 0, 0, 0)
        for _, c, _ in self.per_sample:
            total = total + c
        return total

    def to_json(self) -> str:
        doc = {
            "micro": self.micro.as_dict(),
            "macro": self.macro.as_dict(),
            "counts": asdict(self.counts),
            "samples": [{"id": sid, "counts": asdict(c), "metrics": r.as_dict()} for sid, c, r in self.per_sample],
        }
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)

    def to_text(self) -> str:
        return format_table({"micro": self.micro, "macro": self.macro})


def macro_average(reports: Sequence[MetricReport], include_degenerate: bool = False) -> MetricReport:
    pool = [r for r in reports if include_degenerate or not r.degenerate]
    values = {}
    for k in METRIC_NAMES:
        vals = [getattr(r, k) for r in pool if not math.isnan(getattr(r, k))]
        values[k] = math.fsum(vals) / len(vals) if vals else math.nan
    rep = MetricReport(**values)
    rep.undefined = [k for k in METRIC_NAMES if math.isnan(values[k])]
    return rep


def aggregate(
    samples: Iterable[tuple[str, ConfusionCounts]], include_degenerate: bool = False, accuracy_over_positives: bool = False
) -> BatchReport:
    items = list(samples)
    if not items:
        raise DataError("cannot aggregate an empty split")
    per = [(sid, c, metric_suite(c, accuracy_over_positives)) for sid, c in items]
    total = ConfusionCounts(0, 0, 0, 0)
    for _, c, _ in per:
        total = total + c
    return BatchReport(
        micro=metric_suite(total, accuracy_over_positives),
        macro=macro_average([r for _, _, r in per], include_degenerate),
        per_sample=per,
    )


def evaluate_batch(
    predict: Callable[[np.ndarray], np.ndarray],
    samples: Iterable,
    include_degenerate: bool = False,
    accuracy_over_positives: bool = False,
) -> BatchReport:
    """Score ``predict(image) -> binary mask`` over samples with ``image``, ``mask``, ``source_id``."""
    counts = []
    for s in samples:
        counts.append((s.source_id, confusion(predict(s.image), s.mask)))
    return aggregate(counts, include_degenerate, accuracy_over_positives)


def format_table(rows: dict[str, MetricReport], label: str = "") -> str:
    """Aligned text table, metrics as percentages with two decimals."""
    name_w = max([len(label)] + [len(n) for n in rows]) + 2
    head = f"{label:<{name_w}}" + "".join(f"{k:>13}" for k in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        lines.append(f"{name:<{name_w}}" + "".join(f"{v:>13}" for v in rep.percent_row()))
    return "\n".join(lines)


def harmonic_mean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f1_consistent(precision: float, recall: float, f1: float, decimals: int = 2) -> bool:
    """Can a reported F1 follow from precision and recall rounded to ``decimals`` places?

    All three figures carry a rounding error of half a unit in the last place.
    F1 is increasing in both arguments, so the set of exact F1 values is the
    interval between the two corner values; the reported F1 must round from
    somewhere inside it.
    """
    half = 0.5 * 10.0**-decimals
    lo = harmonic_mean(precision - half, recall - half)
    hi = harmonic_mean(precision + half, recall + half)
    return lo - half <= f1 <= hi + half
