"""Per-class confusion counts, accuracy/precision, aggregation and report tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .tensor import ShapeError


class UndefinedMetric(ZeroDivisionError):
    pass


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.tp)

    def totals(self) -> np.ndarray:
        return self.tp + self.tn + self.fp + self.fn

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tp", "tn", "fp", "fn")}

    @classmethod
    def from_json(cls, d: dict) -> "ConfusionCounts":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("tp", "tn", "fp", "fn")))


def confusion(predictions: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    if predictions.shape != labels.shape or predictions.ndim != 2:
        raise ShapeError(f"predictions {predictions.shape} vs labels {labels.shape}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pos = predictions >= threshold
    t = labels.astype(bool)
    count = lambda m: m.sum(axis=0).astype(np.int64)
    return ConfusionCounts(tp=count(pos & t), tn=count(~pos & ~t), fp=count(pos & ~t), fn=count(~pos & t))


def accuracy(c: ConfusionCounts, k: int) -> float:
    total = int(c.tp[k] + c.tn[k] + c.fp[k] + c.fn[k])
    if total == 0:
        raise UndefinedMetric(f"class {k}: no examples evaluated")
    return int(c.tp[k] + c.tn[k]) / total


def precision(c: ConfusionCounts, k: int) -> tuple[float, bool]:
    """``tp / (tp + fp)``; returns ``(0.0, True)`` when nothing was predicted positive."""
    denom = int(c.tp[k] + c.fp[k])
    if denom == 0:
        return 0.0, True
    return int(c.tp[k]) / denom, False


@dataclass
class MetricsReport:
    attribute_names: list[str]
    accuracy: list[float]
    precision: list[float]
    precision_undefined: list[bool]
    overall_accuracy_macro: float
    overall_precision_macro: float
    overall_precision_micro: float | None = None
    counts: ConfusionCounts | None = None
    label: str = ""

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "attribute_names", "accuracy", "precision", "precision_undefined",
            "overall_accuracy_macro", "overall_precision_macro", "overall_precision_micro", "label")}
        d["counts"] = self.counts.to_json() if self.counts is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        counts = d.pop("counts", None)
        return cls(**d, counts=ConfusionCounts.from_json(counts) if counts else None)


def aggregate(accuracies: Sequence[float], precisions: Sequence[float],
              counts: ConfusionCounts | None = None,
              undefined: Sequence[bool] | None = None,
              attribute_names: Sequence[str] | None = None) -> MetricsReport:
    """Macro means of the per-class values; micro precision from summed counts."""
    k = len(accuracies)
    if k < 1 or len(precisions) != k:
        raise ValueError("need one accuracy and one precision per class")
    micro = None
    if counts is not None:
        tp, fp = int(counts.tp.sum()), int(counts.fp.sum())
        micro = tp / (tp + fp) if tp + fp else 0.0
    return MetricsReport(
        attribute_names=list(attribute_names or [f"class_{i}" for i in range(k)]),
        accuracy=[float(a) for a in accuracies],
        precision=[float(p) for p in precisions],
        precision_undefined=list(undefined or [False] * k),
        overall_accuracy_macro=float(np.mean(accuracies)),
        overall_precision_macro=float(np.mean(precisions)),
        overall_precision_micro=micro,
        counts=counts)


def evaluate(predictions: np.ndarray, labels: np.ndarray, attribute_names: Sequence[str],
             threshold: float = 0.5) -> MetricsReport:
    c = confusion(predictions, labels, threshold)
    accs = [accuracy(c, k) for k in range(c.classes)]
    precs = [precision(c, k) for k in range(c.classes)]
    return aggregate(accs, [p for p, _ in precs], c, [u for _, u in precs], attribute_names)


# ---------------------------------------------------------------- presentation

def present(value: float, percent: bool = True) -> str:
    """Two decimals, round half up (the tables' convention)."""
    v = Decimal(repr(value * 100 if percent else value))
    return str(v.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ComparisonTables:
    accuracy_text: str
    precision_text: str
    accuracy_csv: str
    precision_csv: str
    accuracy_rows: list[list[str]] = field(default_factory=list)
    precision_rows: list[list[str]] = field(default_factory=list)


def _table(reports: Mapping[str, MetricsReport], metric: str, percent: bool):
    names = next(iter(reports.values())).attribute_names
    header = ["algorithm", *names, "overall_macro"]
    if metric == "precision":
        header.append("overall_micro")
    rows = []
    for algo, r in reports.items():
        values = list(getattr(r, metric))
        values.append(r.overall_accuracy_macro if metric == "accuracy" else r.overall_precision_macro)
        if metric == "precision":
            values.append(r.overall_precision_micro)
        rows.append((algo, values))
    return header, rows


def _render_text(title: str, header, rows, percent: bool) -> tuple[str, list[list[str]]]:
    cells = [[algo] + ["n/a" if v is None else present(v, percent) for v in vals] for algo, vals in rows]
    # bold-mark column maxima (ties all marked)
    for j in range(1, len(header)):
        col = [vals[j - 1] for _, vals in rows]
        known = [v for v in col if v is not None]
        if not known:
            continue
        best = present(max(known), percent)
        for i, v in enumerate(col):
            if v is not None and present(v, percent) == best:
                cells[i][j] = f"**{cells[i][j]}**"
    widths = [max(len(str(x)) for x in [h, *(c[j] for c in cells)]) for j, h in enumerate(header)]
    fmt = lambda row: "  ".join(str(x).ljust(widths[0]) if j == 0 else str(x).rjust(widths[j])
                                for j, x in enumerate(row))
    lines = [title, fmt(header), "  ".join("-" * w for w in widths), *(fmt(c) for c in cells)]
    return "\n".join(lines) + "\n", cells


def _render_csv(header, rows, percent: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for algo, vals in rows:
        w.writerow([algo, *("" if v is None else present(v, percent) for v in vals)])
    return buf.getvalue()


def render_comparison(reports: Mapping[str, MetricsReport], percent: bool = True) -> ComparisonTables:
    """Accuracy and precision tables: one row per algorithm, one column per
    attribute plus overall. Values are shown as percentages."""
    if not reports:
        raise ValueError("no reports to render")
    first = next(iter(reports.values()))
    for algo, r in reports.items():
        if r.attribute_names != first.attribute_names:
            raise ValueError(f"{algo}: attributes {r.attribute_names} differ from {first.attribute_names}")
    ah, arows = _table(reports, "accuracy", percent)
    ph, prows = _table(reports, "precision", percent)
    at, acells = _render_text("Classification accuracy (%)", ah, arows, percent)
    pt, pcells = _render_text("Classification precision (%)", ph, prows, percent)
    return ComparisonTables(at, pt, _render_csv(ah, arows, percent), _render_csv(ph, prows, percent),
                            acells, pcells)
