"""Format-success and overall metrics, plus macro-F1 over a fixed label set."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Iterable, Sequence

from .types import Dataset, LabelSchema, MetricsReport, Prediction


class CoverageError(ValueError):
    """Predictions do not cover the evaluated split exactly once."""


@dataclass
class ConfusionCounts:
    labels: tuple[str, ...]
    tp: dict[str, int] = field(default_factory=dict)
    fp: dict[str, int] = field(default_factory=dict)
    fn: dict[str, int] = field(default_factory=dict)

    def f1(self, label: str) -> Fraction:
        tp, fp, fn = self.tp.get(label, 0), self.fp.get(label, 0), self.fn.get(label, 0)
        # 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); zero when TP is zero
        if tp == 0:
            return Fraction(0)
        return Fraction(2 * tp, 2 * tp + fp + fn)

    def macro_f1(self) -> float:
        if not self.labels:
            return 0.0
        return float(sum((self.f1(c) for c in self.labels), Fraction(0)) / len(self.labels))


def confusion_counts(
    gold: Sequence[str], pred: Sequence[str | None], label_set: Iterable[str]
) -> ConfusionCounts:
    """Per-label TP/FP/FN. A ``None`` prediction is a miss for the gold class only."""
    if len(gold) != len(pred):
        raise ValueError(f"gold and pred lengths differ: {len(gold)} vs {len(pred)}")
    labels = tuple(label_set)
    known = set(labels)
    counts = ConfusionCounts(labels)
    for g, p in zip(gold, pred):
        if g not in known:
            raise ValueError(f"gold label {g!r} is outside the label set")
        if p == g:
            counts.tp[g] = counts.tp.get(g, 0) + 1
            continue
        counts.fn[g] = counts.fn.get(g, 0) + 1
        if p is not None:
            counts.fp[p] = counts.fp.get(p, 0) + 1
    return counts


def macro_f1(gold: Sequence[str], pred: Sequence[str | None], label_set: Iterable[str]) -> float:
    """Unweighted mean of per-class F1 over the whole declared label set."""
    return confusion_counts(gold, pred, label_set).macro_f1()


def evaluate(
    predictions: Sequence[Prediction],
    dataset: Dataset,
    schema: LabelSchema,
    *,
    case_fold: bool = False,
) -> MetricsReport:
    by_id: dict[str, Prediction] = {}
    for p in predictions:
        if p.example_id in by_id:
            raise CoverageError(f"duplicate prediction for {p.example_id!r}")
        by_id[p.example_id] = p
    ids = [ex.id for ex in dataset.examples]
    missing = [i for i in ids if i not in by_id]
    extra = sorted(set(by_id) - set(ids))
    if missing or extra:
        raise CoverageError(
            f"coverage mismatch: {len(missing)} missing (e.g. {missing[:3]}), "
            f"{len(extra)} unexpected (e.g. {extra[:3]})"
        )

    gold: list[str] = []
    pred: list[str | None] = []
    for ex in dataset.examples:
        g = schema.lookup(ex.gold, case_fold)
        if g is None:
            raise ValueError(f"example {ex.id!r} has gold {ex.gold!r} outside the schema")
        p = by_id[ex.id]
        label = schema.lookup(p.parsed_label, case_fold) if p.format_ok else None
        gold.append(g)
        pred.append(label)

    n = len(gold)
    ok = [i for i in range(n) if pred[i] is not None]
    n_ok = len(ok)
    n_correct = sum(1 for i in ok if pred[i] == gold[i])
    labels = list(schema.labels)

    if n_ok:
        fmt_acc = n_correct / n_ok
        fmt_f1 = macro_f1([gold[i] for i in ok], [pred[i] for i in ok], labels)
    else:
        fmt_acc = fmt_f1 = 0.0
    return MetricsReport(
        n_total=n,
        n_format_ok=n_ok,
        n_correct=n_correct,
        fmt_suc_ratio=n_ok / n if n else 0.0,
        fmt_suc_acc=fmt_acc,
        fmt_suc_macro_f1=fmt_f1,
        overall_acc=n_correct / n if n else 0.0,
        overall_macro_f1=macro_f1(gold, pred, labels) if n else 0.0,
        empty_format_subset=n_ok == 0,
    )


def pct(fraction: float, places: int = 2) -> str:
    """Render a fraction as a percentage, rounded half-up."""
    quantum = Decimal(1).scaleb(-places)
    return str((Decimal(repr(fraction)) * 100).quantize(quantum, rounding=ROUND_HALF_UP))
