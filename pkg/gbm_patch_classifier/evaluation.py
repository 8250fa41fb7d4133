"""
Confusion matrices and classification metrics.

Every ratio metric and both MCC variants evaluate to 0 when their denominator is 0.
All functions are pure.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES
from .exceptions import MetricError
from .file_handler import FileHandler
from .utils import format_float


METRICS: Tuple[str, ...] = ("accuracy", "recall", "precision", "specificity", "f1")
AGGREGATION_MODES: Tuple[str, ...] = ("per_class", "micro", "macro")
# report scope of the micro accuracy, which is the multiclass accuracy rather than the pooled one
MICRO_ACCURACY_SCOPE = "micro_multiclass"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Entry (i, j) counts samples of true class i predicted as class j."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer) or np.any(counts < 0):
            raise ValueError("confusion matrix entries must be non-negative integers")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def true_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def predicted_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def permuted(self, order: Sequence[int]) -> "ConfusionMatrix":
        '''Relabels classes so that new class i is old class `order[i]`.'''
        order = np.asarray(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)])


def confusion_from_predictions(
        true_labels: Sequence[int],
        predicted_labels: Sequence[int],
        num_classes: int = NUM_CLASSES
    ) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and equally long, got {true_labels.shape} and {predicted_labels.shape}")
    for name, labels in (("true", true_labels), ("predicted", predicted_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in 0..{num_classes - 1}")
    flat = np.bincount(true_labels * num_classes + predicted_labels, minlength=num_classes * num_classes)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes))


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f"`{name}` cannot be negative")
            object.__setattr__(self, name, value)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "BinaryCounts") -> "BinaryCounts":
        return BinaryCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def flipped(self) -> "BinaryCounts":
        '''Counts after swapping positive and negative predictions.'''
        return BinaryCounts(tp=self.fn, fp=self.tn, tn=self.fp, fn=self.tp)


def one_vs_rest(cm: ConfusionMatrix, k: int) -> BinaryCounts:
    if not 0 <= k < cm.num_classes:
        raise ValueError(f"class index {k} out of range")
    tp = int(cm.counts[k, k])
    fn = int(cm.counts[k].sum()) - tp
    fp = int(cm.counts[:, k].sum()) - tp
    return BinaryCounts(tp=tp, fp=fp, tn=cm.total - tp - fn - fp, fn=fn)


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def _require_samples(b: BinaryCounts) -> None:
    if b.total == 0:
        raise MetricError("binary counts are all zero")


def accuracy(b: BinaryCounts) -> float:
    _require_samples(b)
    return _ratio(b.tp + b.tn, b.total)


def recall(b: BinaryCounts) -> float:
    _require_samples(b)
    return _ratio(b.tp, b.tp + b.fn)


def specificity(b: BinaryCounts) -> float:
    _require_samples(b)
    return _ratio(b.tn, b.tn + b.fp)


def precision(b: BinaryCounts) -> float:
    _require_samples(b)
    return _ratio(b.tp, b.tp + b.fp)


def f1(b: BinaryCounts) -> float:
    p, r = precision(b), recall(b)
    return _ratio(2 * p * r, p + r)


METRIC_FUNCTIONS: Dict[str, Callable[[BinaryCounts], float]] = {
    "accuracy": accuracy,
    "recall": recall,
    "precision": precision,
    "specificity": specificity,
    "f1": f1,
}


def mcc_binary(b: BinaryCounts) -> float:
    _require_samples(b)
    # python ints keep the products exact
    denominator = (b.tp + b.fp) * (b.tp + b.fn) * (b.tn + b.fp) * (b.tn + b.fn)
    if denominator == 0:
        return 0.0
    return (b.tp * b.tn - b.fp * b.fn) / math.sqrt(denominator)


def mcc_multiclass(cm: ConfusionMatrix) -> float:
    '''
    Generalised correlation over the K x K matrix (Gorodkin's statistic).

    A zero denominator yields 0 and takes precedence over the diagonal case: a diagonal matrix
    scores 1.0 only when at least two classes are populated. With every sample in one class
    (true and predicted) both factors of the denominator vanish and the result is 0.
    '''
    s = cm.total
    if s == 0:
        raise MetricError("confusion matrix is empty")
    c = cm.correct
    p = [int(v) for v in cm.predicted_counts]
    t = [int(v) for v in cm.true_counts]
    numerator = c * s - sum(pk * tk for pk, tk in zip(p, t))
    denominator = (s * s - sum(pk * pk for pk in p)) * (s * s - sum(tk * tk for tk in t))
    if denominator == 0:
        return 0.0
    return numerator / math.sqrt(denominator)


def class_names_for(num_classes: int) -> Tuple[str, ...]:
    return CLASS_NAMES if num_classes == NUM_CLASSES else tuple(str(k) for k in range(num_classes))


def pooled_counts(cm: ConfusionMatrix) -> BinaryCounts:
    '''One-vs-rest counts summed over every class.'''
    pooled = BinaryCounts(0, 0, 0, 0)
    for k in range(cm.num_classes):
        pooled = pooled + one_vs_rest(cm, k)
    return pooled


def aggregate(cm: ConfusionMatrix, mode: str) -> Dict:
    '''
    Metric values under one aggregation mode.

    "per_class" maps class name to its metrics; "micro" applies the formulas to counts pooled over
    classes, with accuracy reported as the multiclass accuracy; "macro" averages per-class values.
    '''
    if cm.total == 0:
        raise MetricError("confusion matrix is empty")
    names = class_names_for(cm.num_classes)
    if mode == "per_class":
        return {
            names[k]: {metric: fn(one_vs_rest(cm, k)) for metric, fn in METRIC_FUNCTIONS.items()}
            for k in range(cm.num_classes)
        }
    if mode == "micro":
        values = {metric: fn(pooled_counts(cm)) for metric, fn in METRIC_FUNCTIONS.items()}
        values["accuracy"] = cm.correct / cm.total
        return values
    if mode == "micro_pooled":
        return {metric: fn(pooled_counts(cm)) for metric, fn in METRIC_FUNCTIONS.items()}
    if mode == "macro":
        per_class = aggregate(cm, "per_class")
        return {metric: float(np.mean([per_class[name][metric] for name in names])) for metric in METRICS}
    raise ValueError(f"unknown aggregation mode `{mode}`; expected one of {AGGREGATION_MODES + ('micro_pooled',)}")


@dataclass
class MetricReport:
    """
    #### Metrics for one confusion matrix under every aggregation mode.

    @attr dict `micro`: pooled one-vs-rest metrics; accuracy is the multiclass accuracy and is
    written under the `micro_multiclass` scope by `rows`.

    @attr dict `micro_pooled`: the pooled counts run through every formula, accuracy included.
    """
    per_class: Dict[str, Dict[str, float]]
    micro: Dict[str, float]
    micro_pooled: Dict[str, float]
    macro: Dict[str, float]
    accuracy_multiclass: float
    mcc_binary_per_class: Dict[str, float]
    mcc_binary_macro: float
    mcc_multiclass: float
    sample_count: int
    confusion: ConfusionMatrix | None = field(default=None, repr=False)

    def rows(self) -> List[Tuple[str, str, float]]:
        '''`(metric, scope, value)` rows in a fixed order.'''
        rows: List[Tuple[str, str, float]] = []
        for metric in METRICS:
            for name, values in self.per_class.items():
                rows.append((metric, name, values[metric]))
            rows.append((metric, MICRO_ACCURACY_SCOPE if metric == "accuracy" else "micro", self.micro[metric]))
            rows.append((metric, "micro_pooled", self.micro_pooled[metric]))
            rows.append((metric, "macro", self.macro[metric]))
        for name, value in self.mcc_binary_per_class.items():
            rows.append(("mcc_binary", name, value))
        rows.append(("mcc_binary", "macro", self.mcc_binary_macro))
        rows.append(("mcc_multiclass", "multiclass", self.mcc_multiclass))
        rows.append(("accuracy", "multiclass", self.accuracy_multiclass))
        rows.append(("samples", "all", float(self.sample_count)))
        return rows

    def value(self, metric: str, scope: str) -> float:
        for row_metric, row_scope, value in self.rows():
            if (row_metric, row_scope) == (metric, scope):
                return value
        raise KeyError(f"no value for metric `{metric}` in scope `{scope}`")

    def csv_rows(self) -> List[List[str]]:
        return [["metric", "scope", "value"]] + [[m, s, format_float(v)] for m, s, v in self.rows()]

    def write_csv(self, path: str) -> None:
        FileHandler(path).write_to_file(self.csv_rows())

    def render_table(self) -> str:
        '''Plain-text table: one row per metric, one column per class plus micro and macro.'''
        scopes = list(self.per_class) + ["micro", "micro_pooled", "macro"]
        width = max(12, *(len(s) + 2 for s in scopes))
        lines = ["metric".ljust(14) + "".join(s.rjust(width) for s in scopes)]
        for metric in METRICS:
            values = [self.per_class[name][metric] for name in self.per_class]
            values += [self.micro[metric], self.micro_pooled[metric], self.macro[metric]]
            lines.append(metric.ljust(14) + "".join(f"{v:.6f}".rjust(width) for v in values))
        mcc = [self.mcc_binary_per_class[name] for name in self.per_class]
        lines.append("mcc_binary".ljust(14) + "".join(f"{v:.6f}".rjust(width) for v in mcc) + "".rjust(width * 2) + f"{self.mcc_binary_macro:.6f}".rjust(width))
        lines.append("")
        lines.append(f"multiclass accuracy: {self.accuracy_multiclass:.6f}")
        lines.append(f"multiclass mcc:      {self.mcc_multiclass:.6f}")
        lines.append(f"samples:             {self.sample_count}")
        lines.append("micro accuracy is the multiclass accuracy; micro_pooled accuracy uses the pooled counts")
        lines.append("zero denominators evaluate to 0")
        return "\n".join(lines)


def build_report(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise MetricError("confusion matrix is empty")
    names = class_names_for(cm.num_classes)
    mcc_per_class = {names[k]: mcc_binary(one_vs_rest(cm, k)) for k in range(cm.num_classes)}
    return MetricReport(
        per_class=aggregate(cm, "per_class"),
        micro=aggregate(cm, "micro"),
        micro_pooled=aggregate(cm, "micro_pooled"),
        macro=aggregate(cm, "macro"),
        accuracy_multiclass=cm.correct / cm.total,
        mcc_binary_per_class=mcc_per_class,
        mcc_binary_macro=float(np.mean(list(mcc_per_class.values()))),
        mcc_multiclass=mcc_multiclass(cm),
        sample_count=cm.total,
        confusion=cm,
    )


def evaluate_predictions(true_labels: Sequence[int], predicted_labels: Sequence[int]) -> MetricReport:
    return build_report(confusion_from_predictions(true_labels, predicted_labels))


def summarize_reports(reports: Sequence[MetricReport]) -> List[Tuple[str, str, float, float, float]]:
    '''`(metric, scope, mean, min, max)` across reports, in the row order of the first one.'''
    if not reports:
        raise MetricError("no reports to summarize")
    tables = [{(m, s): v for m, s, v in report.rows()} for report in reports]
    summary = []
    for metric, scope, _ in reports[0].rows():
        values = np.array([table[(metric, scope)] for table in tables], dtype=np.float64)
        summary.append((metric, scope, float(values.mean()), float(values.min()), float(values.max())))
    return summary


def write_summary(path: str, summary: Sequence[Tuple[str, str, float, float, float]]) -> None:
    rows = [["metric", "scope", "mean", "min", "max"]]
    rows.extend([m, s, format_float(mean), format_float(lo), format_float(hi)] for m, s, mean, lo, hi in summary)
    FileHandler(path).write_to_file(rows)
