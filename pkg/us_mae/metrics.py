"""
Evaluation metrics: top-k accuracy, time-of-flight error in nanoseconds,
confusion counts and aggregation over repeated runs.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import UsageError
from .formats import atomic_write
from .signal_synth import SAMPLE_RATE

TOPK_CHOICES = (2, 5)
REPORT_METRICS = ("top1", "topk", "tof_mae_ns", "loss")


@dataclass
class EvalReport:
    """Classification quality on one labeled split."""
    top1: float
    topk: float
    k: int
    tof_mae_ns: float
    count: int
    loss: Optional[float] = None
    confusion: Optional[np.ndarray] = field(default=None, repr=False)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {"top1": self.top1, "topk": self.topk, "tof_mae_ns": self.tof_mae_ns, "loss": self.loss}


@dataclass
class RunStats:
    """Mean and sample standard deviation over n runs; std is None for n == 1."""
    mean: float
    std: Optional[float]
    n: int


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"Labels must lie in 0-{num_classes - 1}")
    return labels.astype(np.int64)


def label_ranks(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    Zero-based rank of each true label among its row's logits. Equal
    logits rank the lower class index first.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or np.shape(labels) != (logits.shape[0],):
        raise UsageError(f"Expected logits (B, C) and labels (B,), got {logits.shape} and {np.shape(labels)}")
    labels = _check_labels(labels, logits.shape[1])
    target = logits[np.arange(labels.size), labels][:, None]
    higher = (logits > target).sum(axis=1)
    tied_before = ((logits == target) & (np.arange(logits.shape[1]) < labels[:, None])).sum(axis=1)
    return higher + tied_before


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    logits = np.asarray(logits)
    if not 1 <= k <= logits.shape[-1]:
        raise UsageError(f"k must be in 1-{logits.shape[-1]}, got {k}")
    ranks = label_ranks(logits, labels)
    if ranks.size == 0:
        raise UsageError("Accuracy of an empty batch is undefined")
    return float(np.mean(ranks < k))


def predictions(logits: np.ndarray) -> np.ndarray:
    """Arg-max class per row; ties go to the lower index."""
    return np.argmax(np.asarray(logits), axis=-1)


def tof_mae_ns(predicted: np.ndarray, true: np.ndarray, sample_rate: float = SAMPLE_RATE) -> float:
    """Mean absolute class error converted to nanoseconds at `sample_rate`."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise UsageError(f"Length mismatch: {predicted.shape} predictions vs {true.shape} labels")
    if predicted.size == 0:
        raise UsageError("ToF error of an empty batch is undefined")
    if sample_rate <= 0:
        raise UsageError(f"Sample rate must be > 0, got {sample_rate}")
    return float(np.mean(np.abs(predicted - true)) / sample_rate * 1e9)


def confusion_matrix(predicted: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[true, predicted]; row sums equal class support."""
    predicted = _check_labels(predicted, num_classes)
    true = _check_labels(true, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, predicted), 1)
    return counts


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(labels.size), labels]))


def evaluate(
    logits: np.ndarray,
    labels: np.ndarray,
    k: int = 5,
    sample_rate: float = SAMPLE_RATE,
    with_confusion: bool = True,
) -> EvalReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    predicted = predictions(logits)
    return EvalReport(
        top1=topk_accuracy(logits, labels, 1),
        topk=topk_accuracy(logits, labels, k),
        k=k,
        tof_mae_ns=tof_mae_ns(predicted, labels, sample_rate),
        count=int(labels.size),
        loss=mean_cross_entropy(logits, labels),
        confusion=confusion_matrix(predicted, labels, logits.shape[1]) if with_confusion else None,
    )


def aggregate_runs(reports: Sequence[EvalReport]) -> Dict[str, RunStats]:
    """Per-metric mean and sample std (n - 1 denominator) over runs."""
    if not reports:
        raise UsageError("Cannot aggregate an empty list of reports")
    if len({r.k for r in reports}) != 1:
        raise UsageError("Reports disagree on k")
    stats = {}
    for metric in REPORT_METRICS:
        values = [r.as_dict()[metric] for r in reports]
        if any(v is None for v in values):
            continue
        array = np.asarray(values, dtype=np.float64)
        std = float(np.std(array, ddof=1)) if array.size > 1 else None
        stats[metric] = RunStats(mean=float(array.mean()), std=std, n=int(array.size))
    return stats


# ==================== Rendering ====================

HORIZONTAL = "─"
VERTICAL = "│"
BOX_WIDTH = 50


def _pad_line(content: str) -> str:
    return f"{VERTICAL}  {content.ljust(BOX_WIDTH - 4)}  {VERTICAL}"


def _box(title: str, rows: List[str]) -> str:
    lines = [f"┌{HORIZONTAL * BOX_WIDTH}┐", _pad_line(title), f"├{HORIZONTAL * BOX_WIDTH}┤"]
    lines.extend(_pad_line(row) for row in rows)
    lines.append(f"└{HORIZONTAL * BOX_WIDTH}┘")
    return "\n".join(lines)


def format_report(report: EvalReport, title: str = "Evaluation") -> str:
    rows = [
        f"Examples:      {report.count:,}",
        f"Top-1:         {report.top1 * 100:6.2f} %",
        f"Top-{report.k}:         {report.topk * 100:6.2f} %",
        f"ToF MAE:       {report.tof_mae_ns:8.2f} ns",
    ]
    if report.loss is not None:
        rows.append(f"Loss:          {report.loss:8.4f}")
    return _box(title, rows)


def _format_stat(stat: RunStats, percent: bool) -> str:
    factor = 100.0 if percent else 1.0
    if stat.std is None:
        return f"{stat.mean * factor:8.2f} (n=1, std n/a)"
    return f"{stat.mean * factor:8.2f} ± {stat.std * factor:.2f} (n={stat.n})"


def format_aggregate(stats: Dict[str, RunStats], k: int, title: str = "Runs") -> str:
    labels = {"top1": ("Top-1 %", True), "topk": (f"Top-{k} %", True),
              "tof_mae_ns": ("ToF MAE ns", False), "loss": ("Loss", False)}
    rows = [f"{labels[m][0]:<12} {_format_stat(s, labels[m][1])}" for m, s in stats.items()]
    return _box(title, rows)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")


def write_report_csv(path: str, reports: Sequence[EvalReport]) -> None:
    """One row per (run, metric)."""
    rows = []
    for run, report in enumerate(reports):
        rows.append([run, "top1", report.top1])
        rows.append([run, f"top{report.k}", report.topk])
        rows.append([run, "tof_mae_ns", report.tof_mae_ns])
        if report.loss is not None:
            rows.append([run, "loss", report.loss])
    atomic_write(path, _csv_text(["run", "metric", "value"], rows))


def write_aggregate_csv(path: str, stats: Dict[str, RunStats]) -> None:
    rows = [[m, s.mean, "" if s.std is None else s.std, s.n] for m, s in stats.items()]
    atomic_write(path, _csv_text(["metric", "mean", "std", "n"], rows))


def write_confusion_csv(path: str, confusion: np.ndarray) -> None:
    """Long format: true, predicted, count for every nonzero cell."""
    true, predicted = np.nonzero(confusion)
    rows = [[int(t), int(p), int(confusion[t, p])] for t, p in zip(true, predicted)]
    atomic_write(path, _csv_text(["true", "predicted", "count"], rows))


def write_rows_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    atomic_write(path, _csv_text(header, rows))
