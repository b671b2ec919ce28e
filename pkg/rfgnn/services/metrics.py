"""
Confusion-matrix metrics, multi-seed aggregation and report tables.

Binary metrics treat the bot class (POSITIVE_CLASS) as positive. With more
than two classes the headline precision/recall/F1 are macro averages of the
one-vs-rest per-class values.
"""
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from rfgnn.config import POSITIVE_CLASS
from rfgnn.models import ClassMetrics, Confusion, MetricsReport

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


class MetricsError(Exception):
    """Custom exception for metric computation errors"""
    pass


def _masked(pred_classes, labels, mask):
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise MetricsError("cannot evaluate on an empty mask")
    pred = np.asarray(pred_classes, dtype=np.int64)[mask]
    true = np.asarray(labels, dtype=np.int64)[mask]
    if np.any(true < 0):
        raise MetricsError("mask contains unlabeled nodes")
    return pred, true


def confusion(pred_classes, labels, mask, positive: int = POSITIVE_CLASS) -> Confusion:
    """Counts over the masked nodes, with `positive` as the positive class"""
    pred, true = _masked(pred_classes, labels, mask)
    pred_pos = pred == positive
    true_pos = true == positive
    return Confusion(
        tp=int(np.sum(pred_pos & true_pos)),
        tn=int(np.sum(~pred_pos & ~true_pos)),
        fp=int(np.sum(pred_pos & ~true_pos)),
        fn=int(np.sum(~pred_pos & true_pos)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def precision_recall_f1(c: Confusion):
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


def metrics_from_confusion(c: Confusion) -> Dict[str, float]:
    """
    Accuracy, precision, recall and F1 of a confusion matrix.

    precision is 0 when tp + fp = 0, recall is 0 when tp + fn = 0 and f1 is
    0 when precision + recall = 0.

    Raises:
        MetricsError: If the matrix is empty
    """
    if c.total == 0:
        raise MetricsError("empty confusion matrix")
    precision, recall, f1 = precision_recall_f1(c)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def per_class_metrics(pred_classes, labels, mask, num_classes: int) -> List[ClassMetrics]:
    """One-vs-rest precision/recall/F1 for every class"""
    out = []
    for label in range(num_classes):
        p, r, f = precision_recall_f1(confusion(pred_classes, labels, mask, positive=label))
        out.append(ClassMetrics(label=label, precision=p, recall=r, f1=f))
    return out


def accuracy(pred_classes, labels, mask) -> float:
    pred, true = _masked(pred_classes, labels, mask)
    return float(np.mean(pred == true))


def evaluate_predictions(
    pred_classes,
    labels,
    mask,
    num_classes: int,
    branch_outputs: Optional[Sequence[np.ndarray]] = None,
    similarity: Optional[np.ndarray] = None,
    config: Optional[Dict[str, Any]] = None,
    variant: Optional[str] = None,
    seed: Optional[int] = None,
) -> MetricsReport:
    """Assemble the full report for one model on one mask"""
    c = confusion(pred_classes, labels, mask)
    core = metrics_from_confusion(c)
    per_class = per_class_metrics(pred_classes, labels, mask, num_classes)
    if num_classes > 2:
        core["accuracy"] = accuracy(pred_classes, labels, mask)
        core["precision"] = float(np.mean([m.precision for m in per_class]))
        core["recall"] = float(np.mean([m.recall for m in per_class]))
        core["f1"] = float(np.mean([m.f1 for m in per_class]))

    branch_acc = []
    if branch_outputs is not None:
        branch_acc = [accuracy(np.argmax(out, axis=1), labels, mask) for out in branch_outputs]

    return MetricsReport(
        **core,
        confusion=c,
        per_class=per_class,
        branch_accuracies=branch_acc,
        branch_similarity=[] if similarity is None else np.asarray(similarity).tolist(),
        config=config,
        variant=variant,
        seed=seed,
    )


def aggregate_runs(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation (n - 1; 0 for one run) per metric"""
    if not reports:
        raise MetricsError("no runs to aggregate")
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        summary[name] = {"mean": float(np.mean(values)), "std": std, "n": int(values.size)}
    return summary


def format_mean_std(entry: Dict[str, float], scale: float = 100.0) -> str:
    return f"{entry['mean'] * scale:.2f} ± {entry['std'] * scale:.2f}"


def render_text_table(rows: Sequence[Sequence[Any]], columns: Sequence[str]) -> str:
    """Plain-text table: left-aligned first column, right-aligned others"""
    cells = [[str(c) for c in columns]] + [[str(v) for v in row] for row in rows]
    for row in cells:
        if len(row) != len(columns):
            raise MetricsError(f"row {row} has {len(row)} cells, expected {len(columns)}")
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]

    def line(row):
        parts = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]]) + "\n"
