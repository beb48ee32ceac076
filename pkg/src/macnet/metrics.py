"""Class-weighted cross-entropy and the evaluation statistics built on a confusion matrix."""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateWeightsError, LabelError
from .tensor import as_tensor, make_result

LOG_CLAMP = 1e-12


@dataclass
class ClassWeights:
    weights: np.ndarray
    class_counts: np.ndarray
    total: int
    class_names: list = None

    def __len__(self):
        return len(self.weights)


def compute_class_weights(class_counts, class_names=None):
    """Per-class loss weights ``1 - N_y / N``.

    ``class_counts`` is a sequence of counts or a ``{name: count}`` mapping.
    """
    if hasattr(class_counts, "items"):
        class_names = list(class_counts.keys())
        class_counts = list(class_counts.values())
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or (counts < 0).any():
        raise ContractError("class counts must be a non-empty list of non-negative integers")
    total = int(counts.sum())
    nonempty = int((counts > 0).sum())
    if nonempty == 0:
        raise ContractError("at least one class needs a positive count")
    if nonempty == 1:
        only = int(np.flatnonzero(counts)[0])
        label = class_names[only] if class_names else only
        raise DegenerateWeightsError(
            f"only class {label!r} has instances; its weight 1 - N/N = 0 would zero the loss"
        )
    weights = 1.0 - counts / total
    return ClassWeights(weights, counts, total, class_names)


def _check_labels(labels, n, k):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} outside [0, {k})")
    return labels


def weighted_cross_entropy(probabilities, labels, weights):
    """Scalar ``-sum_j w[y_j] * log(p_j[y_j])`` over the batch (summed, not averaged).

    ``labels`` may be class indices or one-hot rows.  Log arguments are
    clamped at 1e-12; below the clamp the gradient is zero.
    """
    p = as_tensor(probabilities)
    if p.ndim != 2:
        raise ContractError(f"probabilities must be (N, K), got {p.shape}")
    n, k = p.shape
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if len(w) != k:
        raise ContractError(f"{len(w)} class weights for {k} classes")
    y = _check_labels(labels, n, k)
    row_sums = p.data.sum(axis=1, dtype=np.float64)
    if np.abs(row_sums - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError(f"probability rows must sum to 1 (max deviation {np.abs(row_sums - 1).max():.3g})")
    rows = np.arange(n)
    picked = p.data[rows, y]
    clamped = np.maximum(picked, p.dtype.type(LOG_CLAMP))
    wy = w[y].astype(p.dtype)
    loss = -(wy * np.log(clamped)).sum()

    def grad_fn(g):
        gp = np.zeros_like(p.data)
        gp[rows, y] = np.where(picked > LOG_CLAMP, -wy / clamped, 0.0) * g
        return (gp,)

    return make_result(np.asarray(loss, dtype=p.dtype), (p,), grad_fn, "weighted_cross_entropy")


def top_k_accuracy(probabilities, labels, k):
    probs = np.asarray(getattr(probabilities, "data", probabilities))
    n, num_classes = probs.shape
    if not 1 <= k <= num_classes:
        raise ContractError(f"k must be in [1, {num_classes}], got {k}")
    y = _check_labels(labels, n, num_classes)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float((order == y[:, None]).any(axis=1).mean())


def confusion_matrix(true_labels, predicted, num_classes):
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (true_labels, predicted), 1)
    return m


def merge_confusion(*matrices):
    """Combine shard-level confusion matrices by elementwise addition."""
    return np.sum(np.stack(matrices), axis=0)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class EvalReport:
    class_names: list
    support: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    top1_accuracy: float
    top5_accuracy: float
    confusion: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def num_samples(self):
        return int(self.confusion.sum())

    def summary_text(self):
        return "\n".join([
            f"samples = {self.num_samples}",
            f"top1 = {self.top1_accuracy:.6f}",
            f"top5 = {self.top5_accuracy:.6f}",
            f"macro_precision = {self.macro_precision:.6f}",
            f"macro_recall = {self.macro_recall:.6f}",
            f"macro_f1 = {self.macro_f1:.6f}",
        ]) + "\n"


def report_from_confusion(confusion, class_names=None, top1=None, top5=None):
    """Per-class and macro scores from a (true x predicted) count matrix.

    Classes with a zero denominator score 0 and still count towards the macro means.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    k = cm.shape[0]
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = cm.sum()
    if top1 is None:
        top1 = float(tp.sum() / total) if total else 0.0
    return EvalReport(
        class_names=list(class_names) if class_names is not None else [str(i) for i in range(k)],
        support=support,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        top1_accuracy=float(top1),
        top5_accuracy=float(top1 if top5 is None else top5),
        confusion=cm,
    )


def compute_report(predicted_labels, labels, probabilities=None, num_classes=None, class_names=None):
    """Evaluation report for one split.

    With ``probabilities`` given, Top-1/Top-5 use the probability ranking
    (k capped at the class count); otherwise Top-5 falls back to Top-1.
    """
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ContractError("cannot build a report from zero samples")
    if predicted_labels.shape != labels.shape:
        raise ContractError(f"{len(predicted_labels)} predictions for {len(labels)} labels")
    if num_classes is None:
        if class_names is not None:
            num_classes = len(class_names)
        elif probabilities is not None:
            num_classes = np.asarray(probabilities).shape[1]
        else:
            num_classes = int(max(predicted_labels.max(), labels.max())) + 1
    _check_labels(labels, len(labels), num_classes)
    _check_labels(predicted_labels, len(labels), num_classes)
    cm = confusion_matrix(labels, predicted_labels, num_classes)
    top1 = top5 = None
    if probabilities is not None:
        top1 = top_k_accuracy(probabilities, labels, 1)
        top5 = top_k_accuracy(probabilities, labels, min(5, num_classes))
    return report_from_confusion(cm, class_names, top1, top5)


# CSV / text serialization


def per_class_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "support", "precision", "recall", "f1"])
    for name, s, p, r, f in zip(report.class_names, report.support, report.precision, report.recall, report.f1):
        w.writerow([name, int(s), f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
    return buf.getvalue()


def confusion_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted"] + list(report.class_names))
    for name, row in zip(report.class_names, report.confusion):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def write_report(report, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "per_class.csv").write_text(per_class_csv(report), encoding="utf-8")
    (directory / "confusion.csv").write_text(confusion_csv(report), encoding="utf-8")
    (directory / "summary.txt").write_text(report.summary_text(), encoding="utf-8")
    return directory


class ReportFormatError(ContractError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _number(path, line, text, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise ReportFormatError(path, line, f"expected a number, got {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise ReportFormatError(path, line, f"non-finite value {text!r}")
    return value


def read_report(directory):
    """Load a report written by :func:`write_report`; format problems raise :class:`ReportFormatError`."""
    directory = Path(directory)
    per_path = directory / "per_class.csv"
    cm_path = directory / "confusion.csv"
    rows = _read_csv(per_path)
    if not rows or [c.strip() for c in rows[0]] != ["class", "support", "precision", "recall", "f1"]:
        raise ReportFormatError(per_path, 1, "header must be class,support,precision,recall,f1")
    names, support, prec, rec, f1 = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise ReportFormatError(per_path, lineno, f"expected 5 fields, got {len(row)}")
        names.append(row[0])
        support.append(_number(per_path, lineno, row[1], int))
        for dest, text in zip((prec, rec, f1), row[2:]):
            v = _number(per_path, lineno, text)
            if not 0.0 <= v <= 1.0:
                raise ReportFormatError(per_path, lineno, f"score {v} outside [0, 1]")
            dest.append(v)
    cm_rows = _read_csv(cm_path)
    if not cm_rows or cm_rows[0][1:] != names:
        raise ReportFormatError(cm_path, 1, "header class names do not match per_class.csv")
    cm = []
    for lineno, row in enumerate(cm_rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise ReportFormatError(cm_path, lineno, f"expected {len(names) + 1} fields, got {len(row)}")
        cm.append([_number(cm_path, lineno, v, int) for v in row[1:]])
    if len(cm) != len(names):
        raise ReportFormatError(cm_path, len(cm_rows), f"expected {len(names)} matrix rows, got {len(cm)}")
    top1 = top5 = None
    summary = directory / "summary.txt"
    if summary.exists():
        vals = dict(line.split("=", 1) for line in summary.read_text(encoding="utf-8").splitlines() if "=" in line)
        vals = {k.strip(): v.strip() for k, v in vals.items()}
        top1 = float(vals["top1"]) if "top1" in vals else None
        top5 = float(vals["top5"]) if "top5" in vals else None
    report = report_from_confusion(np.array(cm, dtype=np.int64).reshape(len(names), len(names)), names, top1, top5)
    report.precision, report.recall, report.f1 = np.array(prec), np.array(rec), np.array(f1)
    report.support = np.array(support, dtype=np.int64)
    return report
