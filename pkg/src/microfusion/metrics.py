"""Evaluation surface: top-N accuracy, confusion matrices, P/R/F1, reports.

Conventions that matter downstream: top-N rank ties break toward the
lower category index, zero-denominator precision or recall yields 0.0
with a flag, and "macro" averages are unweighted means over classes
(support-weighted means are also computed for callers that want them).
"""

import dataclasses
import os

import numpy as np

from .errors import InvalidInputError, ShapeError

TOP_N = (1, 2, 3, 5)


def _prob_matrix(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probability rows must be 2-D, got shape {p.shape}")
    return p


def topn_accuracy(probs, labels, n):
    """Fraction of samples whose label ranks in the n most probable.

    Ranking sorts by probability descending with ties broken toward the
    lower index, so results are deterministic for tied rows.
    """
    p = _prob_matrix(probs)
    labels = np.asarray(labels)
    if labels.shape[0] != p.shape[0]:
        raise InvalidInputError(
            f"{labels.shape[0]} labels for {p.shape[0]} probability rows")
    if not 1 <= n <= p.shape[1]:
        raise InvalidInputError(f"n={n} outside [1, {p.shape[1]}]")
    hits = 0
    for row, label in zip(p, labels):
        order = np.argsort(-row, kind="stable")
        if label in order[:n]:
            hits += 1
    return hits / p.shape[0]


def predict(probs):
    """Argmax category per row, ties toward the lower index."""
    return np.argmax(_prob_matrix(probs), axis=1)


def confusion(preds, truth, c):
    """c x c count grid; rows are true categories, columns predictions."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape:
        raise InvalidInputError(
            f"{preds.shape[0]} predictions for {truth.shape[0]} labels")
    cm = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(preds, truth):
        if not (0 <= p < c and 0 <= t < c):
            raise InvalidInputError(f"label pair ({t}, {p}) outside [0, {c})")
        cm[t, p] += 1
    return cm


def merge_confusion(a, b):
    """Associative merge used when folds or workers tally separately."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"confusion shapes {a.shape} != {b.shape}")
    return a + b


@dataclasses.dataclass
class PrfReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    flagged: np.ndarray  # True where a zero denominator forced a 0.0
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float


def prf(cm):
    """Per-class and averaged precision/recall/F1 from a confusion matrix.

    Classes that are never predicted (or have no support) get 0.0 for
    the undefined ratio and are marked in ``flagged``.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    tp = np.diag(cm)
    pred_totals = cm.sum(axis=0)
    support = cm.sum(axis=1)
    flagged = (pred_totals == 0) | (support == 0)

    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp),
                          where=pred_totals > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(tp),
                   where=pr > 0)

    total = support.sum()
    weights = support / total if total > 0 else np.zeros_like(support)
    return PrfReport(
        precision=precision, recall=recall, f1=f1,
        support=support.astype(np.int64), flagged=flagged,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((weights * precision).sum()),
        weighted_recall=float((weights * recall).sum()),
        weighted_f1=float((weights * f1).sum()),
    )


@dataclasses.dataclass
class MetricsReport:
    """Everything the tables and plots need for one evaluation pass."""

    topn: dict
    prf: PrfReport
    cm: np.ndarray
    n: int

    def metric_row(self):
        """Flat name -> value mapping for CSV emission and aggregation."""
        row = {f"top{n}": v for n, v in sorted(self.topn.items())}
        row.update(macro_precision=self.prf.macro_precision,
                   macro_recall=self.prf.macro_recall,
                   macro_f1=self.prf.macro_f1)
        return row


def compute_report(probs, labels, c):
    """Full metrics bundle; top-N levels above c are skipped."""
    p = _prob_matrix(probs)
    if p.shape[1] != c:
        raise ShapeError(f"probability rows have {p.shape[1]} columns, c={c}")
    labels = np.asarray(labels)
    preds = predict(p)
    cm = confusion(preds, labels, c)
    topn = {n: topn_accuracy(p, labels, n) for n in TOP_N if n <= c}
    return MetricsReport(topn=topn, prf=prf(cm), cm=cm, n=int(p.shape[0]))


def micro_recall(cm):
    """trace / total; equals top-1 accuracy of the predictions behind cm."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise InvalidInputError("confusion matrix is empty")
    return float(np.trace(cm) / total)


# ---------------------------------------------------------------------------
# report files

def _fmt(value):
    return f"{value:.6f}"


def _write_atomic(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def render_metrics_csv(reports):
    keys = list(reports[0].metric_row())
    lines = ["fold,n," + ",".join(keys)]
    rows = [r.metric_row() for r in reports]
    for fold, (report, row) in enumerate(zip(reports, rows)):
        lines.append(f"{fold},{report.n},"
                     + ",".join(_fmt(row[k]) for k in keys))
    values = {k: np.array([row[k] for row in rows]) for k in keys}
    total_n = sum(r.n for r in reports)
    lines.append(f"mean,{total_n},"
                 + ",".join(_fmt(values[k].mean()) for k in keys))
    lines.append(f"std,{total_n},"
                 + ",".join(_fmt(values[k].std()) for k in keys))
    return "\n".join(lines) + "\n"


def render_confusion_csv(cm, categories):
    lines = ["category," + ",".join(categories)]
    for name, row in zip(categories, np.asarray(cm)):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def render_perclass_csv(report, categories):
    lines = ["category,precision,recall,f1,support,flagged"]
    p = report.prf
    for i, name in enumerate(categories):
        lines.append(
            f"{name},{_fmt(p.precision[i])},{_fmt(p.recall[i])},"
            f"{_fmt(p.f1[i])},{int(p.support[i])},{int(p.flagged[i])}")
    return "\n".join(lines) + "\n"


def emit_report(reports, categories, out_dir):
    """Write metrics.csv, confusion.csv, and perclass.csv.

    All content is rendered before anything touches the filesystem and
    each file lands via an atomic replace, so a failure leaves no
    partial report behind. Returns the three paths.
    """
    if not reports:
        raise InvalidInputError("no metric reports to emit")
    for report in reports:
        if report.cm.shape[0] != len(categories):
            raise ShapeError(
                f"confusion size {report.cm.shape[0]} != "
                f"{len(categories)} categories")
    summed = reports[0].cm
    for report in reports[1:]:
        summed = merge_confusion(summed, report.cm)
    combined = MetricsReport(topn={}, prf=prf(summed), cm=summed,
                             n=int(summed.sum()))
    rendered = {
        "metrics.csv": render_metrics_csv(reports),
        "confusion.csv": render_confusion_csv(summed, categories),
        "perclass.csv": render_perclass_csv(combined, categories),
    }
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, text in rendered.items():
        path = os.path.join(out_dir, name)
        _write_atomic(path, text)
        paths.append(path)
    return paths
