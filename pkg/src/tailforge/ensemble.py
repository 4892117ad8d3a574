"""Top-k prediction records, multi-model averaging and evaluation metrics."""

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .exceptions import ConfigError, RecordMismatchError


@dataclass(frozen=True)
class PredictionRecord:
    """Truncated prediction for one sample: ``top`` is ``((class, prob), ...)``
    in descending probability, ties broken by lower class index."""

    sample_id: int
    top: tuple

    @property
    def classes(self):
        return [c for c, _ in self.top]

    @property
    def probs(self):
        return [p for _, p in self.top]

    def prob_of(self, c):
        for cls, p in self.top:
            if cls == c:
                return p
        return 0.0

    def to_json(self):
        return {"id": int(self.sample_id), "top": [[int(c), float(p)] for c, p in self.top]}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["id"]), tuple((int(c), float(p)) for c, p in obj["top"]))


def _ranked(probs):
    probs = np.asarray(probs, dtype=np.float64)
    # primary key descending prob, secondary ascending class
    return np.lexsort((np.arange(len(probs)), -probs))


def truncate_topk(probs, k, sample_id=0):
    """Keep the ``k`` most probable classes of a probability vector."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    order = _ranked(probs)[:k]
    return PredictionRecord(
        int(sample_id), tuple((int(c), float(probs[c])) for c in order if probs[c] > 0)
    )


def records_from_probs(probs, k=10, ids=None):
    probs = np.asarray(probs)
    ids = range(len(probs)) if ids is None else ids
    return [truncate_topk(p, k, i) for i, p in zip(ids, probs)]


def argmax_tiebreak(probs):
    """Index of the largest entry, lowest index on ties."""
    return int(np.argmax(np.asarray(probs)))


def ensemble_average(records, num_classes, weights=None):
    """Average truncated predictions of several models for one sample.

    Classes missing from a model's top-k contribute zero. The average is
    renormalized to sum to one. ``weights`` optionally replaces the uniform
    per-model weighting.
    """
    if not records:
        raise ConfigError("need at least one record")
    sid = records[0].sample_id
    if any(r.sample_id != sid for r in records):
        raise RecordMismatchError("records describe different samples")
    m = len(records)
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, float) / np.sum(weights)
    out = np.zeros(num_classes)
    for wi, rec in zip(w, records):
        for c, p in rec.top:
            out[c] += wi * p
    total = out.sum()
    if total > 0:
        out /= total
    return out


def ensemble_records(record_sets, num_classes, weights=None):
    """Average aligned record lists (one list per model) into an N x C array."""
    n = len(record_sets[0])
    if any(len(rs) != n for rs in record_sets):
        raise RecordMismatchError("record files hold different numbers of samples")
    return np.stack([
        ensemble_average([rs[i] for rs in record_sets], num_classes, weights)
        for i in range(n)
    ]) if n else np.zeros((0, num_classes))


def write_records(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records(path):
    with open(path) as fh:
        return [PredictionRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# metrics


def per_class_accuracy(predictions, labels, num_classes):
    """Accuracy per class; NaN for classes absent from ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    correct = np.bincount(labels[predictions == labels], minlength=num_classes).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)


def _mcer(predictions, labels, num_classes):
    # Exact rational mean, rounded once: on a balanced label set this makes
    # the result bit-identical to 1 - top-1 accuracy.
    counts = np.bincount(labels, minlength=num_classes)
    correct = np.bincount(labels[predictions == labels], minlength=num_classes)
    present = np.flatnonzero(counts)
    mean_acc = sum(Fraction(int(correct[c]), int(counts[c])) for c in present) / len(present)
    return 1.0 - float(mean_acc)


def mean_class_error_rate(predictions, labels, num_classes):
    """One minus the unweighted mean of per-class accuracies.

    Classes absent from ``labels`` are excluded from the mean.
    """
    if len(labels) == 0:
        raise ConfigError("cannot score an empty prediction set")
    return _mcer(np.asarray(predictions), np.asarray(labels), num_classes)


def tercile_splits(class_counts):
    """Assign each class to head/medium/tail (0/1/2) by training count.

    Classes are ranked by descending count (lower index first on ties) and
    cut into thirds; a class tied in count with the last member of a
    headier split joins that split.
    """
    counts = np.asarray(class_counts)
    c = len(counts)
    order = np.lexsort((np.arange(c), -counts))
    ranked = counts[order]

    def extend(end):
        while 0 < end < c and ranked[end] == ranked[end - 1]:
            end += 1
        return end

    head_end = extend(-(-c // 3))
    med_end = extend(max(head_end, head_end + -(-(c - head_end) // 2)))
    split = np.full(c, 2, dtype=np.int64)
    split[order[:head_end]] = 0
    split[order[head_end:med_end]] = 1
    return split


@dataclass
class EvalReport:
    mean_class_error_rate: float
    top1_accuracy: float
    top5_accuracy: float
    per_class_accuracy: list
    split_accuracy: list

    def to_dict(self):
        return asdict(self)


def _top1_and_topk_hits(probs_or_records, labels, k):
    if isinstance(probs_or_records, np.ndarray):
        p = probs_or_records
        cls = np.broadcast_to(np.arange(p.shape[1]), p.shape)
        ranked = np.lexsort((cls, -p), axis=1)
        return ranked[:, 0], (ranked[:, :k] == labels[:, None]).any(axis=1)
    top1 = np.array([r.top[0][0] if r.top else -1 for r in probs_or_records])
    hits = np.array([lab in r.classes[:k] for r, lab in zip(probs_or_records, labels)])
    return top1, hits


def eval_report(probs_or_records, labels, class_counts):
    """Compute every :class:`EvalReport` field.

    ``probs_or_records`` is an ``N x C`` probability array or a list of
    :class:`PredictionRecord`; ``class_counts`` (training counts) defines
    the head/medium/tail split. Per-class accuracy is NaN for classes with
    no evaluation samples, and those classes are left out of every mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    class_counts = np.asarray(class_counts)
    num_classes = len(class_counts)
    if isinstance(probs_or_records, np.ndarray):
        probs_or_records = probs_or_records.astype(np.float64, copy=False)
    pred, top5 = _top1_and_topk_hits(probs_or_records, labels, 5)
    acc = per_class_accuracy(pred, labels, num_classes)
    present = ~np.isnan(acc)
    split = tercile_splits(class_counts)
    split_acc = []
    for s in range(3):
        sel = (split == s) & present
        split_acc.append(float(acc[sel].mean()) if sel.any() else float("nan"))
    return EvalReport(
        mean_class_error_rate=_mcer(pred, labels, num_classes),
        top1_accuracy=float(np.mean(pred == labels)),
        top5_accuracy=float(np.mean(top5)),
        per_class_accuracy=[float(a) for a in acc],
        split_accuracy=split_acc,
    )


def write_report(report, class_counts, json_path, csv_path=None):
    """EvalReport as JSON plus an optional per-class CSV table."""
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        split = tercile_splits(class_counts)
        names = ("head", "medium", "tail")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "count", "accuracy", "split"])
            for c, (n, a) in enumerate(zip(class_counts, report.per_class_accuracy)):
                w.writerow([c, int(n), repr(a), names[split[c]]])
