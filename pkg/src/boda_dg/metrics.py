"""Confusion matrices, per-class precision/recall/F1 and minority diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import ClassMismatch, DataError, EmptyMatrix, LabelOutOfRange
from .model import ModelParams, forward


def predict_logits(logits: NDArray) -> NDArray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.asarray(logits), axis=1)


def predict(params: ModelParams, features: NDArray, chunk: int = 4096) -> NDArray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    out = [predict_logits(forward(params, features[i : i + chunk]).logits) for i in range(0, len(features), chunk)]
    return np.concatenate(out)


def confusion_matrix(true, predicted, num_classes: int) -> NDArray:
    """Counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if true.shape != predicted.shape:
        raise DataError("true and predicted labels differ in length")
    for arr in (true, predicted):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, predicted), 1)
    return cm


@dataclass
class ClassMetrics:
    id: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    f1_micro: float
    f1_macro: float
    classes: list[ClassMetrics]
    confusion: NDArray
    excluded_classes: list[int]
    run_meta: dict = field(default_factory=dict)

    def by_class(self, c: int) -> ClassMetrics:
        return self.classes[c]

    def to_dict(self) -> dict:
        return {
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "classes": [vars(cm) for cm in self.classes],
            "confusion": self.confusion.tolist(),
            "excluded_classes": list(self.excluded_classes),
            "run_meta": dict(self.run_meta),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        try:
            classes = [
                ClassMetrics(int(c["id"]), float(c["precision"]), float(c["recall"]), float(c["f1"]), int(c["support"]))
                for c in obj["classes"]
            ]
            return cls(
                float(obj["f1_micro"]),
                float(obj["f1_macro"]),
                classes,
                np.asarray(obj["confusion"], dtype=np.int64),
                [int(c) for c in obj["excluded_classes"]],
                dict(obj.get("run_meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed metrics report: {exc}") from None


def f1_scores(cm: NDArray, run_meta: dict | None = None) -> MetricsReport:
    """Per-class and aggregate F1 from a confusion matrix.

    0/0 precision or recall counts as 0. Classes with no true samples are left
    out of the macro average and listed in ``excluded_classes``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total < 1:
        raise EmptyMatrix("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / pr, 0.0)
    evaluated = support > 0
    classes = [
        ClassMetrics(c, float(precision[c]), float(recall[c]), float(f1[c]), int(support[c]))
        for c in range(cm.shape[0])
    ]
    return MetricsReport(
        f1_micro=float(tp.sum() / total),
        f1_macro=float(f1[evaluated].mean()),
        classes=classes,
        confusion=cm,
        excluded_classes=[int(c) for c in np.nonzero(~evaluated)[0]],
        run_meta=dict(run_meta or {}),
    )


def evaluate(params: ModelParams, features, labels, num_classes: int, run_meta: dict | None = None) -> MetricsReport:
    return f1_scores(confusion_matrix(labels, predict(params, features), num_classes), run_meta)


def minority_report(report_a: MetricsReport, report_b: MetricsReport, class_ids) -> dict[int, dict]:
    """Recall of ``report_a`` minus recall of ``report_b`` for the requested classes."""
    if len(report_a.classes) != len(report_b.classes):
        raise ClassMismatch("reports cover different class sets")
    out = {}
    for c in class_ids:
        if not 0 <= c < len(report_a.classes):
            raise ClassMismatch(f"class {c} not in reports")
        a, b = report_a.classes[c], report_b.classes[c]
        out[int(c)] = {
            "delta_recall": a.recall - b.recall,
            "recall_a": a.recall,
            "recall_b": b.recall,
            "support_a": a.support,
            "support_b": b.support,
        }
    return out


def save_report(report: MetricsReport, path) -> None:
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_report(path) -> MetricsReport:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    return MetricsReport.from_dict(obj)


def confusion_to_csv(cm: NDArray) -> str:
    lines = ["true\\pred," + ",".join(str(c) for c in range(cm.shape[1]))]
    for t, row in enumerate(cm):
        lines.append(f"{t}," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def aggregate(values) -> dict[str, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "std": std}
