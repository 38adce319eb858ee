"""Classification and regression metrics, naive baselines, and metric reports."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .model import CLASSIFICATION, MultiTaskNet, TaskSpec

REPORT_VERSION = 1


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"{what}: length mismatch ({a.shape} vs {b.shape})")
    if a.size == 0:
        raise ValueError(f"{what}: empty input")
    return a, b


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels, "accuracy")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds, labels = _pair(preds, labels, "confusion_matrix")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} out of range [0, {num_classes}): {arr.min()}..{arr.max()}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels.astype(np.int64), preds.astype(np.int64)), 1)
    return cm


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class that never appears in labels or predictions scores 1; a class that
    is predicted but never present scores 0.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom == 0, 1.0, 2 * tp / np.where(denom == 0, 1, denom))
    return float(f1.mean())


def regression_metrics(preds, targets) -> tuple[float, float]:
    preds, targets = _pair(preds, targets, "regression_metrics")
    err = preds.astype(np.float64) - targets.astype(np.float64)
    n = err.size
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(np.abs(err)) / n, math.sqrt(math.fsum(err * err) / n)


def baseline_predict(kind: str, train_labels, eval_size: int) -> np.ndarray:
    """``majority``: most frequent training class (ties -> lowest). ``mean``: training mean."""
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise ValueError("baseline needs at least one training label")
    if kind == "majority":
        counts = Counter(train_labels.astype(np.int64).tolist())
        best = max(counts.values())
        cls = min(c for c, k in counts.items() if k == best)
        return np.full(eval_size, cls, dtype=np.int64)
    if kind == "mean":
        return np.full(eval_size, float(np.mean(train_labels.astype(np.float64))))
    raise ValueError(f"unknown baseline kind {kind!r} (expected 'majority' or 'mean')")


@dataclass
class TaskMetrics:
    task_id: str
    kind: str
    n: int
    accuracy: float | None = None
    macro_f1: float | None = None
    num_classes: int | None = None
    mae: float | None = None
    rmse: float | None = None
    loss: float | None = None

    def to_dict(self) -> dict:
        d = {"task_id": self.task_id, "kind": self.kind, "n": self.n}
        if self.kind == CLASSIFICATION:
            d.update(accuracy=self.accuracy, macro_f1=self.macro_f1, num_classes=self.num_classes)
        else:
            d.update(mae=self.mae, rmse=self.rmse)
        if self.loss is not None:
            d["loss"] = self.loss
        return d


@dataclass
class MetricsReport:
    split: str
    tasks: list[TaskMetrics]
    seed: int | None = None
    config_hash: str | None = None
    timestamp: str | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, task_id: str) -> TaskMetrics:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def to_dict(self) -> dict:
        d = {
            "format_version": REPORT_VERSION,
            "split": self.split,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "tasks": [t.to_dict() for t in self.tasks],
        }
        if self.timestamp is not None:
            d["timestamp"] = self.timestamp
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)

    def text(self) -> str:
        lines = [f"split={self.split} seed={self.seed} config={self.config_hash}"]
        for t in self.tasks:
            if t.kind == CLASSIFICATION:
                lines.append(
                    f"  {t.task_id:<16} n={t.n:<6} Acc {100 * t.accuracy:.1f}  Macro F1 {100 * t.macro_f1:.1f}"
                    f"  (K={t.num_classes})"
                )
            else:
                lines.append(f"  {t.task_id:<16} n={t.n:<6} MAE {t.mae:.4g}  RMSE {t.rmse:.4g}")
        return "\n".join(lines)


def task_losses(net: MultiTaskNet, outputs: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray]) -> dict[str, float]:
    out = {}
    for t in net.tasks:
        if t.id not in labels:
            continue
        y = np.asarray(labels[t.id])
        if t.kind == CLASSIFICATION:
            p = outputs[t.id][np.arange(len(y)), y.astype(np.int64)]
            out[t.id] = float(-np.log(np.maximum(p, nn.CE_CLAMP)).mean())
        else:
            out[t.id] = nn.mse(outputs[t.id], y)
    return out


def evaluate_arrays(
    net: MultiTaskNet,
    X,
    labels: Mapping[str, np.ndarray],
    split: str = "test",
    seed: int | None = None,
    config_hash: str | None = None,
    with_loss: bool = False,
) -> MetricsReport:
    X = np.asarray(X)
    if len(X) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    outputs = net.predict(X)
    losses = task_losses(net, outputs, labels) if with_loss else {}
    rows = []
    for t in net.tasks:
        if t.id not in labels:
            raise KeyError(f"samples carry no labels for task {t.id!r}")
        y = np.asarray(labels[t.id])
        if t.kind == CLASSIFICATION:
            pred = np.argmax(outputs[t.id], axis=1)  # first maximum = lowest index on ties
            rows.append(
                TaskMetrics(
                    t.id,
                    t.kind,
                    len(y),
                    accuracy=accuracy(pred, y),
                    macro_f1=macro_f1(pred, y, t.num_classes),
                    num_classes=t.num_classes,
                    loss=losses.get(t.id),
                )
            )
        else:
            mae, rmse = regression_metrics(outputs[t.id], y)
            rows.append(TaskMetrics(t.id, t.kind, len(y), mae=mae, rmse=rmse, loss=losses.get(t.id)))
    return MetricsReport(split, rows, seed=seed, config_hash=config_hash)


def evaluate(net: MultiTaskNet, samples: Sequence, tasks: Sequence[TaskSpec] | None = None, **kw) -> MetricsReport:
    """Evaluate on a list of samples whose ``X`` is the model-ready window."""
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    X = np.stack([s.X for s in samples])
    ids = [t.id for t in (tasks or net.tasks)]
    labels = {k: np.array([s.labels[k] for s in samples]) for k in ids}
    return evaluate_arrays(net, X, labels, **kw)
