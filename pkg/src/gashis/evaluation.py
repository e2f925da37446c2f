"""Confusion matrices, precision/recall/F1/accuracy and feature export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError

__all__ = ["ConfusionMatrix", "EvalReport", "confusion", "metrics", "predict", "evaluate", "export_features"]

CRITERIA = ("Pre", "Rec", "F1", "Acc")


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]`` is the number of samples of true class ``t`` predicted as ``p``.

    ``positive`` names the class treated as positive when K == 2.
    """

    counts: np.ndarray
    positive: int = 0

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise ContractError(f"confusion matrix must be KxK with K >= 2, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer) or (c < 0).any():
            raise ContractError("confusion counts must be non-negative integers")
        if not 0 <= self.positive < c.shape[0]:
            raise ContractError(f"positive class {self.positive} outside [0, {c.shape[0]})")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_binary(cls, tp: int, fn: int, fp: int, tn: int) -> "ConfusionMatrix":
        """Binary matrix with class 0 as the positive class."""
        return cls(np.array([[tp, fn], [fp, tn]], dtype=np.int64), positive=0)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, cls: int) -> tuple[int, int, int, int]:
        """``(tp, fn, fp, tn)`` for ``cls`` against every other class."""
        c = self.counts
        tp = int(c[cls, cls])
        fn = int(c[cls].sum()) - tp
        fp = int(c[:, cls].sum()) - tp
        return tp, fn, fp, self.total - tp - fn - fp


def confusion(preds: Sequence[int], labels: Sequence[int], k: int, positive: int = 0) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        bad = arr[(arr < 0) | (arr >= k)]
        if bad.size:
            raise ContractError(f"{name} {int(bad[0])} outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, positive)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def _binary(tp: int, fn: int, fp: int, tn: int) -> dict[str, float | None]:
    pre = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    acc = _ratio(tp + tn, tp + tn + fp + fn)
    return {"Pre": pre, "Rec": rec, "F1": f1, "Acc": acc}


def _mean_defined(values: list[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


@dataclass
class EvalReport:
    """The four criteria as fractions; ``None`` marks an undefined ratio."""

    pre: float | None
    rec: float | None
    f1: float | None
    acc: float | None
    averaging: str = "binary"
    per_class: list[dict[str, float | None]] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)

    def as_dict(self) -> dict[str, float | None]:
        return dict(zip(CRITERIA, (self.pre, self.rec, self.f1, self.acc)))

    def percent(self, name: str) -> str:
        v = self.as_dict()[name]
        return "undefined" if v is None else f"{100.0 * v:.2f}"

    def to_json(self) -> str:
        payload = {
            "averaging": self.averaging,
            "criteria": self.as_dict(),
            "percent": {k: self.percent(k) for k in CRITERIA},
            "per_class": self.per_class,
            "confusion": self.counts,
        }
        return json.dumps(payload, indent=2)

    def to_csv_row(self) -> list[str]:
        return [self.percent(k) for k in CRITERIA]

    def write(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CRITERIA)
                w.writerow(self.to_csv_row())
        else:
            path.write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        c = d["criteria"]
        return cls(c["Pre"], c["Rec"], c["F1"], c["Acc"], d["averaging"], d["per_class"], d["confusion"])

    def __str__(self) -> str:
        return "  ".join(f"{k} {self.percent(k)}" for k in CRITERIA)


def metrics(cm: ConfusionMatrix) -> EvalReport:
    """Binary matrices use the positive class directly; larger ones macro-average one-vs-rest.

    Classes whose ratio is undefined are left out of the macro mean.
    """
    if cm.total == 0:
        raise ContractError("cannot compute metrics of an empty confusion matrix")
    counts = cm.counts.tolist()
    acc = float(np.trace(cm.counts)) / cm.total
    if cm.k == 2:
        m = _binary(*cm.one_vs_rest(cm.positive))
        return EvalReport(m["Pre"], m["Rec"], m["F1"], acc, "binary", [], counts)
    per = [_binary(*cm.one_vs_rest(c)) for c in range(cm.k)]
    return EvalReport(
        _mean_defined([p["Pre"] for p in per]),
        _mean_defined([p["Rec"] for p in per]),
        _mean_defined([p["F1"] for p in per]),
        acc,
        "macro",
        per,
        counts,
    )


def predict(model, images: np.ndarray, batch: int = 16, with_features: bool = False):
    """Eval-mode argmax predictions, and the fused features when asked."""
    was_training = model.training
    model.eval()
    preds, feats = [], []
    with T.no_grad():
        for lo in range(0, len(images), batch):
            out = model(images[lo : lo + batch], with_features=with_features)
            preds.append(out.probs.data.argmax(axis=1))
            if with_features:
                feats.append(out.features.data.astype(np.float64))
    model.train(was_training)
    p = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    if not with_features:
        return p
    return p, (np.concatenate(feats) if feats else np.zeros((0, 0)))


def evaluate(model, dataset, batch: int = 16, positive: int = 0) -> tuple[EvalReport, np.ndarray]:
    preds = predict(model, dataset.images(), batch)
    cm = confusion(preds, dataset.labels(), dataset.num_classes, positive)
    return metrics(cm), preds


def export_features(model, dataset, path: str | Path, batch: int = 16) -> np.ndarray:
    """Write one CSV row per sample: source id, label, prediction, then the fused features.

    Returns the feature matrix.
    """
    preds, feats = predict(model, dataset.images(), batch, with_features=True)
    header = ["source_id", "label", "prediction"] + [f"f{i}" for i in range(feats.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s, p, row in zip(dataset.samples, preds, feats):
            w.writerow([s.source_id, s.label, int(p)] + [repr(float(v)) for v in row])
    return feats


def read_features(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    preds = np.array([int(r[2]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[3:]] for r in rows])
    return ids, labels, preds, feats


def is_close_percent(value: float | None, target: float, tol: float) -> bool:
    return value is not None and math.isclose(100.0 * value, target, abs_tol=tol)
