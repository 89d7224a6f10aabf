"""Confusion matrices and IoU over LiDAR-valid, labelled pixels."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import ProjectedFrame
from .network import BRANCHES, ModalityAvailability

SETTINGS = ("both", "rgb", "lidar")


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """Counts for classes ``1..num_classes``; entry (i, j) is true i+1, predicted j+1."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise MetricError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        """Count aligned 1-D arrays of predicted and true class ids."""
        pred = np.asarray(pred, dtype=np.int64).ravel()
        truth = np.asarray(truth, dtype=np.int64).ravel()
        n = self.num_classes
        for name, arr in (("prediction", pred), ("label", truth)):
            if arr.size and (arr.min() < 1 or arr.max() > n):
                raise MetricError(f"{name} class id out of range 1..{n}")
        idx = (truth - 1) * n + (pred - 1)
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
        return self

    def accumulate(self, pred: np.ndarray, frame: ProjectedFrame) -> "ConfusionMatrix":
        """Add the pixels of ``frame`` that are LiDAR-valid and labelled."""
        pred = np.asarray(pred)
        if pred.shape != frame.labels.shape:
            raise MetricError(f"prediction {pred.shape} does not match frame {frame.labels.shape}")
        sel = frame.valid_mask & (frame.labels != 0)
        return self.add(pred[sel], frame.labels[sel])

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge matrices of different size")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def iou(self) -> tuple[np.ndarray, float]:
        return iou(self)


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and their mean over defined classes."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
    defined = ~np.isnan(per_class)
    miou = float(per_class[defined].mean()) if defined.any() else float("nan")
    return per_class, miou


def mean_iou_over(per_class: np.ndarray, classes: Iterable[int]) -> float:
    """Mean of the defined IoUs among class ids ``classes``."""
    vals = [per_class[c - 1] for c in classes if not np.isnan(per_class[c - 1])]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(model, frames: Sequence[ProjectedFrame], num_classes: int,
             avail: ModalityAvailability = ModalityAvailability()) -> dict[str, ConfusionMatrix]:
    """One confusion matrix per branch under a modality setting."""
    cms = {b: ConfusionMatrix(num_classes) for b in BRANCHES}
    for frame in frames:
        preds = model.predict(frame, avail)
        for b in BRANCHES:
            cms[b].accumulate(preds[b], frame)
    return cms


@dataclass
class ModalityTable:
    """Branch mIoU under each input setting plus the per-branch average."""

    entries: dict = field(default_factory=dict)  # (setting, branch) -> mIoU

    def average(self, branch: str) -> float:
        return float(np.mean([self.entries[(s, branch)] for s in SETTINGS]))

    def rows(self) -> list[tuple[str, str, float]]:
        out = [(s, b, self.entries[(s, b)]) for s in SETTINGS for b in BRANCHES]
        out += [("average", b, self.average(b)) for b in BRANCHES]
        return out

    def write_csv(self, path, config_digest: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if config_digest:
                fh.write(f"# config_digest={config_digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["input_modality", "branch", "miou"])
            for s, b, v in self.rows():
                w.writerow([s, b, f"{v:.6f}"])


def modality_table(model, frames: Sequence[ProjectedFrame], num_classes: int) -> ModalityTable:
    """Evaluate both branches with both inputs, color only, and LiDAR only."""
    table = ModalityTable()
    for setting in SETTINGS:
        cms = evaluate(model, frames, num_classes, ModalityAvailability.from_name(setting))
        for b in BRANCHES:
            table.entries[(setting, b)] = iou(cms[b])[1]
    return table


def write_iou_rows(path, rows: Iterable[tuple], header: Sequence[str],
                   config_digest: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_digest:
            fh.write(f"# config_digest={config_digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def per_class_rows(per_class: np.ndarray, order: Optional[Sequence[int]] = None,
                   names: Optional[dict] = None) -> list[tuple[str, float]]:
    """(class name, IoU) rows in ``order`` (class ids)."""
    order = range(1, len(per_class) + 1) if order is None else order
    names = names or {}
    return [(names.get(c, str(c)), float(per_class[c - 1])) for c in order]
