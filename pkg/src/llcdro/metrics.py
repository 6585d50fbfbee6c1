"""Group-aware evaluation against hidden ground truth."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata


@dataclass
class GroupReport:
    per_group_accuracy: dict[int, float]
    per_group_size: dict[int, int]
    avg_accuracy: float
    worst_group_accuracy: float
    empty_groups: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_group_accuracy"] = {str(k): v for k, v in self.per_group_accuracy.items()}
        d["per_group_size"] = {str(k): v for k, v in self.per_group_size.items()}
        return d


@dataclass
class NoiseIdReport:
    auc_overall: Optional[float]
    auc_per_group: dict[int, Optional[float]]

    def to_dict(self) -> dict:
        return {"auc_overall": self.auc_overall,
                "auc_per_group": {str(k): v for k, v in self.auc_per_group.items()}}


def accuracy(predictions: np.ndarray, true_labels: np.ndarray) -> float:
    p, y = np.asarray(predictions), np.asarray(true_labels)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((p == y).mean())


def group_report(predictions: np.ndarray, true_labels: np.ndarray, group_ids: np.ndarray,
                 all_groups: Optional[list[int]] = None) -> GroupReport:
    """Per-group accuracy, sample-weighted average and the minimum over non-empty groups.

    Groups listed in ``all_groups`` but absent from ``group_ids`` are reported in
    ``empty_groups`` and left out of the minimum.
    """
    p, y, g = np.asarray(predictions), np.asarray(true_labels), np.asarray(group_ids)
    present = sorted(int(v) for v in np.unique(g))
    empty = sorted(set(all_groups or []) - set(present))
    correct = p == y
    per_acc = {k: float(correct[g == k].mean()) for k in present}
    per_size = {k: int((g == k).sum()) for k in present}
    return GroupReport(
        per_group_accuracy=per_acc,
        per_group_size=per_size,
        avg_accuracy=accuracy(p, y),
        worst_group_accuracy=min(per_acc.values()),
        empty_groups=empty,
    )


def noise_auc(noisiness: np.ndarray, corrupted: np.ndarray) -> Optional[float]:
    """Mann-Whitney AUC of ``noisiness`` for flagging corrupted samples; ties count half.

    Returns None when either class is absent.
    """
    s = np.asarray(noisiness, dtype=float)
    c = np.asarray(corrupted, dtype=bool)
    n_pos, n_neg = int(c.sum()), int((~c).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks give the half credit for ties
    u = ranks[c].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def noise_id_report(w: np.ndarray, corrupted: np.ndarray, group_ids: np.ndarray) -> NoiseIdReport:
    noisiness = 1.0 - np.asarray(w, dtype=float)
    c, g = np.asarray(corrupted, bool), np.asarray(group_ids)
    per = {int(k): noise_auc(noisiness[g == k], c[g == k]) for k in np.unique(g)}
    return NoiseIdReport(noise_auc(noisiness, c), per)


def confusion_matrix(predictions: np.ndarray, true_labels: np.ndarray, n_classes: int) -> np.ndarray:
    p, y = np.asarray(predictions, int), np.asarray(true_labels, int)
    if ((p < 0) | (p >= n_classes) | (y < 0) | (y >= n_classes)).any():
        raise ValueError("label out of range")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    return m


def classwise_accuracy(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.where(rows > 0, rows, 1), np.nan)


def write_confusion_csv(cm: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(j) for j in range(cm.shape[1])])
        for i, row in enumerate(cm):
            w.writerow([str(i)] + [int(v) for v in row])
