"""Evaluation mathematics: per-class semantic metrics, best-match instance
metrics, threshold-based instance counting, and the voxel-shape class
proportion analysis."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cloud import LabeledCloud, SILIQUE, VoxelGrid
from .voxelize import dynamic_voxelize


def f1_score(prec: float, rec: float) -> float:
    """Harmonic mean of precision and recall (0 when both vanish)."""
    if prec + rec == 0:
        return 0.0
    return 2 * prec * rec / (prec + rec)


@dataclass
class SemanticReport:
    iou: dict[int, float]
    prec: dict[int, float]
    rec: dict[int, float]
    f1: dict[int, float]
    oacc: float

    @property
    def mean_iou(self) -> float:
        return float(np.mean(list(self.iou.values())))

    @property
    def mean_prec(self) -> float:
        return float(np.mean(list(self.prec.values())))

    @property
    def mean_rec(self) -> float:
        return float(np.mean(list(self.rec.values())))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(list(self.f1.values())))

    def rows(self) -> list[dict]:
        rows = [
            {"class": c, "iou": self.iou[c], "prec": self.prec[c],
             "rec": self.rec[c], "f1": self.f1[c]}
            for c in sorted(self.iou)
        ]
        rows.append({"class": "mean", "iou": self.mean_iou, "prec": self.mean_prec,
                     "rec": self.mean_rec, "f1": self.mean_f1})
        return rows


def semantic_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int = 2) -> SemanticReport:
    """Per-class IoU / precision / recall / F1 from the confusion counts, plus
    overall accuracy. A class absent from both prediction and ground truth
    scores 1 by convention (nothing to get wrong)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("predictions and labels must be equal-length, nonempty")
    iou, prec, rec, f1 = {}, {}, {}, {}
    for c in range(n_classes):
        tp = int(((pred == c) & (gt == c)).sum())
        fp = int(((pred == c) & (gt != c)).sum())
        fn = int(((pred != c) & (gt == c)).sum())
        iou[c] = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        prec[c] = tp / (tp + fp) if tp + fp else 1.0
        rec[c] = tp / (tp + fn) if tp + fn else 1.0
        f1[c] = f1_score(prec[c], rec[c])
    oacc = float((pred == gt).mean())
    return SemanticReport(iou=iou, prec=prec, rec=rec, f1=f1, oacc=oacc)


@dataclass
class InstanceReport:
    mcov: float
    mwcov: float
    mprec: dict[float, float]
    mrec: dict[float, float]
    n_gt: int
    n_pred: int
    detected: dict[float, int] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = [{"metric": "mCov", "value": self.mcov},
                {"metric": "mWCov", "value": self.mwcov}]
        for theta in sorted(self.mprec):
            rows.append({"metric": f"mPrec@{theta}", "value": self.mprec[theta]})
            rows.append({"metric": f"mRec@{theta}", "value": self.mrec[theta]})
        return rows


def _pairwise_iou(pred: list[np.ndarray], gt: list[np.ndarray]) -> np.ndarray:
    out = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            inter = len(np.intersect1d(p, g, assume_unique=True))
            if inter:
                out[i, j] = inter / (len(p) + len(g) - inter)
    return out


def instance_metrics(
    pred: list[np.ndarray],
    gt: list[np.ndarray],
    thresholds: tuple[float, ...] = (0.5, 0.75, 0.9),
    one_to_one: bool = False,
) -> InstanceReport:
    """Coverage and thresholded precision/recall of predicted instances.

    Matching uses the unconstrained best IoU per instance; ``one_to_one``
    switches to greedy exclusive matching (each ground-truth instance usable
    once, assigned in descending IoU order).
    """
    if len(gt) == 0:
        raise ValueError("instance metrics need at least one ground-truth instance")
    iou = _pairwise_iou(pred, gt)
    if one_to_one and len(pred):
        matched = np.zeros_like(iou)
        taken_p, taken_g = set(), set()
        for flat in np.argsort(-iou, axis=None):
            i, j = divmod(int(flat), iou.shape[1])
            if iou[i, j] <= 0 or i in taken_p or j in taken_g:
                continue
            matched[i, j] = iou[i, j]
            taken_p.add(i)
            taken_g.add(j)
        iou = matched
    best_per_gt = iou.max(axis=0) if len(pred) else np.zeros(len(gt))
    best_per_pred = iou.max(axis=1) if len(pred) else np.zeros(0)
    sizes = np.array([len(g) for g in gt], dtype=np.float64)
    weights = sizes / sizes.sum()
    mprec, mrec, detected = {}, {}, {}
    for theta in thresholds:
        tp = int((best_per_pred > theta).sum())
        mprec[theta] = tp / len(pred) if len(pred) else 0.0
        mrec[theta] = tp / len(gt)
        detected[theta] = tp
    return InstanceReport(
        mcov=float(best_per_gt.mean()),
        mwcov=float((weights * best_per_gt).sum()),
        mprec=mprec,
        mrec=mrec,
        n_gt=len(gt),
        n_pred=len(pred),
        detected=detected,
    )


def count_detected(pred: list[np.ndarray], gt: list[np.ndarray], theta: float) -> int:
    """Number of predictions whose best ground-truth IoU exceeds theta."""
    if not pred:
        return 0
    return int((_pairwise_iou(pred, gt).max(axis=1) > theta).sum())


def rmse(counts, gt_counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    gt_counts = np.asarray(gt_counts, dtype=np.float64)
    return float(np.sqrt(np.mean((counts - gt_counts) ** 2)))


def instances_from_labels(inst: np.ndarray) -> list[np.ndarray]:
    """Point-index sets of every instance id >= 0, in ascending id order."""
    return [np.flatnonzero(inst == k) for k in np.unique(inst) if k >= 0]


def voxel_class_proportions(
    cloud: LabeledCloud, grid: VoxelGrid, n_classes: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Class fractions before voxelization (per point) and after (per voxel,
    majority vote; ties go to the silique class)."""
    if cloud.sem is None:
        raise ValueError("voxel_class_proportions needs semantic labels")
    before = np.bincount(cloud.sem, minlength=n_classes) / len(cloud)
    vmap = dynamic_voxelize(cloud, grid)
    votes = np.zeros((vmap.n_voxels, n_classes), dtype=np.int64)
    np.add.at(votes, (vmap.point_to_voxel, cloud.sem), 1)
    best = votes.max(axis=1, keepdims=True)
    is_best = votes == best
    labels = np.where(is_best[:, SILIQUE], SILIQUE, np.argmax(votes, axis=1))
    after = np.bincount(labels, minlength=n_classes) / vmap.n_voxels
    return before, after


def report_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def report_to_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty report)"
    keys = list(rows[0].keys())
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    cells = [[fmt(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
