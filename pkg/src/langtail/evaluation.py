"""Hungarian-matched evaluation, long-tail reporting, and prototype transfer.

Matching protocol: pseudo classes are assigned to ground-truth classes by
minimum-cost assignment on the negated confusion counts; with more pseudo
classes than ground-truth classes the leftover pseudo classes are merged
into their plurality ground-truth class (or dropped, on request).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DataError, EmptyBatchError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (n_pred, n_gt) non-negative integers

    @property
    def n_pred(self) -> int:
        return self.counts.shape[0]

    @property
    def n_gt(self) -> int:
        return self.counts.shape[1]


@dataclass
class EvalReport:
    mapping: np.ndarray  # (n_pred,) gt class per pseudo class, -1 = dropped
    oa: float
    macc: float
    miou: float
    per_class_iou: np.ndarray  # (n_gt,)
    per_class_recall: np.ndarray  # (n_gt,)
    per_class_count: np.ndarray  # (n_gt,) gt point counts


def confusion(pred, gt, n_pred=None, n_gt=None) -> ConfusionMatrix:
    """counts[p][g] = number of points with prediction p and label g != -1."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred length {pred.shape} != gt length {gt.shape}")
    keep = gt >= 0
    p, g = pred[keep], gt[keep]
    n_pred = int(n_pred if n_pred is not None else (pred.max() + 1 if pred.size else 1))
    n_gt = int(n_gt if n_gt is not None else (g.max() + 1 if g.size else 1))
    counts = np.zeros((n_pred, n_gt), dtype=np.int64)
    np.add.at(counts, (p, g), 1)
    return ConfusionMatrix(counts=counts)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment from the smaller side of a
    rectangular cost matrix.

    Among all optimal assignments, returns the lexicographically smallest
    one (rows of the smaller side in ascending order, each taking the
    smallest column that still admits an optimal completion).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ShapeError(f"cost matrix must be 2-D and non-empty, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DataError("cost matrix contains non-finite entries")
    transposed = cost.shape[0] > cost.shape[1]
    C = cost.T if transposed else cost
    n_rows, n_cols = C.shape

    ri, ci = linear_sum_assignment(C)
    best = float(C[ri, ci].sum())
    tol = 1e-9 * max(1.0, float(np.abs(C).max())) * n_rows

    free_cols = list(range(n_cols))
    chosen = []
    remaining = best
    for r in range(n_rows):
        rest_rows = np.arange(r + 1, n_rows)
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            if rest_rows.size:
                sub = C[np.ix_(rest_rows, rest_cols)]
                si, sj = linear_sum_assignment(sub)
                completion = float(sub[si, sj].sum())
            else:
                completion = 0.0
            if C[r, j] + completion <= remaining + tol:
                chosen.append((r, j))
                free_cols.remove(j)
                remaining -= float(C[r, j])
                break
        else:  # numerically impossible, but never return a partial matching
            j = free_cols.pop(0)
            chosen.append((r, j))
            remaining -= float(C[r, j])
    if transposed:
        chosen = sorted((j, r) for r, j in chosen)
    return chosen


def match_and_score(cm: ConfusionMatrix, unmatched: str = "merge") -> EvalReport:
    """Hungarian-match pseudo classes to ground truth, then score OA/mAcc/mIoU.

    unmatched = "merge": leftover pseudo classes go to their plurality gt
    class; "drop": their points count as errors for every class.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyBatchError("confusion matrix is empty")
    if unmatched not in ("merge", "drop"):
        raise ConfigError(f"unknown unmatched mode {unmatched!r}")
    n_pred, n_gt = counts.shape

    assignment = hungarian(-counts.astype(np.float64))
    mapping = np.full(n_pred, -1, dtype=np.int64)
    for p, g in assignment:
        mapping[p] = g
    if unmatched == "merge":
        for p in range(n_pred):
            if mapping[p] < 0:
                mapping[p] = int(np.argmax(counts[p]))

    merged = np.zeros((n_gt, n_gt), dtype=np.int64)
    dropped = np.zeros(n_gt, dtype=np.int64)
    for p in range(n_pred):
        if mapping[p] >= 0:
            merged[mapping[p]] += counts[p]
        else:
            dropped += counts[p]

    gt_totals = counts.sum(axis=0)
    tp = np.diag(merged).astype(np.float64)
    fp = merged.sum(axis=1) - tp
    fn = gt_totals - tp

    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), 0.0)
        recall = np.where(gt_totals > 0, tp / gt_totals, 0.0)
    present = gt_totals > 0
    return EvalReport(
        mapping=mapping,
        oa=float(tp.sum() / total),
        macc=float(recall[present].mean()),
        miou=float(iou[present].mean()),
        per_class_iou=iou,
        per_class_recall=recall,
        per_class_count=gt_totals,
    )


def prototype_transfer(models, target_features) -> np.ndarray:
    """Classify rows by max-cosine against the concatenated per-branch,
    per-level centroid matrices."""
    from .train import concat_prototypes  # avoids a module cycle at import time

    protos = concat_prototypes(models)
    F = np.asarray(target_features, dtype=np.float64)
    if F.shape[1] != protos.shape[1]:
        raise ShapeError(
            f"feature dim {F.shape[1]} != prototype dim {protos.shape[1]}"
        )
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    P = np.divide(protos, norms, out=protos.copy(), where=norms > 0)
    fn = np.linalg.norm(F, axis=1, keepdims=True)
    Fn = np.divide(F, fn, out=F.copy(), where=fn > 0)
    return np.argmax(Fn @ P.T, axis=1)


ABSORBED_IOU_THRESHOLD = 0.05


def tail_report(report: EvalReport):
    """(class, point_count, iou, absorbed) rows sorted by count descending."""
    order = np.argsort(-report.per_class_count, kind="stable")
    rows = []
    for c in order:
        rows.append({
            "class": int(c),
            "count": int(report.per_class_count[c]),
            "iou": float(report.per_class_iou[c]),
            "recall": float(report.per_class_recall[c]),
            "absorbed": bool(report.per_class_iou[c] < ABSORBED_IOU_THRESHOLD
                             and report.per_class_count[c] > 0),
        })
    return rows


def write_report(path, report: EvalReport) -> None:
    """report.tsv: class, count, iou, recall rows plus a summary line."""
    with open(path, "w") as f:
        f.write("class\tcount\tiou\trecall\n")
        for c in range(report.per_class_iou.shape[0]):
            f.write(f"{c}\t{int(report.per_class_count[c])}"
                    f"\t{report.per_class_iou[c]:.6f}"
                    f"\t{report.per_class_recall[c]:.6f}\n")
        f.write(f"# OA={report.oa:.6f}\tmAcc={report.macc:.6f}\tmIoU={report.miou:.6f}\n")
