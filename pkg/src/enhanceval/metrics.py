"""Voxel-level and patient-level segmentation/detection metrics.

All metrics reduce to one-vs-rest confusion counts.  Degenerate ratios
(0/0 terms) never raise: they take a defined fallback value and the
affected metric is flagged, so cohort aggregation stays total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStatisticsError, ValidationError
from .volume_io import LabelGrid, require_alignment

CLASSES = (1, 2, 3)
ENHANCING = 3

# Detection tiers by enhancing-class Dice, inclusive lower bounds.
TIER_THRESHOLDS = (("excellent", 0.7), ("good", 0.5), ("acceptable", 0.3))
TIER_ORDER = {"none": -1, "below": 0, "acceptable": 1, "good": 2, "excellent": 3}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def dice(counts: ConfusionCounts) -> float:
    """2tp / (2tp + fp + fn); 1.0 when the class is absent in both masks."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


def absent_in_both(counts: ConfusionCounts) -> bool:
    return counts.tp == 0 and counts.fp == 0 and counts.fn == 0


def precision(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 0.0


def recall(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 0.0


def f1(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom else 1.0


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean of sensitivity and specificity.

    If one class is empty its term is dropped and the other term is
    returned alone (use :func:`degenerate_flags` to detect this).
    """
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    if pos == 0 and neg == 0:
        return 0.0
    if pos == 0:
        return counts.tn / neg
    if neg == 0:
        return counts.tp / pos
    return (counts.tp / pos + counts.tn / neg) / 2.0


def degenerate_flags(counts: ConfusionCounts) -> list[str]:
    flags = []
    if absent_in_both(counts):
        flags.append("absent-in-both")
    if counts.tp + counts.fn == 0:
        flags.append("no-positive-voxels")
    if counts.tn + counts.fp == 0:
        flags.append("no-negative-voxels")
    if counts.tp + counts.fp == 0:
        flags.append("no-predicted-positives")
    return flags


def voxel_confusion(gt: LabelGrid, pred: LabelGrid, cls: int) -> ConfusionCounts:
    """One-vs-rest voxel counts for class ``cls`` over the whole grid."""
    require_alignment(gt, pred, "ground truth and prediction")
    g = gt.data == cls
    p = pred.data == cls
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    tn = g.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def detection_tier(enh_dice: float, gt_positive: bool) -> str:
    if not gt_positive:
        return "none"
    for name, threshold in TIER_THRESHOLDS:
        if enh_dice >= threshold:
            return name
    return "below"


@dataclass
class ClassMetrics:
    dice: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    flags: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts) -> "ClassMetrics":
        return cls(
            dice=dice(counts),
            balanced_accuracy=balanced_accuracy(counts),
            precision=precision(counts),
            recall=recall(counts),
            f1=f1(counts),
            flags=degenerate_flags(counts),
        )


@dataclass
class CaseEvaluation:
    case_id: str
    per_class: dict[int, ClassMetrics]
    gt_enh_volume_cm3: float
    pred_enh_volume_cm3: float
    gt_positive: bool
    pred_positive: bool
    detection_tier: str

    @property
    def enh_dice(self) -> float:
        return self.per_class[ENHANCING].dice

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "classes": {
                str(c): {
                    "dice": m.dice,
                    "balanced_accuracy": m.balanced_accuracy,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "flags": m.flags,
                }
                for c, m in sorted(self.per_class.items())
            },
            "gt_enh_volume_cm3": self.gt_enh_volume_cm3,
            "pred_enh_volume_cm3": self.pred_enh_volume_cm3,
            "gt_positive": self.gt_positive,
            "pred_positive": self.pred_positive,
            "detection_tier": self.detection_tier,
        }

    CSV_FIELDS = (
        "case_id",
        "gt_positive",
        "pred_positive",
        "detection_tier",
        "gt_enh_volume_cm3",
        "pred_enh_volume_cm3",
        "dice_1",
        "dice_2",
        "dice_3",
        "balanced_accuracy_3",
        "precision_3",
        "recall_3",
        "f1_3",
    )

    def to_csv_row(self) -> dict:
        row = {
            "case_id": self.case_id,
            "gt_positive": int(self.gt_positive),
            "pred_positive": int(self.pred_positive),
            "detection_tier": self.detection_tier,
            "gt_enh_volume_cm3": repr(self.gt_enh_volume_cm3),
            "pred_enh_volume_cm3": repr(self.pred_enh_volume_cm3),
        }
        for c in CLASSES:
            row[f"dice_{c}"] = repr(self.per_class[c].dice)
        m = self.per_class[ENHANCING]
        row["balanced_accuracy_3"] = repr(m.balanced_accuracy)
        row["precision_3"] = repr(m.precision)
        row["recall_3"] = repr(m.recall)
        row["f1_3"] = repr(m.f1)
        return row


def evaluate_case(
    gt: LabelGrid,
    pred: LabelGrid,
    case_id: str = "",
    min_pred_volume_cm3: float = 0.0,
) -> CaseEvaluation:
    """Per-class metrics plus patient-level positivity and detection tier.

    ``gt_positive`` means any enhancing voxel in the ground truth;
    ``pred_positive`` means predicted enhancing volume strictly above
    ``min_pred_volume_cm3`` (default 0, i.e. any predicted voxel).
    """
    require_alignment(gt, pred, "ground truth and prediction")
    voxvol = gt.voxel_volume_mm3
    per_class = {
        c: ClassMetrics.from_counts(voxel_confusion(gt, pred, c)) for c in CLASSES
    }
    gt_enh = int(np.count_nonzero(gt.data == ENHANCING))
    pred_enh = int(np.count_nonzero(pred.data == ENHANCING))
    gt_vol = gt_enh * voxvol / 1000.0
    pred_vol = pred_enh * voxvol / 1000.0
    gt_positive = gt_vol > 0.0
    pred_positive = pred_vol > min_pred_volume_cm3
    return CaseEvaluation(
        case_id=case_id,
        per_class=per_class,
        gt_enh_volume_cm3=gt_vol,
        pred_enh_volume_cm3=pred_vol,
        gt_positive=gt_positive,
        pred_positive=pred_positive,
        detection_tier=detection_tier(per_class[ENHANCING].dice, gt_positive),
    )


@dataclass
class DetectionSummary:
    n: int
    counts: ConfusionCounts
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    success_rate: float | None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "tn": self.counts.tn,
                "fn": self.counts.fn,
            },
            "balanced_accuracy": self.balanced_accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "success_rate": self.success_rate,
            "flags": self.flags,
        }


def detection_counts(pairs: list[tuple[bool, bool]]) -> ConfusionCounts:
    """Patient-level counts from (gt_positive, pred_positive) pairs."""
    tp = sum(1 for g, p in pairs if g and p)
    fn = sum(1 for g, p in pairs if g and not p)
    fp = sum(1 for g, p in pairs if not g and p)
    tn = sum(1 for g, p in pairs if not g and not p)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def cohort_detection(evals: list[CaseEvaluation]) -> DetectionSummary:
    """Patient-level detection summary over a cohort of case evaluations.

    ``success_rate`` is the fraction of ground-truth-positive cases whose
    enhancing Dice reaches the acceptable tier (>= 0.3); it is None (with a
    flag) when the cohort has no positive case.
    """
    if not evals:
        raise DegenerateStatisticsError("cannot summarize an empty cohort")
    counts = detection_counts([(e.gt_positive, e.pred_positive) for e in evals])
    flags = []
    if counts.tp + counts.fn == 0:
        flags.append("no-positive-cases")
    if counts.tn + counts.fp == 0:
        flags.append("no-negative-cases")
    positives = [e for e in evals if e.gt_positive]
    if positives:
        success = sum(
            1 for e in positives if TIER_ORDER[e.detection_tier] >= TIER_ORDER["acceptable"]
        ) / len(positives)
    else:
        success = None
    return DetectionSummary(
        n=len(evals),
        counts=counts,
        balanced_accuracy=balanced_accuracy(counts),
        sensitivity=recall(counts),
        specificity=counts.tn / (counts.tn + counts.fp)
        if counts.tn + counts.fp
        else 0.0,
        precision=precision(counts),
        f1=f1(counts),
        success_rate=success,
        flags=flags,
    )


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    tpr: float
    fpr: float
    precision: float
    recall: float


@dataclass
class CurveSet:
    roc: list[CurvePoint]
    auroc: float
    pr: list[CurvePoint]
    average_precision: float

    def to_dict(self) -> dict:
        def pts(points):
            return [
                {
                    "threshold": p.threshold,
                    "tpr": p.tpr,
                    "fpr": p.fpr,
                    "precision": p.precision,
                    "recall": p.recall,
                }
                for p in points
            ]

        return {
            "roc": pts(self.roc),
            "auroc": self.auroc,
            "pr": pts(self.pr),
            "average_precision": self.average_precision,
        }


def roc_pr(scores: list[tuple[float, bool]]) -> CurveSet:
    """ROC and precision-recall curves from (case score, gt_positive) pairs.

    Thresholds sweep the unique scores in descending order (ties share a
    threshold); a virtual starting point at threshold +inf anchors (0, 0).
    AUROC is the trapezoid-rule area; average precision is
    sum((R_i - R_{i-1}) * P_i) over the sweep.
    """
    n_pos = sum(1 for _, y in scores if y)
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateStatisticsError(
            f"ROC needs both classes: {n_pos} positives, {n_neg} negatives"
        )
    arr = sorted(scores, key=lambda sy: -sy[0])
    points = [CurvePoint(float("inf"), 0.0, 0.0, 1.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(arr):
        threshold = arr[i][0]
        while i < len(arr) and arr[i][0] == threshold:
            if arr[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append(
            CurvePoint(
                threshold=float(threshold),
                tpr=tp / n_pos,
                fpr=fp / n_neg,
                precision=tp / (tp + fp),
                recall=tp / n_pos,
            )
        )
    auroc = 0.0
    ap = 0.0
    for prev, cur in zip(points, points[1:]):
        auroc += (cur.fpr - prev.fpr) * (cur.tpr + prev.tpr) / 2.0
        ap += (cur.recall - prev.recall) * cur.precision
    return CurveSet(roc=points, auroc=auroc, pr=points, average_precision=ap)
