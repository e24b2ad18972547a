"""Evaluation metrics: confusion-matrix statistics, ROC/AUC by the
rank method, one-vs-rest multiclass AUC, t-distribution confidence
intervals, and detection matching with average precision.

Undefined metrics are reported as None (absent), never coerced to 0:
a silent zero would poison downstream confidence intervals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import betainc

from .core import BoundingBox
from .ioutil import atomic_write_text, canonical_json

DEFAULT_THRESHOLD = 0.5
DEFAULT_IOU_THRESHOLD = 0.40


# ---------------------------------------------------------------------------
# Binary classification


@dataclass(frozen=True)
class BinaryOutcomeSet:
    """Scores in [0,1] with binary truths; positive iff score >= threshold."""

    scores: np.ndarray
    truths: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        truths = np.asarray(self.truths, dtype=np.int64)
        if scores.shape != truths.shape or scores.ndim != 1:
            raise ValueError("scores and truths must be equal-length 1-D arrays")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if not np.all((truths == 0) | (truths == 1)):
            raise ValueError("truths must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truths", truths)


@dataclass(frozen=True)
class BinaryMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    specificity: Optional[float]


def binary_metrics(outcomes: BinaryOutcomeSet) -> BinaryMetrics:
    """Threshold metrics.  precision is absent with no positive predictions,
    recall with no positive truths, specificity with no negative truths,
    F1 whenever precision or recall is absent or both are zero.
    """
    if outcomes.scores.size == 0:
        raise ValueError("need at least one sample")
    predicted = outcomes.scores >= outcomes.threshold
    actual = outcomes.truths == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))

    accuracy = (tp + tn) / (tp + tn + fp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    specificity = tn / (tn + fp) if tn + fp > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return BinaryMetrics(tp=tp, fp=fp, tn=tn, fn=fn, accuracy=accuracy,
                         precision=precision, recall=recall, f1=f1,
                         specificity=specificity)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and values[order[j]] == values[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0   # average of 1-based ranks i+1..j
        i = j
    return ranks


def roc_auc(outcomes: BinaryOutcomeSet) -> float:
    """AUC as the Mann-Whitney statistic P(s+ > s-) + 0.5 P(tie), rank method."""
    n_pos = int(np.sum(outcomes.truths == 1))
    n_neg = int(np.sum(outcomes.truths == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    ranks = _midranks(outcomes.scores)
    pos_rank_sum = float(ranks[outcomes.truths == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(outcomes: BinaryOutcomeSet) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) swept over distinct score thresholds, from (0,0) to (1,1).

    Trapezoidal area under this curve equals :func:`roc_auc` (ties form
    diagonal segments whose trapezoids give the half-credit).
    """
    n_pos = int(np.sum(outcomes.truths == 1))
    n_neg = int(np.sum(outcomes.truths == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined: need at least one positive and one negative")
    order = np.argsort(-outcomes.scores, kind="mergesort")
    scores = outcomes.scores[order]
    truths = outcomes.truths[order]
    tp_cum = np.cumsum(truths == 1)
    fp_cum = np.cumsum(truths == 0)
    # keep the last index of each tie group: threshold includes the whole group
    last = np.append(scores[1:] != scores[:-1], True)
    tpr = np.concatenate([[0.0], tp_cum[last] / n_pos])
    fpr = np.concatenate([[0.0], fp_cum[last] / n_neg])
    return fpr, tpr


def trapezoid_area(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


@dataclass(frozen=True)
class MulticlassAUC:
    per_class: dict
    macro: Optional[float]
    weighted: Optional[float]
    warnings: tuple[str, ...]


def multiclass_auc(scores: np.ndarray, truths: np.ndarray,
                   class_names: Sequence[str]) -> MulticlassAUC:
    """One-vs-rest AUC per class plus macro and support-weighted averages.

    A class with no positives or no negatives is reported absent and
    excluded from both averages, with a warning naming it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] != len(class_names):
        raise ValueError("scores must be (n_samples, n_classes)")
    if len(class_names) < 3:
        raise ValueError("multiclass AUC needs at least 3 classes")

    per_class: dict[str, Optional[float]] = {}
    warnings = []
    defined = []
    supports = []
    for idx, name in enumerate(class_names):
        binary = (truths == idx).astype(np.int64)
        if binary.sum() == 0 or binary.sum() == len(binary):
            per_class[name] = None
            warnings.append(f"class {name} lacks positives or negatives; excluded")
            continue
        auc = roc_auc(BinaryOutcomeSet(scores[:, idx], binary))
        per_class[name] = auc
        defined.append(auc)
        supports.append(int(binary.sum()))
    if defined:
        macro = float(np.mean(defined))
        weighted = float(np.average(defined, weights=supports))
    else:
        macro = weighted = None
    return MulticlassAUC(per_class=per_class, macro=macro, weighted=weighted,
                         warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# t-distribution confidence intervals


def _t_cdf(t: float, df: float) -> float:
    # tail mass via the regularized incomplete beta function
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return tail if t < 0 else 1.0 - tail


def t_quantile(p: float, df: int, tol: float = 1e-9) -> float:
    """Inverse CDF of Student's t by bisection of the beta-function CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if df < 1:
        raise ValueError("df must be >= 1")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df, tol)
    lo, hi = 0.0, 1.0
    while _t_cdf(hi, df) < p:
        hi *= 2.0
        if hi > 1e18:
            raise ArithmeticError("t-quantile bracket failed")
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if _t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lower: float
    upper: float
    level: float
    df: int

    def __post_init__(self):
        if not self.lower <= self.point <= self.upper:
            raise ValueError("interval must contain the point estimate")


def t_confidence_interval(point: float, sem: float, n: int,
                          level: float = 0.95) -> ConfidenceInterval:
    """point +/- t_{(1+level)/2, n-1} * sem."""
    if n < 2:
        raise ValueError("confidence interval needs n >= 2")
    if sem < 0:
        raise ValueError("sem must be >= 0")
    t = t_quantile((1.0 + level) / 2.0, n - 1)
    return ConfidenceInterval(point=point, lower=point - t * sem,
                              upper=point + t * sem, level=level, df=n - 1)


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least 2 values")
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


# ---------------------------------------------------------------------------
# Detection


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; integer areas, one final division."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")


@dataclass(frozen=True)
class DetectionInstance:
    """One image's ground-truth boxes and scored predictions."""

    image_id: str
    gt_boxes: tuple[BoundingBox, ...]
    predictions: tuple[ScoredBox, ...]


@dataclass(frozen=True)
class MatchedPrediction:
    prediction_index: int        # index into instance.predictions
    confidence: float
    matched_gt: Optional[int]    # index into instance.gt_boxes
    iou: float


def match_detections(instance: DetectionInstance,
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[MatchedPrediction]:
    """Greedy matching in confidence-descending order (ties by input order).

    Each prediction takes the unmatched ground truth of highest IoU when
    that IoU reaches the threshold; each ground truth matches at most once.
    """
    order = sorted(range(len(instance.predictions)),
                   key=lambda i: (-instance.predictions[i].confidence, i))
    taken: set[int] = set()
    results = []
    for idx in order:
        pred = instance.predictions[idx]
        best_gt, best_iou = None, 0.0
        for g, gt in enumerate(instance.gt_boxes):
            if g in taken:
                continue
            value = iou(pred.box, gt)
            if value > best_iou:
                best_gt, best_iou = g, value
        if best_gt is not None and best_iou >= iou_threshold:
            taken.add(best_gt)
            results.append(MatchedPrediction(idx, pred.confidence, best_gt, best_iou))
        else:
            results.append(MatchedPrediction(idx, pred.confidence, None, 0.0))
    return results


@dataclass(frozen=True)
class DetectionSummary:
    ap: float
    precision: Optional[float]
    recall: float
    f1: Optional[float]
    best_confidence: Optional[float]   # cut achieving the best F1
    n_gt: int
    n_predictions: int


def average_precision(instances: Sequence[DetectionInstance],
                      iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> DetectionSummary:
    """All-points AP with the precision envelope; P/R/F1 at the best-F1 cut.

    Matching is greedy per instance; true-positive flags are then pooled
    and swept over confidence cuts globally.  Single tumor class, so mAP
    equals this AP.
    """
    n_gt = sum(len(inst.gt_boxes) for inst in instances)
    if n_gt == 0:
        raise ValueError("average precision undefined without ground-truth boxes")

    pooled = []   # (confidence, order key, is_tp)
    for inst_idx, inst in enumerate(instances):
        for match in match_detections(inst, iou_threshold):
            pooled.append((match.confidence, inst_idx, match.prediction_index,
                           match.matched_gt is not None))
    pooled.sort(key=lambda rec: (-rec[0], rec[1], rec[2]))
    n_pred = len(pooled)
    if n_pred == 0:
        return DetectionSummary(ap=0.0, precision=None, recall=0.0, f1=None,
                                best_confidence=None, n_gt=n_gt, n_predictions=0)

    flags = np.array([rec[3] for rec in pooled], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    precisions = tp_cum / (tp_cum + fp_cum)
    recalls = tp_cum / n_gt

    # envelope: precision at recall r becomes max precision at recall >= r
    mrec = np.concatenate([[0.0], recalls])
    mpre = np.concatenate([[1.0], precisions])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))

    best_k, best_f1 = None, -1.0
    for k in range(1, n_pred + 1):
        p, r = precisions[k - 1], recalls[k - 1]
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        if f1 > best_f1:
            best_k, best_f1 = k, f1
    p = float(precisions[best_k - 1])
    r = float(recalls[best_k - 1])
    f1 = 2 * p * r / (p + r) if p + r > 0 else None
    return DetectionSummary(ap=ap, precision=p, recall=r, f1=f1,
                            best_confidence=float(pooled[best_k - 1][0]),
                            n_gt=n_gt, n_predictions=n_pred)


# ---------------------------------------------------------------------------
# Prediction and report files


@dataclass(frozen=True)
class ClassificationRow:
    report_id: str
    task: str
    probs: dict
    truth: Optional[str]


def save_classification_predictions(rows: Sequence[ClassificationRow], path: str | Path) -> None:
    doc = [{"report_id": r.report_id, "task": r.task, "probs": dict(r.probs),
            "truth": r.truth} for r in rows]
    atomic_write_text(Path(path), canonical_json(doc) + "\n")


def load_classification_predictions(path: str | Path) -> list[ClassificationRow]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [ClassificationRow(report_id=row["report_id"], task=row["task"],
                              probs=dict(row["probs"]), truth=row.get("truth"))
            for row in doc]


def save_detection_predictions(instances: Sequence[DetectionInstance], path: str | Path) -> None:
    doc = [{
        "image_id": inst.image_id,
        "boxes": [[*p.box.as_tuple(), p.confidence] for p in inst.predictions],
        "gt": [list(b.as_tuple()) for b in inst.gt_boxes],
    } for inst in instances]
    atomic_write_text(Path(path), canonical_json(doc) + "\n")


def load_detection_predictions(path: str | Path) -> list[DetectionInstance]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    instances = []
    for row in doc:
        preds = tuple(ScoredBox(BoundingBox(*map(int, b[:4])), float(b[4]))
                      for b in row.get("boxes", []))
        gts = tuple(BoundingBox(*map(int, b)) for b in row.get("gt", []))
        instances.append(DetectionInstance(image_id=str(row["image_id"]),
                                           gt_boxes=gts, predictions=preds))
    return instances


@dataclass(frozen=True)
class MetricRow:
    metric: str
    point: Optional[float]
    ci_lower: Optional[float]
    ci_upper: Optional[float]
    n: int


def write_metrics_report(rows: Sequence[MetricRow], json_path: str | Path,
                         csv_path: Optional[str | Path] = None) -> None:
    doc = [{"metric": r.metric, "point": r.point, "ci_lower": r.ci_lower,
            "ci_upper": r.ci_upper, "n": r.n} for r in rows]
    atomic_write_text(Path(json_path), canonical_json(doc) + "\n")
    if csv_path is not None:
        # manual CSV assembly keeps byte-identical output across platforms
        lines = ["metric,point,ci_lower,ci_upper,n"]
        for r in rows:
            def cell(v):
                return "" if v is None else repr(float(v))
            lines.append(f"{r.metric},{cell(r.point)},{cell(r.ci_lower)},{cell(r.ci_upper)},{r.n}")
        atomic_write_text(Path(csv_path), "\n".join(lines) + "\n")


def load_metrics_report(path: str | Path) -> list[MetricRow]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [MetricRow(metric=row["metric"], point=row["point"],
                      ci_lower=row["ci_lower"], ci_upper=row["ci_upper"],
                      n=int(row["n"])) for row in doc]
