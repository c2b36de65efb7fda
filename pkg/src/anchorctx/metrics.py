"""Frame-level detection metrics and interval-width confidence tables."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .dataset import Box, FrameRecord, box_is_valid
from .errors import ConfigurationError, ValidationError

THRESHOLDS = (0.1, 0.3, 0.5)
SUMMARY_FIELDS = ("mAP10", "mAP30", "mAP50", "mAPmean")

FrameKey = tuple[str, int]


def iou(a: Box, b: Box) -> float:
    if not box_is_valid(a) or not box_is_valid(b):
        raise ValidationError(f"degenerate box in iou: {a}, {b}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def greedy_assign(boxes: Sequence[Box], gts: Sequence[Box], tau: float) -> list[int]:
    """Match ``boxes`` (already in priority order) one-to-one onto ``gts``.

    Each box takes the unmatched ground truth of highest IoU, provided the
    IoU is at least ``tau``. Returns the gt index per box, or -1.
    """
    taken = [False] * len(gts)
    out = []
    for box in boxes:
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            o = iou(box, gt)
            if o >= tau and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


@dataclass(frozen=True)
class Detection:
    frame: FrameKey
    box: Box
    score: float


@dataclass
class MatchResult:
    order: list[int]  # detection indices in ranked order
    is_tp: list[bool]  # per ranked detection
    matched_gt: list[tuple[FrameKey, int] | None]
    gt_matched: dict[FrameKey, list[bool]]


def rank_detections(dets: Sequence[Detection]) -> list[int]:
    """Score descending; ties by lower frame key, then lexicographic box."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].frame, dets[i].box))


def match_detections(dets: Sequence[Detection], gts: dict[FrameKey, list[Box]], tau: float) -> MatchResult:
    order = rank_detections(dets)
    gt_matched = {k: [False] * len(v) for k, v in gts.items()}
    is_tp, matched = [], []
    for i in order:
        d = dets[i]
        boxes = gts.get(d.frame, [])
        flags = gt_matched.get(d.frame, [])
        best, best_iou = -1, -1.0
        for j, gt in enumerate(boxes):
            if flags[j]:
                continue
            o = iou(d.box, gt)
            if o >= tau and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            flags[best] = True
            is_tp.append(True)
            matched.append((d.frame, best))
        else:
            is_tp.append(False)
            matched.append(None)
    return MatchResult(order, is_tp, matched, gt_matched)


def average_precision(is_tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve.

    Recall only moves at true positives, each by 1/n_gt, so the area is the
    mean over hits of the best precision at that rank or later. The sum is
    kept in exact rationals and rounded once.
    """
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = 0
    prec: list[Fraction] = []
    for k, hit in enumerate(is_tp, start=1):
        tp += bool(hit)
        prec.append(Fraction(tp, k))
    total = Fraction(0)
    best = Fraction(0)
    for k in range(len(prec) - 1, -1, -1):
        best = max(best, prec[k])
        if is_tp[k]:
            total += best
    return float(total / n_gt)


def match_and_ap(dets: Sequence[Detection], gts: dict[FrameKey, list[Box]], tau: float) -> float | None:
    """AP for one class at IoU threshold ``tau``; None when the class has no ground truth."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0,1], got {tau}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    return average_precision(match_detections(dets, gts, tau).is_tp, n_gt)


def _pred_field(p, name):
    return p[name] if isinstance(p, dict) else getattr(p, name)


def prediction_scores(p) -> Sequence[float]:
    """Per-class ranking scores: ``scores`` (ACD) or ``mean_scores`` (refined)."""
    if isinstance(p, dict):
        return p["scores"] if "scores" in p else p["mean_scores"]
    return p.scores if hasattr(p, "scores") else p.mean_scores


def per_class_ap(predictions: Iterable, frames: Sequence[FrameRecord], K: int,
                 thresholds: Sequence[float] = THRESHOLDS) -> dict[float, dict[int, float]]:
    """{tau: {class: AP}} over classes with at least one ground truth."""
    keys = {(f.video_id, f.t) for f in frames}
    gts: dict[int, dict[FrameKey, list[Box]]] = {k: {} for k in range(K)}
    for f in frames:
        for box, cls in f.ground_truth:
            gts[cls].setdefault((f.video_id, f.t), []).append(tuple(box))
    dets: dict[int, list[Detection]] = {k: [] for k in range(K)}
    for p in predictions:
        key = (str(_pred_field(p, "video_id")), int(_pred_field(p, "t")))
        if key not in keys:
            raise ValidationError(f"prediction references unknown frame {key}")
        box = tuple(float(v) for v in _pred_field(p, "box"))
        scores = prediction_scores(p)
        if len(scores) != K:
            raise ValidationError(f"prediction for {key} has {len(scores)} scores, expected {K}")
        for k in range(K):
            dets[k].append(Detection(key, box, float(scores[k])))
    out: dict[float, dict[int, float]] = {}
    for tau in thresholds:
        row = {}
        for k in range(K):
            ap = match_and_ap(dets[k], gts[k], tau)
            if ap is not None:
                row[k] = ap
        out[tau] = row
    return out


def summarize(table: dict[float, dict[int, float]]) -> dict[str, float]:
    vals = []
    for tau in THRESHOLDS:
        row = table[tau]
        vals.append(float(np.mean(list(row.values()))) if row else 0.0)
    return dict(zip(SUMMARY_FIELDS, [*vals, float(np.mean(vals))]))


def map_suite(predictions: Iterable, frames: Sequence[FrameRecord], K: int) -> dict[str, float]:
    """{mAP10, mAP30, mAP50, mAPmean} with per-class AP pooled over all frames."""
    if not frames:
        raise ConfigurationError("map_suite needs a non-empty dataset")
    return summarize(per_class_ap(predictions, frames, K))


def metrics_csv(table: dict[float, dict[int, float]], summary: dict[str, float], class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "class", "AP"])
    for tau in THRESHOLDS:
        for k, ap in sorted(table[tau].items()):
            w.writerow([f"{tau:.1f}", class_names[k], f"{ap:.6f}"])
    w.writerow([])
    w.writerow(list(SUMMARY_FIELDS))
    w.writerow([f"{summary[f]:.6f}" for f in SUMMARY_FIELDS])
    return buf.getvalue()


# -- confidence analysis ------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceInstance:
    true_class: int
    predicted_class: int
    iw: Sequence[float]


@dataclass(frozen=True)
class ConfidenceRow:
    class_name: str
    instances: int
    accuracy: float
    mean_iw_correct: float | None
    n_correct: int
    mean_iw_incorrect: float | None
    n_incorrect: int


def confidence_report(instances: Iterable[ConfidenceInstance], class_names: Sequence[str]) -> list[ConfidenceRow]:
    """Per-class accuracy and mean IW (x100, at the true class) split by correctness."""
    buckets: dict[int, list[ConfidenceInstance]] = {}
    for inst in instances:
        buckets.setdefault(int(inst.true_class), []).append(inst)
    rows = []
    for k in sorted(buckets):
        items = buckets[k]
        good = [100.0 * float(i.iw[k]) for i in items if i.predicted_class == k]
        bad = [100.0 * float(i.iw[k]) for i in items if i.predicted_class != k]
        rows.append(ConfidenceRow(
            class_name=class_names[k],
            instances=len(items),
            accuracy=len(good) / len(items),
            mean_iw_correct=float(np.mean(good)) if good else None,
            n_correct=len(good),
            mean_iw_incorrect=float(np.mean(bad)) if bad else None,
            n_incorrect=len(bad),
        ))
    rows.sort(key=lambda r: -r.accuracy)
    return rows


def confidence_instances(predictions: Iterable, frames: Sequence[FrameRecord], tau: float = 0.5) -> list[ConfidenceInstance]:
    """Pair each ground-truth action with its best overlapping refined prediction.

    Within a frame, predictions are ranked by their top mean score and
    assigned greedily to the unmatched ground truth of highest IoU >= tau.
    Unmatched ground truths have no interval width and are skipped.
    """
    by_frame: dict[FrameKey, list] = {}
    for p in predictions:
        by_frame.setdefault((str(_pred_field(p, "video_id")), int(_pred_field(p, "t"))), []).append(p)
    out = []
    for f in frames:
        preds = by_frame.get((f.video_id, f.t), [])
        if not preds or not f.ground_truth:
            continue
        preds = sorted(preds, key=lambda p: -max(_pred_field(p, "mean_scores")))
        gt_boxes = [b for b, _ in f.ground_truth]
        assign = greedy_assign([tuple(_pred_field(p, "box")) for p in preds], gt_boxes, tau)
        for p, j in zip(preds, assign):
            if j >= 0:
                out.append(ConfidenceInstance(f.ground_truth[j][1], int(_pred_field(p, "refined_class")),
                                              list(_pred_field(p, "iw"))))
    return out


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.4f}"


def confidence_csv(rows: Sequence[ConfidenceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "instances", "accuracy", "mean_iw_correct", "n_correct", "mean_iw_incorrect", "n_incorrect"])
    for r in rows:
        w.writerow([r.class_name, r.instances, f"{r.accuracy:.4f}", _fmt(r.mean_iw_correct), r.n_correct,
                    _fmt(r.mean_iw_incorrect), r.n_incorrect])
    return buf.getvalue()


def pooled_iw(instances: Iterable[ConfidenceInstance]) -> tuple[float, float]:
    """Mean IW (x100, true class) over all correct and all incorrect instances."""
    good, bad = [], []
    for i in instances:
        (good if i.predicted_class == i.true_class else bad).append(100.0 * float(i.iw[i.true_class]))
    return (float(np.mean(good)) if good else math.nan, float(np.mean(bad)) if bad else math.nan)
