"""Post-processing and evaluation: thresholding, region extraction, greedy
IoU matching, average precision / recall over IoU thresholds, and
validation-set threshold tuning."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Annotation, mask_to_annotations

MIN_REGION_LENGTH = 3
IOU_THRESHOLDS = tuple(np.round(np.arange(0.30, 0.701, 0.05), 2))
DEFAULT_TUNE_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass(frozen=True)
class Detection:
    start: int
    end: int  # inclusive
    score: float


@dataclass
class EvalReport:
    iou_thresholds: tuple
    ap: dict  # iou threshold -> AP
    recall: dict  # iou threshold -> recall at the operating threshold
    mean_ap: float
    mean_ar: float
    score_threshold: float
    top1: bool

    def to_json(self):
        return json.dumps(
            {
                "iou_thresholds": list(self.iou_thresholds),
                "ap": {f"{k:.2f}": v for k, v in self.ap.items()},
                "recall": {f"{k:.2f}": v for k, v in self.recall.items()},
                "mean_ap": self.mean_ap,
                "mean_ar": self.mean_ar,
                "score_threshold": self.score_threshold,
                "top1": self.top1,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            iou_thresholds=tuple(d["iou_thresholds"]),
            ap={float(k): v for k, v in d["ap"].items()},
            recall={float(k): v for k, v in d["recall"].items()},
            mean_ap=d["mean_ap"],
            mean_ar=d["mean_ar"],
            score_threshold=d["score_threshold"],
            top1=d["top1"],
        )


def threshold_mask(probs, theta):
    """bit i = 1 iff probs[i] >= theta."""
    if not 0 < theta < 1:
        raise ValueError(f"threshold must be in (0, 1), got {theta}")
    return (np.asarray(probs) >= theta).astype(np.uint8)


def extract_detections(probs, theta, min_length=MIN_REGION_LENGTH):
    """Maximal runs of the thresholded mask with length >= 3, scored by the
    max probability inside, sorted by start."""
    probs = np.asarray(probs)
    mask = threshold_mask(probs, theta)
    out = []
    for run in mask_to_annotations(mask):
        if run.right - run.left + 1 >= min_length:
            score = float(probs[run.left : run.right + 1].max())
            out.append(Detection(run.left, run.right, score))
    return out


def interval_iou(a, b):
    """Intersection over union of two inclusive integer intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def match_detections(detections_by_id, truths_by_id, iou_threshold):
    """Greedy matching over the pooled detection set.

    Detections are processed in descending score (ties: earlier start, then
    id).  Each is a TP if its best-IoU unmatched truth in the same XIC
    reaches the threshold; each truth matches at most once.

    Returns (flags, scores, n_truths, matched_by_id) where flags[i] is True
    for TP, aligned with scores in processing order.
    """
    pooled = []
    for xic_id, dets in detections_by_id.items():
        for d in dets:
            pooled.append((-d.score, d.start, xic_id, d))
    pooled.sort(key=lambda item: (item[0], item[1], item[2]))

    matched = {xic_id: [False] * len(truths) for xic_id, truths in truths_by_id.items()}
    flags, scores = [], []
    for neg_score, _, xic_id, det in pooled:
        truths = truths_by_id.get(xic_id, [])
        taken = matched.setdefault(xic_id, [False] * len(truths))
        best_iou, best_j = 0.0, -1
        for j, truth in enumerate(truths):
            if taken[j]:
                continue
            iou = interval_iou((det.start, det.end), (truth.left, truth.right))
            if iou > best_iou:
                best_iou, best_j = iou, j
        is_tp = best_j >= 0 and best_iou >= iou_threshold
        if is_tp:
            matched[xic_id][best_j] = True
        flags.append(is_tp)
        scores.append(-neg_score)
    n_truths = sum(len(t) for t in truths_by_id.values())
    return flags, scores, n_truths, matched


def average_precision(flags, n_truths):
    """All-point interpolated AP from TP/FP flags in descending-score order."""
    if n_truths == 0 or not flags:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_truths
    precision = tp / (tp + fp)
    # precision envelope from the right, then sum of recall-step areas
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def average_precision_coco101(flags, n_truths):
    """COCO-style 101-point interpolation (comparison option)."""
    if n_truths == 0 or not flags:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_truths
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0, 1, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


def average_recall(matched_by_id, n_truths, n_detections):
    """Matched truths / total truths; an empty-truth set scores 1.0 only when
    there are no detections either."""
    if n_truths == 0:
        return 1.0 if n_detections == 0 else 0.0
    n_matched = sum(sum(m) for m in matched_by_id.values())
    return n_matched / n_truths


def _normalize_truths(truths_by_id):
    out = {}
    for xic_id, truths in truths_by_id.items():
        if isinstance(truths, np.ndarray):
            truths = mask_to_annotations(truths)
        out[xic_id] = [t if isinstance(t, Annotation) else Annotation(*t) for t in truths]
    return out


def evaluate(probs_by_id, truths_by_id, theta=0.5, top1=False,
             iou_thresholds=IOU_THRESHOLDS, interpolation="all"):
    """AP and recall per IoU threshold, plus their means.

    probs_by_id: id -> length-T probability vector.
    truths_by_id: id -> label mask or list of intervals; ids must match.
    """
    if set(probs_by_id) != set(truths_by_id):
        missing = set(probs_by_id) ^ set(truths_by_id)
        raise ValueError(f"probability/truth id mismatch: {sorted(missing)[:5]}")
    truths_by_id = _normalize_truths(truths_by_id)
    detections_by_id = {}
    for xic_id, probs in probs_by_id.items():
        dets = extract_detections(probs, theta)
        if top1 and len(dets) > 1:
            dets = [max(dets, key=lambda d: (d.score, -d.start))]
        detections_by_id[xic_id] = dets
    n_detections = sum(len(d) for d in detections_by_id.values())
    ap_fn = average_precision_coco101 if interpolation == "coco101" else average_precision

    ap, recall = {}, {}
    for iou_t in iou_thresholds:
        flags, _, n_truths, matched = match_detections(detections_by_id, truths_by_id, iou_t)
        ap[iou_t] = ap_fn(flags, n_truths)
        recall[iou_t] = average_recall(matched, n_truths, n_detections)
    mean_ap = float(np.mean(list(ap.values())))
    mean_ar = float(np.mean(list(recall.values())))
    return EvalReport(tuple(iou_thresholds), ap, recall, mean_ap, mean_ar, theta, top1)


def tune_threshold(probs_by_id, truths_by_id, grid=DEFAULT_TUNE_GRID, top1=False):
    """argmax of mean AP over the candidate grid; ties resolved toward the
    lower threshold (favoring recall)."""
    grid = sorted(grid)
    if not grid or not all(0 < g < 1 for g in grid):
        raise ValueError("candidate grid must be non-empty within (0, 1)")
    if not truths_by_id:
        raise ValueError("validation set is empty")
    best_theta, best_ap = None, -1.0
    for theta in grid:
        report = evaluate(probs_by_id, truths_by_id, theta=theta, top1=top1)
        if report.mean_ap > best_ap:
            best_theta, best_ap = theta, report.mean_ap
    return best_theta


def detections_to_csv(detections_by_id):
    lines = ["id,start,end,score"]
    for xic_id in sorted(detections_by_id):
        for d in detections_by_id[xic_id]:
            lines.append(f"{xic_id},{d.start},{d.end},{d.score:.6f}")
    return "\n".join(lines) + "\n"


def detections_from_csv(text):
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "id,start,end,score":
        raise ValueError("bad detections CSV header")
    out = {}
    for ln in lines[1:]:
        xic_id, start, end, score = ln.split(",")
        out.setdefault(xic_id, []).append(Detection(int(start), int(end), float(score)))
    return out
