"""Detection matching, precision/recall and COCO-style average precision."""
from dataclasses import dataclass, field

import numpy as np

from .boxes import box_iou
from .errors import DataError

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.arange(101) / 100.0  # correctly rounded i/100


@dataclass
class MatchResult:
    """Per-image matching outcome; detection rows are in score-descending order."""

    tp: np.ndarray  # (n_det, n_thr) bool
    scores: np.ndarray
    classes: np.ndarray
    order: np.ndarray  # index of each row in the caller's detection list
    fn: np.ndarray  # (n_thr,) unmatched gt count
    thresholds: np.ndarray

    @property
    def fp(self):
        return ~self.tp


def score_order(scores):
    """Indices sorting by score descending; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match(det_boxes, det_scores, det_classes, gt_boxes, gt_classes, thresholds=(0.5,)):
    """Greedy matching of one image's detections to its ground truth.

    Detections are taken by descending score. Each claims the unclaimed gt
    of its class with the highest IoU, provided that IoU reaches the
    threshold; ties go to the lowest gt index.
    """
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    det_classes = np.asarray(det_classes, dtype=np.int64).reshape(-1)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    order = score_order(det_scores)
    det_boxes, det_classes = det_boxes[order], det_classes[order]
    scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)[order]
    tp = np.zeros((len(order), len(thresholds)), dtype=bool)
    fn = np.full(len(thresholds), len(gt_boxes), dtype=np.int64)
    if len(order) and len(gt_boxes):
        ious = box_iou(det_boxes, gt_boxes)
        ious[det_classes[:, None] != gt_classes[None]] = -1.0
        for t, thr in enumerate(thresholds):
            free = np.ones(len(gt_boxes), dtype=bool)
            for d in range(len(order)):
                cand = np.where(free, ious[d], -1.0)
                g = int(np.argmax(cand))
                if cand[g] >= thr:
                    free[g] = False
                    tp[d, t] = True
            fn[t] = int(free.sum())
    return MatchResult(tp, scores, det_classes, order, fn, thresholds)


def precision_recall(tp, fp, total_gt):
    """``P = TP / (TP + FP)``, ``R = TP / total_gt``; both 0 when undefined."""
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / total_gt if total_gt > 0 else 0.0
    return precision, recall


def pr_curve(tp_flags, scores, total_gt):
    """Cumulative precision and recall down the score ranking."""
    order = score_order(scores)
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64)[order])
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64)[order])
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    recall = tp / total_gt
    return precision, recall


def interpolated_precision(tp_flags, scores, total_gt, points=RECALL_POINTS):
    """Monotone precision envelope sampled at the given recall levels."""
    if total_gt <= 0:
        raise ValueError("precision envelope needs at least one ground truth")
    if len(tp_flags) == 0:
        return np.zeros(len(points))
    precision, recall = pr_curve(tp_flags, scores, total_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, points, side="left")
    out = np.zeros(len(points))
    ok = idx < len(recall)
    out[ok] = envelope[idx[ok]]
    return out


def average_precision(tp_flags, scores, total_gt):
    """101-point interpolated AP; ``None`` when there is no ground truth."""
    if total_gt <= 0:
        return None
    return float(interpolated_precision(tp_flags, scores, total_gt).mean())


@dataclass
class EvalReport:
    thresholds: np.ndarray
    ap: dict  # class -> (n_thr,) AP, classes with >= 1 gt only
    map50: float
    map: float
    precision: float
    recall: float
    pr_curves: dict = field(repr=False, default_factory=dict)  # class -> envelope at IoU 0.5 on RECALL_POINTS
    num_gt: dict = field(default_factory=dict)

    def map_at(self, t):
        if not self.ap:
            return 0.0
        return float(np.mean([v[t] for v in self.ap.values()]))

    def to_text(self, class_names=None):
        def name(c):
            return class_names[c] if class_names and c < len(class_names) else str(c)

        lines = [
            f"mAP@0.5       {self.map50:.6f}",
            f"mAP@[.5:.95]  {self.map:.6f}",
            f"precision     {self.precision:.6f}",
            f"recall        {self.recall:.6f}",
            "",
            f"{'class':<16}{'gt':>8}{'AP@0.5':>10}{'AP@[.5:.95]':>13}",
        ]
        for c in sorted(self.ap):
            lines.append(f"{name(c):<16}{self.num_gt[c]:>8}{self.ap[c][0]:>10.6f}{self.ap[c].mean():>13.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        """Machine-readable lines ``metric,class,threshold,value``."""
        lines = ["metric,class,threshold,value"]
        for c in sorted(self.ap):
            for t, thr in enumerate(self.thresholds):
                lines.append(f"ap,{c},{thr:.2f},{self.ap[c][t]:.6f}")
        for t, thr in enumerate(self.thresholds):
            lines.append(f"map,all,{thr:.2f},{self.map_at(t):.6f}")
        lines.append(f"map,all,0.50:0.95,{self.map:.6f}")
        lines.append(f"precision,all,0.50,{self.precision:.6f}")
        lines.append(f"recall,all,0.50,{self.recall:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(detections, ground_truth, thresholds=IOU_THRESHOLDS):
    """Score detections against ground truth over a set of IoU thresholds.

    ``detections`` is a list of Detection; ``ground_truth`` maps image id to
    an (m, 5) array of ``class, cx, cy, w, h`` in the detections' units.
    mAP averages per-class AP over classes that have ground truth; with no
    ground truth at all it is 0. Precision and recall are pooled over all
    detections at the first threshold.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 5) for k, v in ground_truth.items()}
    per_image = {k: [] for k in gts}
    for d in detections:
        if d.image_id not in per_image:
            raise DataError(f"detection references unknown image id {d.image_id!r}")
        per_image[d.image_id].append(d)

    tp_rows, score_rows, class_rows = [], [], []
    num_gt = {}
    for image_id in sorted(gts):
        gt = gts[image_id]
        for c in gt[:, 0].astype(np.int64):
            num_gt[int(c)] = num_gt.get(int(c), 0) + 1
        dets = per_image[image_id]
        if not dets:
            continue
        m = match(
            [d.box.as_array() for d in dets],
            [d.score for d in dets],
            [d.class_id for d in dets],
            gt[:, 1:],
            gt[:, 0],
            thresholds,
        )
        tp_rows.append(m.tp)
        score_rows.append(m.scores)
        class_rows.append(m.classes)

    tp = np.concatenate(tp_rows) if tp_rows else np.zeros((0, len(thresholds)), dtype=bool)
    scores = np.concatenate(score_rows) if score_rows else np.zeros(0)
    classes = np.concatenate(class_rows) if class_rows else np.zeros(0, dtype=np.int64)

    ap, curves = {}, {}
    for c in sorted(num_gt):
        sel = classes == c
        ap[c] = np.array([average_precision(tp[sel, t], scores[sel], num_gt[c]) for t in range(len(thresholds))])
        curves[c] = interpolated_precision(tp[sel, 0], scores[sel], num_gt[c])
    per_thr = np.array([np.mean([v[t] for v in ap.values()]) for t in range(len(thresholds))]) if ap else np.zeros(len(thresholds))
    n_tp = int(tp[:, 0].sum()) if len(tp) else 0
    precision, recall = precision_recall(n_tp, len(tp) - n_tp, sum(num_gt.values()))
    return EvalReport(thresholds, ap, float(per_thr[0]), float(per_thr.mean()), precision, recall, curves, num_gt)
