"""Box geometry, head decoding and non-maximum suppression.

Boxes are center-format ``(cx, cy, w, h)``; array helpers take ``(n, 4)``.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError

CONF_EVAL = 0.001
CONF_DEMO = 0.25
NMS_IOU = 0.45


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be >= 0, got {self.w}, {self.h}")

    def to_xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int
    image_id: str = ""


def xywh2xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def box_iou(a, b):
    """Pairwise IoU between (n, 4) and (m, 4) center-format boxes -> (n, m)."""
    a = xywh2xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = xywh2xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=1)
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b):
    """Intersection over union of two Boxes; 0 when both have zero area."""
    return float(box_iou(a.as_array(), b.as_array())[0, 0])


_EPS = 1e-9


def ciou_loss_tensor(pred, gt):
    """Complete-IoU loss per row: ``1 - IoU + rho^2/c^2 + alpha*v``.

    ``pred`` is a Tensor (M, 4) and ``gt`` a constant (M, 4) array, both
    center format in the same units. ``alpha`` is not detached, so the
    gradient is that of the loss as written.
    """
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    px, py, pw, ph = (pred[:, i] for i in range(4))
    gx, gy, gw, gh = (gt[:, i] for i in range(4))
    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    gx1, gx2, gy1, gy2 = gx - gw / 2, gx + gw / 2, gy - gh / 2, gy + gh / 2

    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou_ = inter / T.maximum(union, _EPS)

    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = T.maximum(cw * cw + ch * ch, _EPS)
    rho2 = (px - gx) ** 2 + (py - gy) ** 2

    v = (4.0 / math.pi**2) * (np.arctan(gw / np.maximum(gh, _EPS)) - T.atan(pw / T.maximum(ph, _EPS))) ** 2
    alpha = v / T.maximum((1.0 - iou_) + v, _EPS)
    return 1.0 - iou_ + rho2 / c2 + alpha * v


def ciou_loss(pred, gt):
    """CIoU loss of one Box pair and its gradient w.r.t. ``(cx, cy, w, h)`` of ``pred``."""
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError("ground-truth box must have positive area")
    p = T.Tensor(pred.as_array()[None], requires_grad=True)
    loss = ciou_loss_tensor(p, gt.as_array()[None])
    loss.sum().backward()
    return float(loss.data[0]), p.grad[0].copy()


def _head_layout(raw):
    raw = np.asarray(raw.data if isinstance(raw, T.Tensor) else raw, dtype=np.float64)
    if raw.ndim == 4:
        if raw.shape[0] != 1:
            raise ShapeError(f"decode takes one image at a time, got batch of {raw.shape[0]}")
        raw = raw[0]
    if raw.ndim != 3:
        raise ShapeError(f"decode expects a (C, H, W) head map, got shape {raw.shape}")
    c, h, w = raw.shape
    if c % 3 or c // 3 < 6:
        raise ShapeError(f"head channels C={c} is not 3*(5+nc) for any nc >= 1")
    return raw.reshape(3, c // 3, h, w)


def decode(raw_head, anchors, stride, conf_thresh=CONF_EVAL, image_id=""):
    """Turn one raw head map into pixel-space Detections.

    ``anchors`` are three (w, h) pairs in grid units of this head. Emission
    order is anchor, row, column.
    """
    p = _head_layout(raw_head)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(3, 2)
    s = T._sigmoid(p)
    _, _, h, w = p.shape
    gy, gx = np.mgrid[0:h, 0:w]
    bx = (2.0 * s[:, 0] - 0.5 + gx) * stride
    by = (2.0 * s[:, 1] - 0.5 + gy) * stride
    bw = (2.0 * s[:, 2]) ** 2 * anchors[:, 0, None, None] * stride
    bh = (2.0 * s[:, 3]) ** 2 * anchors[:, 1, None, None] * stride
    cls = s[:, 5:]
    best = cls.argmax(axis=1)
    score = s[:, 4] * cls.max(axis=1)
    out = []
    for a, i, j in zip(*np.nonzero(score >= conf_thresh)):
        box = Box(float(bx[a, i, j]), float(by[a, i, j]), float(bw[a, i, j]), float(bh[a, i, j]))
        out.append(Detection(box, float(score[a, i, j]), int(best[a, i, j]), image_id))
    return out


def _logit(p):
    return math.log(p / (1.0 - p))


def encode(box, anchor, stride, cell):
    """Inverse of ``decode`` for one box: the four box logits at ``cell = (col, row)``."""
    aw, ah = anchor
    col, row = cell
    sx = (box.cx / stride - col + 0.5) / 2.0
    sy = (box.cy / stride - row + 0.5) / 2.0
    sw = math.sqrt(box.w / (aw * stride)) / 2.0
    sh = math.sqrt(box.h / (ah * stride)) / 2.0
    return np.array([_logit(sx), _logit(sy), _logit(sw), _logit(sh)])


def _nms_key(d):
    return (-d.score, d.class_id, d.box.cx, d.box.cy)


def nms(dets, iou_thresh=NMS_IOU, class_aware=True, max_det=None):
    """Greedy suppression in (score desc, class asc, cx asc, cy asc) order.

    A candidate is dropped when its IoU with an already kept detection
    (of the same class when ``class_aware``) exceeds ``iou_thresh``.
    """
    order = sorted(dets, key=_nms_key)
    if not order:
        return []
    boxes = np.array([d.box.as_array() for d in order])
    classes = np.array([d.class_id for d in order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        if max_det is not None and len(keep) >= max_det:
            break
        over = box_iou(boxes[i], boxes[i + 1 :])[0] > iou_thresh
        if class_aware:
            over &= classes[i + 1 :] == classes[i]
        suppressed[i + 1 :] |= over
    return keep


def format_detection(d):
    b = d.box
    return f"{d.image_id} {d.class_id} {d.score:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"


def parse_detections(lines):
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DataError(f"detection line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            cid, score, cx, cy, w, h = int(parts[1]), *map(float, parts[2:])
        except ValueError:
            raise DataError(f"detection line {lineno}: non-numeric field") from None
        out.append(Detection(Box(cx, cy, w, h), score, cid, parts[0]))
    return out
