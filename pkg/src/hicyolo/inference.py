"""Batch inference, dataset evaluation and box overlays."""
import numpy as np

from . import tensor as T
from .boxes import CONF_EVAL, NMS_IOU, decode, nms
from .data import letterbox
from .metrics import evaluate

MAX_DET = 300


def prepare(img, size):
    """Letterbox an image to the model's square input when needed."""
    if img.height == size and img.width == size:
        return img, (1.0, 0, 0)
    return letterbox(img, size)


def detect(model, pixels, image_ids=None, conf_thresh=CONF_EVAL, iou_thresh=NMS_IOU, max_det=MAX_DET):
    """Run ``model`` in eval mode on a (N, 3, S, S) batch; returns one detection list per image."""
    pixels = np.asarray(pixels, dtype=np.float64)
    image_ids = image_ids or [str(i) for i in range(len(pixels))]
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            heads = model(pixels)
    finally:
        model.train(was_training)
    anchors = model.config.anchors
    out = []
    for n, image_id in enumerate(image_ids):
        dets = []
        for h, head in enumerate(heads):
            dets += decode(head.data[n], anchors.grid(h), anchors.strides[h], conf_thresh, image_id)
        out.append(nms(dets, iou_thresh, class_aware=True, max_det=max_det))
    return out


def evaluate_model(model, images, conf_thresh=CONF_EVAL, iou_thresh=NMS_IOU, batch_size=8):
    """mAP report of ``model`` on LabeledImages, in model-input pixel units."""
    size = model.config.input_size
    dets, gts = [], {}
    for start in range(0, len(images), batch_size):
        chunk = [prepare(img, size)[0] for img in images[start : start + batch_size]]
        ids = [img.id for img in chunk]
        for d in detect(model, np.stack([c.pixels for c in chunk]), ids, conf_thresh, iou_thresh):
            dets += d
        for img in chunk:
            lab = img.labels.copy()
            lab[:, 1:] *= size
            gts[img.id] = lab
    return evaluate(dets, gts)


PALETTE = np.array(
    [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0], [1.0, 1.0, 0.2], [1.0, 0.3, 1.0], [0.2, 1.0, 1.0]]
)


def draw_boxes(pixels, detections, thickness=1):
    """Copy of (3, H, W) ``pixels`` with a rectangle outline per detection.

    Edges sit on the pixels containing the box corners ``floor(cx -/+ w/2)``
    (clipped to the image), coloured by class.
    """
    out = np.array(pixels, dtype=np.float64, copy=True)
    _, h, w = out.shape
    for d in detections:
        x1, y1, x2, y2 = d.box.to_xyxy()
        c0, c1 = int(np.clip(np.floor(x1), 0, w - 1)), int(np.clip(np.floor(x2), 0, w - 1))
        r0, r1 = int(np.clip(np.floor(y1), 0, h - 1)), int(np.clip(np.floor(y2), 0, h - 1))
        color = PALETTE[d.class_id % len(PALETTE)][:, None]
        for t in range(thickness):
            out[:, min(r0 + t, r1), c0 : c1 + 1] = color
            out[:, max(r1 - t, r0), c0 : c1 + 1] = color
            out[:, r0 : r1 + 1, min(c0 + t, c1)] = color
            out[:, r0 : r1 + 1, max(c1 - t, c0)] = color
    return out
