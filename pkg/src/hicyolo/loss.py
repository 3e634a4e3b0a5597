"""Ground-truth to anchor assignment and the weighted objectness/box/class loss."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import box_iou, ciou_loss_tensor
from .errors import DataError

# cell offsets tried for every matched gt: centre, then left, up, right, down
_OFFSETS = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, -0.5]])


@dataclass(frozen=True)
class LossWeights:
    alpha_obj: float = 0.5
    beta_box: float = 0.05
    gamma_cls: float = 0.25

    def __post_init__(self):
        if min(self.alpha_obj, self.beta_box, self.gamma_cls) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class AssignedTarget:
    head: int
    image: int
    cell: tuple  # (row i, col j)
    anchor: int
    box: tuple  # gt (cx, cy, w, h) in grid units of the head
    class_id: int


@dataclass
class Assignment:
    """Struct-of-arrays form of the assigned targets (one row per entry)."""

    head: np.ndarray
    image: np.ndarray
    anchor: np.ndarray
    row: np.ndarray
    col: np.ndarray
    box: np.ndarray  # (n, 4) grid units
    cls: np.ndarray

    def __len__(self):
        return len(self.head)

    def select(self, mask):
        return Assignment(*(getattr(self, f)[mask] for f in ("head", "image", "anchor", "row", "col", "box", "cls")))

    def as_list(self):
        return [
            AssignedTarget(int(h), int(b), (int(r), int(c)), int(a), tuple(map(float, box)), int(k))
            for h, b, a, r, c, box, k in zip(self.head, self.image, self.anchor, self.row, self.col, self.box, self.cls)
        ]


def _validate_targets(targets):
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
    xy, wh = t[:, 2:4], t[:, 4:6]
    bad = ~(((xy >= 0) & (xy <= 1)).all(axis=1) & ((wh > 0) & (wh <= 1)).all(axis=1))
    if bad.any():
        raise DataError(f"target row {int(np.argmax(bad))} is outside the normalised (0, 1] range: {t[bad][0].tolist()}")
    return t


def assign(targets, anchors, grid_sizes, ratio_thresh=4.0):
    """Match ground truth to anchors and grid cells on every head.

    ``targets`` rows are ``(image, class, cx, cy, w, h)`` normalised. A gt
    matches anchor ``a`` of a head when ``max(w/wa, wa/w, h/ha, ha/h) < ratio_thresh``
    (both in grid units). Each match claims the containing cell plus the
    horizontal and vertical neighbour nearest the box centre when that
    neighbour lies inside the grid.
    """
    t = _validate_targets(targets)
    parts = []
    for h, (gh, gw) in enumerate(grid_sizes):
        anc = anchors.grid(h)
        gain = np.array([gw, gh], dtype=np.float64)
        gxy = t[:, 2:4] * gain
        gwh = t[:, 4:6] * gain
        r = gwh[None] / anc[:, None]
        a_idx, g_idx = np.nonzero(np.maximum(r, 1.0 / r).max(axis=2) < ratio_thresh)
        if a_idx.size == 0:
            continue
        xy = gxy[g_idx]
        inv = gain - xy
        frac, frac_inv = xy % 1.0, inv % 1.0
        use = np.stack(
            [
                np.ones(len(xy), dtype=bool),
                (frac[:, 0] < 0.5) & (xy[:, 0] > 1.0),
                (frac[:, 1] < 0.5) & (xy[:, 1] > 1.0),
                (frac_inv[:, 0] < 0.5) & (inv[:, 0] > 1.0),
                (frac_inv[:, 1] < 0.5) & (inv[:, 1] > 1.0),
            ]
        )
        for o, off in enumerate(_OFFSETS):
            m = use[o]
            if not m.any():
                continue
            cell = np.floor(xy[m] - off).astype(np.int64)
            col = np.clip(cell[:, 0], 0, gw - 1)
            row = np.clip(cell[:, 1], 0, gh - 1)
            gi = g_idx[m]
            parts.append(
                (
                    np.full(m.sum(), h),
                    t[gi, 0].astype(np.int64),
                    a_idx[m],
                    row,
                    col,
                    np.concatenate([gxy[gi], gwh[gi]], axis=1),
                    t[gi, 1].astype(np.int64),
                )
            )
    if not parts:
        e = np.zeros(0, dtype=np.int64)
        return Assignment(e, e, e, e, e, np.zeros((0, 4)), e)
    cols = list(zip(*parts))
    return Assignment(*(np.concatenate(c) for c in cols))


@dataclass
class LossResult:
    total: T.Tensor
    obj: float
    box: float
    cls: float

    def components(self):
        return {"obj": self.obj, "box": self.box, "cls": self.cls}


def compute_loss(
    raw_heads,
    targets,
    anchors,
    num_classes,
    weights=LossWeights(),
    balance=None,
    obj_target="binary",
    ratio_thresh=4.0,
):
    """``alpha * obj + beta * box + gamma * cls`` over all heads.

    Each component sums per-head means: objectness BCE over every anchor
    cell (scaled by ``balance[h]``), CIoU over the head's assigned entries,
    and one-hot class BCE over the same entries. ``obj_target`` is
    ``"binary"`` (1 at assigned cells) or ``"iou"`` (detached CIoU-free IoU,
    clipped at 0).
    """
    if obj_target not in ("binary", "iou"):
        raise ValueError(f"obj_target must be 'binary' or 'iou', got {obj_target!r}")
    balance = (1.0,) * len(raw_heads) if balance is None else tuple(balance)
    no = 5 + num_classes
    grid_sizes = [tuple(h.shape[2:]) for h in raw_heads]
    a = assign(targets, anchors, grid_sizes, ratio_thresh)

    lobj = lbox = lcls = T.Tensor(0.0)
    for h, head in enumerate(raw_heads):
        n, c, gh, gw = head.shape
        if c != 3 * no:
            raise ValueError(f"head {h} has {c} channels, expected {3 * no}")
        p = head.reshape(n, 3, no, gh, gw)
        tobj = np.zeros((n, 3, gh, gw))
        sel = a.select(a.head == h)
        if len(sel):
            ps = p[sel.image, sel.anchor, :, sel.row, sel.col]
            anc = anchors.grid(h)[sel.anchor]
            pxy = T.sigmoid(ps[:, 0:2]) * 2.0 - 0.5
            pwh = (T.sigmoid(ps[:, 2:4]) * 2.0) ** 2 * anc
            pbox = T.concat([pxy, pwh], axis=1)
            tbox = sel.box.copy()
            tbox[:, :2] -= np.stack([sel.col, sel.row], axis=1)
            lbox = lbox + T.mean(ciou_loss_tensor(pbox, tbox))
            if obj_target == "iou":
                overlap = np.diag(box_iou(pbox.data, tbox)) if len(sel) else np.zeros(0)
                tobj[sel.image, sel.anchor, sel.row, sel.col] = np.clip(overlap, 0.0, None)
            else:
                tobj[sel.image, sel.anchor, sel.row, sel.col] = 1.0
            onehot = np.zeros((len(sel), num_classes))
            onehot[np.arange(len(sel)), sel.cls] = 1.0
            lcls = lcls + T.mean(T.bce_with_logits(ps[:, 5:], onehot))
        lobj = lobj + T.mean(T.bce_with_logits(p[:, :, 4], tobj)) * balance[h]

    total = lobj * weights.alpha_obj + lbox * weights.beta_box + lcls * weights.gamma_cls
    return LossResult(total, float(lobj.data), float(lbox.data), float(lcls.data))
