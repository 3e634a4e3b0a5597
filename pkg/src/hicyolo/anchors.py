"""Anchor priors: the default 4x3 set, IoU k-means and the best-possible-recall gate."""
from dataclasses import dataclass, field

import numpy as np

# (w, h) pixel pairs per head at 640 input, smallest head first
DEFAULT_ANCHORS = (
    (2.9434, 4.0435, 3.8626, 8.5592, 6.8534, 5.9391),
    (10, 13, 16, 30, 33, 23),
    (30, 61, 62, 45, 59, 119),
    (116, 90, 156, 198, 373, 326),
)
HEAD_STRIDES = (4, 8, 16, 32)
GROUP_NAMES = ("tiny", "small", "medium", "large")
RECALL_GATE = 0.98


class AnchorSet:
    """Groups of three (w, h) pixel anchors, one group per prediction head.

    Groups are ordered by ascending mean area and bound to ascending strides.
    ``grid(i)`` gives head ``i``'s anchors in grid-cell units.
    """

    def __init__(self, pixels, strides=None):
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 3, 2)
        strides = tuple(HEAD_STRIDES[-len(px):] if strides is None else strides)
        if len(strides) != len(px):
            raise ValueError(f"{len(px)} anchor groups but {len(strides)} strides")
        if not (px > 0).all():
            raise ValueError("anchor widths and heights must be positive")
        areas = px.prod(axis=2).mean(axis=1)
        if np.any(np.diff(areas) < 0):
            raise ValueError(f"anchor groups must be sorted by ascending mean area, got {areas.round(2).tolist()}")
        if list(strides) != sorted(strides):
            raise ValueError(f"strides must ascend, got {strides}")
        self.pixels = px
        self.strides = strides

    @classmethod
    def default(cls, heads=4):
        rows = DEFAULT_ANCHORS[-heads:]
        return cls(rows, HEAD_STRIDES[-heads:])

    @classmethod
    def from_anchors(cls, wh, heads=4):
        """Group ``3 * heads`` anchors by ascending area, three per head."""
        wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
        if len(wh) != 3 * heads:
            raise ValueError(f"need {3 * heads} anchors for {heads} heads, got {len(wh)}")
        wh = wh[np.argsort(wh.prod(axis=1), kind="stable")]
        return cls(wh.reshape(heads, 3, 2), HEAD_STRIDES[-heads:])

    @property
    def num_heads(self):
        return len(self.pixels)

    def grid(self, i):
        return self.pixels[i] / self.strides[i]

    def flat(self):
        return self.pixels.reshape(-1, 2)

    def to_rows(self):
        return [" ".join(f"{v:g}" for v in g.reshape(-1)) for g in self.pixels]

    def __eq__(self, other):
        return isinstance(other, AnchorSet) and self.strides == other.strides and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"AnchorSet(strides={self.strides}, pixels={self.pixels.reshape(len(self.pixels), -1).tolist()})"


def wh_iou(a, b):
    """IoU of origin-aligned boxes: ``a`` (n, 2) against ``b`` (m, 2) -> (n, m)."""
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[None]
    inter = np.minimum(a, b).prod(axis=2)
    return inter / (a.prod(axis=2) + b.prod(axis=2) - inter)


def max_ratio(labels, anchors):
    """``max(w/wa, wa/w, h/ha, ha/h)`` for every (label, anchor) pair."""
    r = np.asarray(labels, dtype=np.float64)[:, None] / np.asarray(anchors, dtype=np.float64)[None]
    return np.maximum(r, 1.0 / r).max(axis=2)


def best_possible_recall(labels, anchors, ratio_thresh=4.0):
    """Fraction of labels whose best anchor has max side ratio below ``ratio_thresh``."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(anchors) == 0:
        raise ValueError("best_possible_recall needs at least one anchor")
    if len(labels) == 0:
        return 0.0
    return float((max_ratio(labels, anchors).min(axis=1) < ratio_thresh).mean())


@dataclass
class KMeansResult:
    anchors: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0


def _weighted_cost(points, weights, center):
    return float((weights * (1.0 - wh_iou(points, center[None])[:, 0])).sum())


def _seed_plusplus(points, weights, k, rng):
    cum = np.cumsum(weights)
    first = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    centers = [points[first]]
    dist = 1.0 - wh_iou(points, points[first][None])[:, 0]
    for _ in range(1, k):
        cum = np.cumsum(weights * dist**2)
        nxt = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        nxt = min(nxt, len(points) - 1)
        centers.append(points[nxt])
        dist = np.minimum(dist, 1.0 - wh_iou(points, points[nxt][None])[:, 0])
    return np.array(centers)


def kmeans_fit(labels, k, seed=0, max_iter=300):
    """Lloyd iterations under ``d = 1 - IoU`` with k-means++ seeding.

    Duplicate labels are merged into weights, so repeating every label n
    times gives the same result. A cluster's centre moves to its weighted
    mean only when that lowers the cluster's cost, which keeps the objective
    (mean distance to the assigned centre) non-increasing.
    """
    wh = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if (wh <= 0).any():
        raise ValueError("label widths and heights must be positive")
    points, counts = np.unique(wh, axis=0, return_counts=True)
    if len(points) < k:
        raise ValueError(f"k-means needs at least k={k} distinct labels, got {len(points)}")
    weights = counts.astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = _seed_plusplus(points, weights, k, rng)

    def assign(c):
        d = 1.0 - wh_iou(points, c)
        return d.argmin(axis=1), d.min(axis=1)

    labels_of, dist = assign(centers)
    history = [float((weights * dist).sum() / weights.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = centers.copy()
        for j in range(k):
            members = labels_of == j
            if not members.any():
                continue
            w = weights[members]
            cand = (points[members] * w[:, None]).sum(axis=0) / w.sum()
            if _weighted_cost(points[members], w, cand) <= _weighted_cost(points[members], w, centers[j]):
                new[j] = cand
        new_labels, dist = assign(new)
        history.append(float((weights * dist).sum() / weights.sum()))
        done = np.array_equal(new_labels, labels_of) and np.array_equal(new, centers)
        centers, labels_of = new, new_labels
        if done:
            break
    order = np.argsort(centers.prod(axis=1), kind="stable")
    return KMeansResult(centers[order], history, it)


def kmeans_anchors(labels, k, seed=0, max_iter=300):
    """k anchors (w, h) sorted by ascending area, in the labels' units."""
    return kmeans_fit(labels, k, seed, max_iter).anchors


@dataclass
class AnchorReport:
    bpr_before: float
    bpr_after: float
    regenerated: bool

    def __str__(self):
        action = "regenerated by k-means" if self.regenerated else "kept defaults"
        return f"best possible recall {self.bpr_before:.4f} -> {self.bpr_after:.4f} ({action})"


def check_or_regenerate(labels, default_anchors, gate=RECALL_GATE, ratio_thresh=4.0, seed=0):
    """Keep ``default_anchors`` when their BPR on ``labels`` (pixel w, h) reaches ``gate``,
    otherwise fit a fresh set of the same size with k-means."""
    before = best_possible_recall(labels, default_anchors.flat(), ratio_thresh)
    if before >= gate:
        return default_anchors, AnchorReport(before, before, False)
    heads = default_anchors.num_heads
    new = AnchorSet.from_anchors(kmeans_anchors(labels, 3 * heads, seed=seed), heads)
    after = best_possible_recall(labels, new.flat(), ratio_thresh)
    return new, AnchorReport(before, after, True)
