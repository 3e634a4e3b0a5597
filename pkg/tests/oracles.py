"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops over scalars and the math
module, sharing no code with the package beyond plain data types.
"""
import itertools
import math

import numpy as np


# ------------------------------------------------------------------ tensors


def conv2d(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for ni in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += w[o, ci, a, bb] * xp[ni, ci, i * stride + a, j * stride + bb]
                    out[ni, o, i, j] = acc
    return out


def maxpool2d(x, k, stride, pad):
    """Returns (out, argmax flat index into the unpadded plane); ties keep the first in row-major order."""
    n, c, h, w = x.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, where = -math.inf, -1
                    for a in range(k):
                        for b in range(k):
                            r, s = i * stride + a - pad, j * stride + b - pad
                            if 0 <= r < h and 0 <= s < w and x[ni, ci, r, s] > best:
                                best, where = x[ni, ci, r, s], r * w + s
                    out[ni, ci, i, j] = best
                    arg[ni, ci, i, j] = where
    return out, arg


def involution(x, kernel, k, groups):
    """Direct per-pixel sum: Y[c,i,j] = sum_{a,b} H[g(c)*K*K + a*K + b, i, j] * X[c, i+a-r, j+b-r]."""
    n, c, h, w = x.shape
    r = k // 2
    per_group = c // groups
    y = np.zeros_like(x)
    for ni in range(n):
        for ch in range(c):
            g = ch // per_group
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - r, j + b - r
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kernel[ni, g * k * k + a * k + b, i, j] * x[ni, ch, ii, jj]
                    y[ni, ch, i, j] = acc
    return y


# -------------------------------------------------------------------- boxes


def iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def ciou_loss(p, g):
    i = iou(p, g)
    cw = max(p[0] + p[2] / 2, g[0] + g[2] / 2) - min(p[0] - p[2] / 2, g[0] - g[2] / 2)
    ch = max(p[1] + p[3] / 2, g[1] + g[3] / 2) - min(p[1] - p[3] / 2, g[1] - g[3] / 2)
    rho2 = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2
    v = 4 / math.pi**2 * (math.atan(g[2] / g[3]) - math.atan(p[2] / p[3])) ** 2
    alpha = v / (1 - i + v) if (1 - i + v) > 0 else 0.0
    return 1 - i + rho2 / (cw * cw + ch * ch) + alpha * v


def sigmoid(v):
    return 1 / (1 + math.exp(-v)) if v >= 0 else math.exp(v) / (1 + math.exp(v))


def decode(raw, anchors, stride, conf):
    """raw (3*(5+nc), H, W) -> list of (a, i, j, cx, cy, w, h, score, cls)."""
    c, h, w = raw.shape
    no = c // 3
    out = []
    for a in range(3):
        for i in range(h):
            for j in range(w):
                v = [sigmoid(float(raw[a * no + t, i, j])) for t in range(no)]
                cls_scores = v[5:]
                best = max(range(len(cls_scores)), key=lambda t: (cls_scores[t], -t))
                score = v[4] * cls_scores[best]
                if score >= conf:
                    cx = (2 * v[0] - 0.5 + j) * stride
                    cy = (2 * v[1] - 0.5 + i) * stride
                    bw = (2 * v[2]) ** 2 * anchors[a][0] * stride
                    bh = (2 * v[3]) ** 2 * anchors[a][1] * stride
                    out.append((a, i, j, cx, cy, bw, bh, score, best))
    return out


def nms(items, thr, class_aware=True):
    """items: list of (score, cls, (cx, cy, w, h)); returns kept items in selection order."""
    order = sorted(items, key=lambda d: (-d[0], d[1], d[2][0], d[2][1]))
    kept = []
    for cand in order:
        ok = True
        for k in kept:
            if (not class_aware or k[1] == cand[1]) and iou(k[2], cand[2]) > thr:
                ok = False
                break
        if ok:
            kept.append(cand)
    return kept


# ----------------------------------------------------------------- assignment


def assign(targets, anchor_grids, grid_sizes, ratio=4.0):
    """List of (head, image, anchor, row, col, cls) tuples, from explicit case analysis."""
    return [e[:6] for e in _assign_geo(targets, anchor_grids, grid_sizes, ratio)]


def _assign_geo(targets, anchor_grids, grid_sizes, ratio=4.0):
    out = []
    for h, (gh, gw) in enumerate(grid_sizes):
        for img, cls, cx, cy, w, hh in targets:
            gx, gy, bw, bh = cx * gw, cy * gh, w * gw, hh * gh
            for a, (aw, ah) in enumerate(anchor_grids[h]):
                worst = max(bw / aw, aw / bw, bh / ah, ah / bh)
                if not worst < ratio:
                    continue
                col, row = int(math.floor(gx)), int(math.floor(gy))
                cells = [(min(row, gh - 1), min(col, gw - 1))]
                fx, fy = gx - math.floor(gx), gy - math.floor(gy)
                if fx < 0.5 and gx > 1:
                    cells.append((min(row, gh - 1), col - 1))
                if fy < 0.5 and gy > 1:
                    cells.append((row - 1, min(col, gw - 1)))
                ix, iy = gw - gx, gh - gy
                if ix - math.floor(ix) < 0.5 and ix > 1:
                    cells.append((min(row, gh - 1), col + 1))
                if iy - math.floor(iy) < 0.5 and iy > 1:
                    cells.append((row + 1, min(col, gw - 1)))
                for r, c in cells:
                    out.append((h, int(img), a, r, c, int(cls), (gx, gy, bw, bh)))
    return out


def bce(logit, target):
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def loss(heads, targets, anchor_grids, nc, weights=(0.5, 0.05, 0.25)):
    """Composite loss from scalar loops: returns (total, obj, box, cls)."""
    no = 5 + nc
    entries = _assign_geo(targets, anchor_grids, [(h.shape[2], h.shape[3]) for h in heads])
    lobj = lbox = lcls = 0.0
    for hd, head in enumerate(heads):
        n, _, gh, gw = head.shape
        positive = set()
        box_terms, cls_terms = [], []
        for e in entries:
            if e[0] != hd:
                continue
            _, img, a, r, c, k, (gx, gy, bw, bh) = e
            v = [float(head[img, a * no + t, r, c]) for t in range(no)]
            px = 2 * sigmoid(v[0]) - 0.5
            py = 2 * sigmoid(v[1]) - 0.5
            pw = (2 * sigmoid(v[2])) ** 2 * anchor_grids[hd][a][0]
            ph = (2 * sigmoid(v[3])) ** 2 * anchor_grids[hd][a][1]
            box_terms.append(ciou_loss((px, py, pw, ph), (gx - c, gy - r, bw, bh)))
            cls_terms += [bce(v[5 + t], 1.0 if t == k else 0.0) for t in range(nc)]
            positive.add((img, a, r, c))
        obj_terms = [
            bce(float(head[img, a * no + 4, r, c]), 1.0 if (img, a, r, c) in positive else 0.0)
            for img in range(n)
            for a in range(3)
            for r in range(gh)
            for c in range(gw)
        ]
        lobj += math.fsum(obj_terms) / len(obj_terms)
        if box_terms:
            lbox += math.fsum(box_terms) / len(box_terms)
            lcls += math.fsum(cls_terms) / len(cls_terms)
    al, be, ga = weights
    return al * lobj + be * lbox + ga * lcls, lobj, lbox, lcls


# ------------------------------------------------------------------ metrics


def greedy_match(dets, gts, thr):
    """dets: list of (score, cls, box) already score-sorted; gts: list of (cls, box). Returns TP flags."""
    claimed = set()
    flags = []
    for _, c, box in dets:
        best, best_iou = None, -1.0
        for gi, (gc, gbox) in enumerate(gts):
            if gc != c or gi in claimed:
                continue
            v = iou(box, gbox)
            if v >= thr and v > best_iou:
                best, best_iou = gi, v
        if best is None:
            flags.append(False)
        else:
            claimed.add(best)
            flags.append(True)
    return flags


def enumerate_match(dets, gts, thr):
    """Lexicographically best assignment over all injective partial matchings.

    The greedy rule is the lexicographic maximum of, per detection in score
    order, (IoU of its match or -1, -gt index); enumerating every matching
    makes that explicit without reproducing the greedy loop.
    """
    nd, ng = len(dets), len(gts)
    best_key, best_flags = None, None
    options = []
    for d in range(nd):
        opts = [None] + [g for g in range(ng) if gts[g][0] == dets[d][1] and iou(dets[d][2], gts[g][1]) >= thr]
        options.append(opts)
    for choice in itertools.product(*options):
        used = [g for g in choice if g is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(
            (iou(dets[d][2], gts[g][1]), -g) if g is not None else (-1.0, 0) for d, g in enumerate(choice)
        )
        if best_key is None or key > best_key:
            best_key, best_flags = key, [g is not None for g in choice]
    return best_flags if best_flags is not None else []


def ap_101(flags_scores, total_gt):
    """101-point interpolated AP by brute force: for each recall level the best precision at any rank reaching it."""
    ranked = sorted(range(len(flags_scores)), key=lambda i: (-flags_scores[i][1], i))
    points = []
    tp = fp = 0
    for i in ranked:
        if flags_scores[i][0]:
            tp += 1
        else:
            fp += 1
        points.append((tp / total_gt, tp / (tp + fp)))
    total = 0.0
    for r in range(101):
        level = r / 100
        cands = [p for rc, p in points if rc >= level]
        total += max(cands) if cands else 0.0
    return total / 101


def ap_exact_area(flags_scores, total_gt):
    """Area under the monotone precision envelope as a step function of recall."""
    ranked = sorted(range(len(flags_scores)), key=lambda i: (-flags_scores[i][1], i))
    tp = fp = 0
    pts = []
    for i in ranked:
        tp += flags_scores[i][0]
        fp += not flags_scores[i][0]
        pts.append((tp / total_gt, tp / (tp + fp)))
    area, prev = 0.0, 0.0
    for idx, (rc, _) in enumerate(pts):
        env = max(p for _, p in pts[idx:])
        area += (rc - prev) * env
        prev = rc
    return area


def evaluate(dets, gts, thresholds):
    """Reference evaluator.

    dets: list of (image_id, cls, score, box); gts: dict image_id -> list of (cls, box).
    Returns (per-class AP dict of lists, mAP@first threshold, mean mAP over thresholds).
    """
    classes = sorted({c for v in gts.values() for c, _ in v})
    ap = {c: [] for c in classes}
    for thr in thresholds:
        per_class = {c: [] for c in classes}
        for image_id in sorted(gts):
            mine = [(i, d) for i, d in enumerate(dets) if d[0] == image_id]
            mine.sort(key=lambda t: (-t[1][2], t[0]))
            ordered = [(d[2], d[1], d[3]) for _, d in mine]
            flags = greedy_match(ordered, gts[image_id], thr)
            for (score, c, _), f in zip(ordered, flags):
                if c in per_class:
                    per_class[c].append((f, score))
        for c in classes:
            n_gt = sum(1 for v in gts.values() for gc, _ in v if gc == c)
            ap[c].append(ap_101(per_class[c], n_gt))
    if not classes:
        return ap, 0.0, 0.0
    maps = [sum(ap[c][t] for c in classes) / len(classes) for t in range(len(thresholds))]
    return ap, maps[0], sum(maps) / len(maps)


# -------------------------------------------------------------------- anchors


def bpr(labels, anchors, thr=4.0):
    hit = 0
    for w, h in labels:
        best = min(max(w / aw, aw / w, h / ah, ah / h) for aw, ah in anchors)
        hit += best < thr
    return hit / len(labels)


# ---------------------------------------------------------------------- stats


def scalar_stats(areas):
    """mean, sample std, min, linear quartiles, max using only the stdlib."""
    xs = sorted(areas)
    n = len(xs)
    mean = math.fsum(xs) / n
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1)) if n > 1 else 0.0

    def q(p):
        pos = p * (n - 1)
        lo = int(pos)
        hi = lo + 1 if lo + 1 < n else lo
        return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])

    return {"mean": mean, "std": std, "min": xs[0], "25%": q(0.25), "50%": q(0.5), "75%": q(0.75), "max": xs[-1]}


def crop_oracle(labels, h, w):
    """Per-box geometry of the half-size centre crop."""
    ch, cw = h // 2, w // 2
    top, left = (h - ch) // 2, (w - cw) // 2
    out = []
    for c, cx, cy, bw, bh in labels:
        px, py, pw, ph = cx * w, cy * h, bw * w, bh * h
        inside = left <= px <= left + cw and top <= py <= top + ch
        if not inside:
            continue
        x1, x2 = max(px - pw / 2, left), min(px + pw / 2, left + cw)
        y1, y2 = max(py - ph / 2, top), min(py + ph / 2, top + ch)
        if x2 <= x1 or y2 <= y1:
            continue
        if (x2 - x1) * (y2 - y1) < 0.2 * pw * ph:
            continue
        out.append((c, ((x1 + x2) / 2 - left) / cw, ((y1 + y2) / 2 - top) / ch, (x2 - x1) / cw, (y2 - y1) / ch))
    return out


def yolov5_params(width, depth, nc, na=3):
    """Closed-form parameter total of the three-head YOLOv5 (v6.0) layout."""

    def ch(c):
        return max(int(math.ceil(c * width / 8) * 8), 8)

    def n(k):
        return max(round(k * depth), 1)

    def conv(c1, c2, k=1):
        return c1 * c2 * k * k + 2 * c2

    def c3(c1, c2, k):
        h = c2 // 2
        return conv(c1, h) * 2 + conv(2 * h, c2) + k * (conv(h, h) + conv(h, h, 3))

    def sppf(c1, c2):
        return conv(c1, c1 // 2) + conv(2 * c1, c2)

    c64, c128, c256, c512, c1024 = (ch(c) for c in (64, 128, 256, 512, 1024))
    backbone = (
        conv(3, c64, 6) + conv(c64, c128, 3) + c3(c128, c128, n(3)) + conv(c128, c256, 3) + c3(c256, c256, n(6))
        + conv(c256, c512, 3) + c3(c512, c512, n(9)) + conv(c512, c1024, 3) + c3(c1024, c1024, n(3))
        + sppf(c1024, c1024)
    )
    neck = (
        conv(c1024, c512) + c3(2 * c512, c512, n(3)) + conv(c512, c256) + c3(2 * c256, c256, n(3))
        + conv(c256, c256, 3) + c3(2 * c256, c512, n(3)) + conv(c512, c512, 3) + c3(2 * c512, c1024, n(3))
    )
    no = na * (5 + nc)
    heads = sum(c * no + no for c in (c256, c512, c1024))
    return backbone + neck + heads
