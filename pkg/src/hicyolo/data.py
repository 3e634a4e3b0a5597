"""Dataset ingestion, augmentation and label statistics.

On-disk dataset layout (files paired by stem, iterated in sorted id order)::

    root/images/<id>.ppm | <id>.hict     pixels (binary P6, maxval 255, or raw tensor)
    root/labels/<id>.txt                 internal labels: ``class cx cy w h`` normalised
    root/annotations/<id>.txt            VisDrone labels (used when labels/ is absent)
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import decode_tensor, encode_tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".hict")
VISDRONE_CLASSES = (
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
)
HSV_GAINS = (0.4, 0.3, 0.5)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    labels: np.ndarray  # (n, 5): class, cx, cy, w, h normalised
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 5)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataError(f"image pixels must be (3, H, W), got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


# ---------------------------------------------------------------- image files


def _ppm_header(fh):
    """Parse a binary P6 header; returns (width, height, maxval) and leaves fh at the payload."""
    tokens = []
    if fh.read(2) != b"P6":
        raise DataError("not a binary P6 PPM file")
    while len(tokens) < 3:
        ch = fh.read(1)
        if not ch:
            raise DataError("truncated PPM header")
        if ch == b"#":
            fh.readline()
        elif ch.isspace():
            continue
        else:
            tok = ch
            while True:
                ch = fh.read(1)
                if not ch or ch.isspace():
                    break
                tok += ch
            tokens.append(int(tok))
    w, h, maxval = tokens
    if not 0 < maxval < 256:
        raise DataError(f"only 8-bit PPM is supported, maxval={maxval}")
    return w, h, maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h, maxval = _ppm_header(fh)
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: PPM payload truncated")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, pixels):
    """Write (3, H, W) floats in [0, 1] as 8-bit P6."""
    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(px.transpose(1, 2, 0).tobytes())


def read_image(path):
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if path.suffix.lower() == ".hict":
        arr = decode_tensor(path.read_bytes())
        if arr.shape[:2] != (1, 3):
            raise DataError(f"{path}: HICT image must be (1, 3, H, W), got {arr.shape}")
        return arr[0]
    raise DataError(f"{path}: unsupported image format (use .ppm or .hict)")


def write_image(path, pixels):
    path = Path(path)
    if path.suffix.lower() == ".hict":
        path.write_bytes(encode_tensor(np.asarray(pixels)[None]))
    else:
        write_ppm(path, pixels)


def _jpeg_size(fh):
    fh.read(2)
    while True:
        byte = fh.read(1)
        while byte and byte != b"\xff":
            byte = fh.read(1)
        while byte == b"\xff":
            byte = fh.read(1)
        if not byte:
            raise DataError("no SOF marker in JPEG")
        marker = byte[0]
        if 0xC0 <= marker <= 0xCF and marker not in (0xC4, 0xC8, 0xCC):
            _, _, h, w = struct.unpack(">HBHH", fh.read(7))
            return w, h
        (length,) = struct.unpack(">H", fh.read(2))
        fh.seek(length - 2, 1)


def image_size(path):
    """(width, height) read from the file header only (PPM, HICT, JPEG or PNG)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(24)
        fh.seek(0)
        if head[:2] == b"P6":
            w, h, _ = _ppm_header(fh)
            return w, h
        if head[:4] == b"HICT":
            dims = struct.unpack_from("<4I", head, 5)
            return dims[3], dims[2]
        if head[:2] == b"\xff\xd8":
            return _jpeg_size(fh)
        if head[:8] == b"\x89PNG\r\n\x1a\n":
            return struct.unpack(">II", head[16:24])
    raise DataError(f"{path}: cannot determine image size")


# ------------------------------------------------------------------ label files


def parse_visdrone(text, width, height, source="annotation"):
    """Parse VisDrone lines ``left,top,width,height,score,category,truncation,occlusion``.

    Categories 1..10 map to classes 0..9; 0 (ignored regions) and 11
    (others) are dropped. Boxes are clipped to the image; those with no area
    left are dropped. Returns ``(labels, n_dropped)``.
    """
    rows, dropped = [], 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip().rstrip(",")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 6 or len(parts) > 8:
            raise DataError(f"{source} line {lineno}: expected 8 comma-separated fields, got {len(parts)}")
        try:
            left, top, bw, bh = (float(v) for v in parts[:4])
            category = int(parts[5])
        except ValueError:
            raise DataError(f"{source} line {lineno}: non-numeric field in {raw!r}") from None
        if not 1 <= category <= 10:
            continue
        x1, y1 = max(left, 0.0), max(top, 0.0)
        x2, y2 = min(left + bw, float(width)), min(top + bh, float(height))
        if x2 <= x1 or y2 <= y1:
            dropped += 1
            continue
        rows.append((category - 1, (x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height))
    if dropped:
        log.warning("%s: dropped %d zero-area boxes after clipping", source, dropped)
    return np.array(rows, dtype=np.float64).reshape(-1, 5), dropped


def load_visdrone(image_path, annotation_path):
    pixels = read_image(image_path)
    text = Path(annotation_path).read_text(encoding="utf-8")
    labels, _ = parse_visdrone(text, pixels.shape[2], pixels.shape[1], str(annotation_path))
    return LabeledImage(pixels, labels, Path(image_path).stem)


def format_labels(labels):
    return "".join(f"{int(c)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n" for c, cx, cy, w, h in np.asarray(labels).reshape(-1, 5))


def parse_labels(text, source="labels"):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{source} line {lineno}: expected 'class cx cy w h', got {raw!r}")
        try:
            rows.append((int(parts[0]), *(float(v) for v in parts[1:])))
        except ValueError:
            raise DataError(f"{source} line {lineno}: non-numeric field in {raw!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


# -------------------------------------------------------------------- datasets


def _image_files(root):
    images = Path(root) / "images"
    if not images.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    return sorted(p for p in images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES + (".jpg", ".jpeg", ".png"))


def _label_source(root):
    root = Path(root)
    if (root / "labels").is_dir():
        return "internal", root / "labels"
    if (root / "annotations").is_dir():
        return "visdrone", root / "annotations"
    raise DataError(f"{root}: needs a labels/ or annotations/ directory")


def iter_label_sets(root):
    """Yield ``(id, labels)`` for every image without decoding pixels."""
    kind, label_dir = _label_source(root)
    for img in _image_files(root):
        path = label_dir / f"{img.stem}.txt"
        text = path.read_text(encoding="utf-8") if path.exists() else ""
        if kind == "internal":
            yield img.stem, parse_labels(text, str(path))
        else:
            w, h = image_size(img)
            yield img.stem, parse_visdrone(text, w, h, str(path))[0]


def load_dataset(root):
    """All decodable images of a dataset directory, sorted by id."""
    kind, label_dir = _label_source(root)
    out = []
    for img in _image_files(root):
        if img.suffix.lower() not in IMAGE_SUFFIXES:
            raise DataError(f"{img}: only .ppm and .hict images can be decoded")
        path = label_dir / f"{img.stem}.txt"
        if kind == "visdrone":
            out.append(load_visdrone(img, path) if path.exists() else LabeledImage(read_image(img), [], img.stem))
        else:
            text = path.read_text(encoding="utf-8") if path.exists() else ""
            out.append(LabeledImage(read_image(img), parse_labels(text, str(path)), img.stem))
    if not out:
        raise DataError(f"{root}: dataset has no images")
    return out


def save_dataset(root, images, fmt=".ppm"):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for img in images:
        write_image(root / "images" / f"{img.id}{fmt}", img.pixels)
        (root / "labels" / f"{img.id}.txt").write_text(format_labels(img.labels), encoding="utf-8")


# ---------------------------------------------------------------- augmentation


def center_crop(img, min_area_frac=0.2):
    """Crop the central (H//2, W//2) window and remap labels into it.

    A box survives when its centre lies inside the crop and at least
    ``min_area_frac`` of its area remains after clipping.
    """
    h, w = img.height, img.width
    if h < 2 or w < 2:
        raise DataError(f"center_crop needs H, W >= 2, got {h}x{w}")
    ch, cw = h // 2, w // 2
    top, left = (h - ch) // 2, (w - cw) // 2
    pixels = img.pixels[:, top : top + ch, left : left + cw].copy()
    rows = []
    for c, cx, cy, bw, bh in img.labels:
        px, py, pw, ph = cx * w, cy * h, bw * w, bh * h
        if not (left <= px <= left + cw and top <= py <= top + ch):
            continue
        x1, x2 = max(px - pw / 2, left), min(px + pw / 2, left + cw)
        y1, y2 = max(py - ph / 2, top), min(py + ph / 2, top + ch)
        if x2 <= x1 or y2 <= y1 or (x2 - x1) * (y2 - y1) < min_area_frac * pw * ph:
            continue
        rows.append((c, ((x1 + x2) / 2 - left) / cw, ((y1 + y2) / 2 - top) / ch, (x2 - x1) / cw, (y2 - y1) / ch))
    return LabeledImage(pixels, np.array(rows).reshape(-1, 5), img.id)


def rgb_to_hsv(rgb):
    """(3, ...) RGB in [0, 1] -> (3, ...) HSV with hue in [0, 1)."""
    r, g, b = rgb
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, s, maxc])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def hsv_jitter(img, gains=HSV_GAINS, seed=0):
    """Scale hue (mod 1), saturation and value by ``1 + U(-1, 1) * gain``; labels untouched."""
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != (3,) or (gains < 0).any() or (gains > 1).any():
        raise ValueError(f"HSV gains must be three values in [0, 1], got {gains.tolist()}")
    factors = 1.0 + np.random.default_rng(seed).uniform(-1.0, 1.0, 3) * gains
    if (factors == 1.0).all():
        return LabeledImage(img.pixels.copy(), img.labels.copy(), img.id)
    h, s, v = rgb_to_hsv(img.pixels)
    hsv = np.stack([(h * factors[0]) % 1.0, np.clip(s * factors[1], 0, 1), np.clip(v * factors[2], 0, 1)])
    return LabeledImage(np.clip(hsv_to_rgb(hsv), 0.0, 1.0), img.labels.copy(), img.id)


def letterbox(img, size, fill=114 / 255):
    """Nearest-neighbour resize so the long side is ``size``, centred on a square canvas.

    Returns ``(image, (scale, pad_x, pad_y))``; labels are remapped.
    """
    h, w = img.height, img.width
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    rows = np.minimum((np.arange(nh) / scale).astype(np.int64), h - 1)
    cols = np.minimum((np.arange(nw) / scale).astype(np.int64), w - 1)
    canvas = np.full((3, size, size), fill)
    py, px = (size - nh) // 2, (size - nw) // 2
    canvas[:, py : py + nh, px : px + nw] = img.pixels[:, rows][:, :, cols]
    lab = img.labels.copy()
    if len(lab):
        lab[:, 1] = (lab[:, 1] * nw + px) / size
        lab[:, 2] = (lab[:, 2] * nh + py) / size
        lab[:, 3] *= nw / size
        lab[:, 4] *= nh / size
    return LabeledImage(canvas, lab, img.id), (nw / w, px, py)


# ------------------------------------------------------------------ statistics


@dataclass
class DatasetStats:
    class_counts: dict
    area: dict  # mean, std, min, 25%, 50%, 75%, max of normalised w*h
    locations: np.ndarray = field(repr=False)  # 32x32 histogram of (cx, cy), [row=cy, col=cx]
    num_labels: int = 0
    num_images: int = 0

    def to_text(self, class_names=None):
        lines = [f"images {self.num_images}", f"labels {self.num_labels}", "", "instances per class"]
        for c, n in sorted(self.class_counts.items()):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"  {name:<16}{n:>8}")
        lines += ["", "normalised object area"]
        lines.append("  " + "".join(f"{k:>10}" for k in self.area))
        lines.append("  " + "".join(f"{v:>10.6f}" for v in self.area.values()))
        return "\n".join(lines) + "\n"


def quantile(sorted_values, q):
    """Linear interpolation between order statistics (position ``q * (n - 1)``)."""
    pos = q * (len(sorted_values) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    return sorted_values[lo] + (pos - lo) * (sorted_values[hi] - sorted_values[lo])


def compute_stats(label_sets, bins=32):
    """Summary of a dataset's labels; ``label_sets`` is an iterable of (n, 5) arrays.

    The std is the sample std (n - 1 denominator), reported as 0 for a single label.
    """
    label_sets = [np.asarray(l, dtype=np.float64).reshape(-1, 5) for l in label_sets]
    labels = np.concatenate(label_sets) if label_sets else np.zeros((0, 5))
    if len(labels) == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    areas = np.sort(labels[:, 3] * labels[:, 4])
    n = len(areas)
    mu = math.fsum(areas) / n
    std = math.sqrt(math.fsum((areas - mu) ** 2) / (n - 1)) if n > 1 else 0.0
    summary = {"mean": mu, "std": std, "min": float(areas[0])}
    for q, key in ((0.25, "25%"), (0.5, "50%"), (0.75, "75%")):
        summary[key] = float(quantile(areas, q))
    summary["max"] = float(areas[-1])
    classes, counts = np.unique(labels[:, 0].astype(np.int64), return_counts=True)
    hist, _, _ = np.histogram2d(labels[:, 2], labels[:, 1], bins=bins, range=[[0, 1], [0, 1]])
    return DatasetStats(dict(zip(classes.tolist(), counts.tolist())), summary, hist, n, len(label_sets))


# ------------------------------------------------------------------ synthetic


def make_synthetic(n, size=64, num_classes=2, seed=0, objects=(1, 3), side=(0.16, 0.4)):
    """Images of filled shapes on a noisy background; the shape is the class.

    Class 0 is a rectangle, 1 an ellipse, 2 a triangle, higher classes cycle.
    Pixels are multiples of 1/255 so PPM round trips are exact.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = []
    for idx in range(n):
        base = rng.uniform(0.1, 0.35, size=3)
        pixels = base[:, None, None] + rng.normal(0, 0.03, size=(3, size, size))
        boxes = []
        for _ in range(100):
            if len(boxes) >= rng.integers(objects[0], objects[1] + 1) and boxes:
                break
            bw, bh = rng.uniform(*side, size=2) * size
            cx, cy = rng.uniform(bw / 2 + 1, size - bw / 2 - 1), rng.uniform(bh / 2 + 1, size - bh / 2 - 1)
            if any(abs(cx - b[1]) < (bw + b[3]) / 2 + 1 and abs(cy - b[2]) < (bh + b[4]) / 2 + 1 for b in boxes):
                continue
            boxes.append((int(rng.integers(num_classes)), cx, cy, bw, bh))
        for c, cx, cy, bw, bh in boxes:
            u, v = (xx - cx) / (bw / 2), (yy - cy) / (bh / 2)
            kind = c % 3
            if kind == 0:
                mask = (np.abs(u) <= 1) & (np.abs(v) <= 1)
            elif kind == 1:
                mask = u**2 + v**2 <= 1
            else:
                mask = (v <= 1) & (v >= -1) & (np.abs(u) <= (v + 1) / 2)
            color = rng.uniform(0.6, 1.0, size=3)
            pixels[:, mask] = color[:, None]
        pixels = np.rint(np.clip(pixels, 0, 1) * 255) / 255
        labels = np.array([(c, cx / size, cy / size, bw / size, bh / size) for c, cx, cy, bw, bh in boxes])
        labels[:, 1:] = np.round(labels[:, 1:], 6)  # on the label-file grid, so files round-trip exactly
        out.append(LabeledImage(pixels, labels, f"synth_{idx:04d}"))
    return out
