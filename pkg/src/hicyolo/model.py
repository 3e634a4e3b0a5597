"""Network assembly, parameter accounting and checkpoint I/O.

Layer schedule (widths scaled by ``width_multiple`` and rounded up to a
multiple of 8, C3 repeats scaled by ``depth_multiple`` and rounded up)::

    backbone  stem Conv(64,6,2) conv1 Conv(128,3,2) c3_1 C3(128,3)
              conv2 Conv(256,3,2) c3_2 C3(256,6) conv3 Conv(512,3,2) c3_3 C3(512,9)
              conv4 Conv(1024,3,2) c3_4 C3(1024,3) sppf SPPF(1024,5) [cbam CBAM]
    neck      [involution] lat5 Conv(512,1) up+cat(c3_3) up4 C3(512,3)
              lat4 Conv(256,1) up+cat(c3_2) up3 C3(256,3)
              [lat3 Conv(128,1) up+cat(c3_1) up2 C3(128,3)            -> P2 head
               down2 Conv(128,3,2) cat(lat3) pan3 C3(256,3)]          -> P3 head
              down3 Conv(256,3,2) cat(lat4) pan4 C3(512,3)            -> P4 head
              down4 Conv(512,3,2) cat(lat5) pan5 C3(1024,3)           -> P5 head
    heads     1x1 Conv(3 * (5 + num_classes)) per level, stride 4 first

Bracketed parts depend on ``heads``/``use_cbam``/``use_involution``.
"""
import hashlib
import math
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import nn
from . import tensor as T
from .anchors import GROUP_NAMES, AnchorSet
from .errors import ConfigError, ConfigHashError, FormatError, MagicError, ShapeError, TruncatedError, VersionError


@dataclass
class ModelConfig:
    depth_multiple: float = 0.33
    width_multiple: float = 0.50
    num_classes: int = 10
    input_size: int = 640
    heads: int = 4
    use_cbam: bool = True
    use_involution: bool = True
    involution_k: int = 3
    involution_groups: int = 4
    involution_reduction: int = 4
    cbam_reduction: int = 16
    anchors: AnchorSet = field(default=None)

    def __post_init__(self):
        if self.anchors is None:
            self.anchors = AnchorSet.default(self.heads)
        self.validate()

    def validate(self):
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.depth_multiple <= 0 or self.width_multiple <= 0:
            raise ConfigError("depth_multiple and width_multiple must be > 0")
        if self.heads not in (3, 4):
            raise ConfigError(f"heads must be 3 or 4, got {self.heads}")
        if self.anchors.num_heads != self.heads:
            raise ConfigError(f"{self.heads} heads but {self.anchors.num_heads} anchor groups")

    @property
    def num_outputs(self):
        return 3 * (5 + self.num_classes)

    @property
    def strides(self):
        return self.anchors.strides

    def to_text(self):
        lines = ["# hicyolo model config"]
        for f in fields(self):
            if f.name == "anchors":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
        for name, row in zip(GROUP_NAMES[-self.heads :], self.anchors.to_rows()):
            lines.append(f"anchors_{name} = {row}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
        kinds = {f.name: f.type for f in fields(cls) if f.name != "anchors"}
        values, rows = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("anchors_"):
                name = key[len("anchors_") :]
                if name not in GROUP_NAMES:
                    raise ConfigError(f"line {lineno}: unknown anchor group {name!r}")
                try:
                    row = [float(v) for v in value.split()]
                except ValueError:
                    raise ConfigError(f"line {lineno}: anchors must be numbers") from None
                if len(row) != 6:
                    raise ConfigError(f"line {lineno}: anchor row needs 6 floats, got {len(row)}")
                rows[name] = row
                continue
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(kinds[key], value, lineno)
        heads = values.get("heads", 4)
        if rows:
            names = [n for n in GROUP_NAMES if n in rows]
            if len(names) != heads:
                raise ConfigError(f"config has {len(names)} anchor rows for {heads} heads")
            values["anchors"] = AnchorSet([rows[n] for n in names])
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def hash(self):
        """64-bit fingerprint of the canonical config text."""
        return int.from_bytes(hashlib.sha256(self.to_text().encode()).digest()[:8], "little")

    def replace(self, **changes):
        if "heads" in changes and "anchors" not in changes:
            changes["anchors"] = AnchorSet.default(changes["heads"])
        return replace(self, **changes)


def _coerce(kind, value, lineno):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {value!r} as {kind}") from None


def make_divisible(x, divisor=8):
    return int(math.ceil(x / divisor) * divisor)


@dataclass
class LayerSpec:
    name: str
    source: str
    kind: str
    args: str
    channels: int
    stride: int


class Backbone(nn.Module):
    def __init__(self, cfg, width, depth, rng):
        super().__init__()
        self.stem = nn.ConvBlock(3, width(64), 6, 2, 2, rng=rng)
        self.conv1 = nn.ConvBlock(width(64), width(128), 3, 2, rng=rng)
        self.c3_1 = nn.C3(width(128), width(128), depth(3), rng=rng)
        self.conv2 = nn.ConvBlock(width(128), width(256), 3, 2, rng=rng)
        self.c3_2 = nn.C3(width(256), width(256), depth(6), rng=rng)
        self.conv3 = nn.ConvBlock(width(256), width(512), 3, 2, rng=rng)
        self.c3_3 = nn.C3(width(512), width(512), depth(9), rng=rng)
        self.conv4 = nn.ConvBlock(width(512), width(1024), 3, 2, rng=rng)
        self.c3_4 = nn.C3(width(1024), width(1024), depth(3), rng=rng)
        self.sppf = nn.SPPF(width(1024), width(1024), 5, rng=rng)
        self.cbam = nn.CBAM(width(1024), cfg.cbam_reduction, rng=rng) if cfg.use_cbam else None

    def forward(self, x):
        p2 = self.c3_1(self.conv1(self.stem(x)))
        p3 = self.c3_2(self.conv2(p2))
        p4 = self.c3_3(self.conv3(p3))
        p5 = self.sppf(self.c3_4(self.conv4(p4)))
        if self.cbam is not None:
            p5 = self.cbam(p5)
        return p2, p3, p4, p5


class Neck(nn.Module):
    def __init__(self, cfg, width, depth, rng):
        super().__init__()
        self.p2 = cfg.heads == 4
        c128, c256, c512, c1024 = width(128), width(256), width(512), width(1024)
        n = depth(3)
        self.involution = (
            nn.Involution(c1024, cfg.involution_k, cfg.involution_groups, cfg.involution_reduction, rng=rng)
            if cfg.use_involution
            else None
        )
        self.lat5 = nn.ConvBlock(c1024, c512, 1, 1, rng=rng)
        self.up4 = nn.C3(2 * c512, c512, n, False, rng=rng)
        self.lat4 = nn.ConvBlock(c512, c256, 1, 1, rng=rng)
        self.up3 = nn.C3(2 * c256, c256, n, False, rng=rng)
        if self.p2:
            self.lat3 = nn.ConvBlock(c256, c128, 1, 1, rng=rng)
            self.up2 = nn.C3(2 * c128, c128, n, False, rng=rng)
            self.down2 = nn.ConvBlock(c128, c128, 3, 2, rng=rng)
            self.pan3 = nn.C3(2 * c128, c256, n, False, rng=rng)
        self.down3 = nn.ConvBlock(c256, c256, 3, 2, rng=rng)
        self.pan4 = nn.C3(2 * c256, c512, n, False, rng=rng)
        self.down4 = nn.ConvBlock(c512, c512, 3, 2, rng=rng)
        self.pan5 = nn.C3(2 * c512, c1024, n, False, rng=rng)
        self.out_channels = ([c128] if self.p2 else []) + [c256, c512, c1024]

    def forward(self, feats):
        p2, p3, p4, p5 = feats
        if self.involution is not None:
            p5 = self.involution(p5)
        l5 = self.lat5(p5)
        t4 = self.up4(T.concat_channels(T.upsample_nearest2x(l5), p4))
        l4 = self.lat4(t4)
        t3 = self.up3(T.concat_channels(T.upsample_nearest2x(l4), p3))
        outs = []
        if self.p2:
            l3 = self.lat3(t3)
            o2 = self.up2(T.concat_channels(T.upsample_nearest2x(l3), p2))
            o3 = self.pan3(T.concat_channels(self.down2(o2), l3))
            outs.append(o2)
        else:
            o3 = t3
        o4 = self.pan4(T.concat_channels(self.down3(o3), l4))
        o5 = self.pan5(T.concat_channels(self.down4(o4), l5))
        return outs + [o3, o4, o5]


class HICModel(nn.Module):
    """Backbone, neck and per-level 1x1 prediction convs; ``forward`` returns raw head maps."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        wm, dm = cfg.width_multiple, cfg.depth_multiple

        def width(c):
            return make_divisible(c * wm, 8)

        def depth(n):
            return max(math.ceil(n * dm), 1)

        self.backbone = Backbone(cfg, width, depth, rng)
        self.neck = Neck(cfg, width, depth, rng)
        no = cfg.num_outputs
        self.heads = [nn.Conv2d(c, no, 1, bias=True, rng=rng) for c in self.neck.out_channels]
        self._init_head_bias()
        self.schedule = _schedule(cfg, width, depth)
        for name, p in self.named_parameters():
            p.name = name

    def _init_head_bias(self):
        # objectness ~ 8 objects per 640 image (fixed 640 regardless of input size), class prior 0.6 / nc
        cfg = self.config
        for head, s in zip(self.heads, cfg.strides):
            b = head.bias.data.reshape(3, -1)
            b[:, 4] += math.log(8 / (640 / s) ** 2)
            b[:, 5:] += math.log(0.6 / (cfg.num_classes - 0.99)) if cfg.num_classes > 1 else 0.0

    def forward(self, images):
        images = T.as_tensor(images)
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"model input must be (N, 3, {s}, {s}), got {images.shape}")
        if images.shape[2:] != (s, s):
            raise ShapeError(f"model input spatial size must be {s}x{s}, got {images.shape[2]}x{images.shape[3]}")
        feats = self.neck(self.backbone(images))
        return [head(f) for head, f in zip(self.heads, feats)]


def build(config, seed=0):
    return HICModel(config, seed)


def _schedule(cfg, width, depth):
    n = depth(3)
    rows = [
        LayerSpec("backbone.stem", "input", "Conv", "k=6 s=2", width(64), 2),
        LayerSpec("backbone.conv1", "-1", "Conv", "k=3 s=2", width(128), 4),
        LayerSpec("backbone.c3_1", "-1", "C3", f"n={depth(3)}", width(128), 4),
        LayerSpec("backbone.conv2", "-1", "Conv", "k=3 s=2", width(256), 8),
        LayerSpec("backbone.c3_2", "-1", "C3", f"n={depth(6)}", width(256), 8),
        LayerSpec("backbone.conv3", "-1", "Conv", "k=3 s=2", width(512), 16),
        LayerSpec("backbone.c3_3", "-1", "C3", f"n={depth(9)}", width(512), 16),
        LayerSpec("backbone.conv4", "-1", "Conv", "k=3 s=2", width(1024), 32),
        LayerSpec("backbone.c3_4", "-1", "C3", f"n={depth(3)}", width(1024), 32),
        LayerSpec("backbone.sppf", "-1", "SPPF", "k=5", width(1024), 32),
    ]
    if cfg.use_cbam:
        rows.append(LayerSpec("backbone.cbam", "-1", "CBAM", f"r={cfg.cbam_reduction} k=7", width(1024), 32))
    if cfg.use_involution:
        args = f"K={cfg.involution_k} G={cfg.involution_groups} r={cfg.involution_reduction}"
        rows.append(LayerSpec("neck.involution", "-1", "Involution", args, width(1024), 32))
    rows += [
        LayerSpec("neck.lat5", "-1", "Conv", "k=1", width(512), 32),
        LayerSpec("neck.up4", "up(lat5)+backbone.c3_3", "C3", f"n={n} shortcut=False", width(512), 16),
        LayerSpec("neck.lat4", "-1", "Conv", "k=1", width(256), 16),
        LayerSpec("neck.up3", "up(lat4)+backbone.c3_2", "C3", f"n={n} shortcut=False", width(256), 8),
    ]
    if cfg.heads == 4:
        rows += [
            LayerSpec("neck.lat3", "-1", "Conv", "k=1", width(128), 8),
            LayerSpec("neck.up2", "up(lat3)+backbone.c3_1", "C3", f"n={n} shortcut=False", width(128), 4),
            LayerSpec("neck.down2", "-1", "Conv", "k=3 s=2", width(128), 8),
            LayerSpec("neck.pan3", "down2+lat3", "C3", f"n={n} shortcut=False", width(256), 8),
        ]
        p3 = "neck.pan3"
    else:
        p3 = "neck.up3"
    rows += [
        LayerSpec("neck.down3", p3, "Conv", "k=3 s=2", width(256), 16),
        LayerSpec("neck.pan4", "down3+lat4", "C3", f"n={n} shortcut=False", width(512), 16),
        LayerSpec("neck.down4", "-1", "Conv", "k=3 s=2", width(512), 32),
        LayerSpec("neck.pan5", "down4+lat5", "C3", f"n={n} shortcut=False", width(1024), 32),
    ]
    levels = (["neck.up2"] if cfg.heads == 4 else []) + [p3, "neck.pan4", "neck.pan5"]
    for i, (src, s) in enumerate(zip(levels, cfg.strides)):
        rows.append(LayerSpec(f"heads.{i}", src, "Detect", f"anchors={cfg.anchors.pixels[i].reshape(-1).tolist()}", cfg.num_outputs, s))
    return rows


# ------------------------------------------------------------ parameter report


@dataclass
class ParamReport:
    layers: list  # (layer name, count)
    groups: dict
    total: int

    def to_text(self, reference=None):
        lines = [f"{'layer':<24}{'params':>12}"]
        lines += [f"{name:<24}{n:>12,}" for name, n in self.layers]
        lines.append("-" * 36)
        lines += [f"{g:<24}{n:>12,}" for g, n in self.groups.items()]
        lines.append(f"{'total':<24}{self.total:>12,}")
        if reference:
            delta = self.total - reference
            lines.append(f"{'reference':<24}{reference:>12,}")
            lines.append(f"{'difference':<24}{delta:>+12,} ({100.0 * delta / reference:+.2f}%)")
        return "\n".join(lines) + "\n"


def count_parameters(model):
    """Per-layer, per-group (backbone/neck/heads) and total parameter counts."""
    per_layer = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        layer = ".".join(parts[:2])
        per_layer[layer] = per_layer.get(layer, 0) + p.data.size
    groups = {}
    for layer, n in per_layer.items():
        g = layer.split(".")[0]
        groups[g] = groups.get(g, 0) + n
    return ParamReport(list(per_layer.items()), groups, sum(per_layer.values()))


def describe(model):
    counts = dict(count_parameters(model).layers)
    s = model.config.input_size
    lines = [f"{'layer':<18}{'from':<26}{'module':<12}{'args':<34}{'out':>16}{'params':>12}"]
    for row in model.schedule:
        side = s // row.stride
        shape = f"{row.channels}x{side}x{side}"
        lines.append(f"{row.name:<18}{row.source:<26}{row.kind:<12}{row.args[:33]:<34}{shape:>16}{counts.get(row.name, 0):>12,}")
    lines.append(f"total parameters: {count_parameters(model).total:,}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"HICD"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHQI")


def encode_checkpoint(entries, config_hash):
    """``entries`` maps name -> array; order is preserved."""
    out = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, config_hash, len(entries))]
    for name, arr in entries.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d scalars 0-d
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_checkpoint(buf):
    """Returns ``(config_hash, entries)``."""

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if len(buf) >= 4 and buf[:4] != CKPT_MAGIC:
        raise MagicError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    magic, version, config_hash, count = _CKPT_HEADER.unpack(take(_CKPT_HEADER.size, "header"))
    if magic != CKPT_MAGIC:
        raise MagicError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2, "name length"))
        name = take(klen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(take(8 * n, f"payload of {name}"), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - pos} trailing bytes")
    return config_hash, entries


def save_checkpoint(model, path, extra=None):
    entries = dict(model.state())
    if extra:
        entries.update(extra)
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(entries, model.config.hash()))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_checkpoint(path, config, seed=0):
    """Rebuild the model for ``config`` and restore its parameters and BN statistics."""
    config_hash, entries = read_checkpoint(path)
    if config_hash != config.hash():
        raise ConfigHashError(f"checkpoint config hash {config_hash:016x} does not match {config.hash():016x}")
    model = build(config, seed)
    model.load_state(entries)
    return model
