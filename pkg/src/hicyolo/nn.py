"""Layers and composite blocks built on :mod:`hicyolo.tensor`."""
import math

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor owned by exactly one module."""

    def __init__(self, data, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = None


class Module:
    """Minimal container: attributes that are Parameters, Modules or lists of
    Modules are discovered in assignment order to build dotted names."""

    def __init__(self):
        self.training = True
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=np.float64)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def named_buffers(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for name, value in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state(self):
        """Parameters and buffers as one ordered name -> array mapping."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (params.keys() | buffers.keys()) - state.keys()
        if missing:
            raise FormatError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {state[name].shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=1, stride=1, pad=0, bias=False, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride, self.pad = stride, pad
        fan_in = cin * k * k
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), fan_in))
        self.bias = Parameter(_uniform(rng, (cout,), fan_in)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-3, momentum=0.03):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x):
        return T.batchnorm(
            x,
            self.weight,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


def autopad(k):
    return k // 2


class ConvBlock(Module):
    """Conv2d (no bias) -> BatchNorm -> SiLU."""

    def __init__(self, cin, cout, k=1, s=1, p=None, act=True, rng=None):
        super().__init__()
        self.cout = cout
        self.conv = Conv2d(cin, cout, k, s, autopad(k) if p is None else p, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.silu(y) if self.act else y


class Bottleneck(Module):
    def __init__(self, c1, c2, shortcut=True, e=1.0, rng=None):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = ConvBlock(c1, c_, 1, 1, rng=rng)
        self.cv2 = ConvBlock(c_, c2, 3, 1, rng=rng)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return T.add(x, y) if self.add else y


class C3(Module):
    """CSP block: a bottleneck chain branch and a 1x1 bypass branch, concatenated and fused."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, rng=None):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = ConvBlock(c1, c_, 1, 1, rng=rng)
        self.cv2 = ConvBlock(c1, c_, 1, 1, rng=rng)
        self.cv3 = ConvBlock(2 * c_, c2, 1, rng=rng)
        self.m = [Bottleneck(c_, c_, shortcut, e=1.0, rng=rng) for _ in range(n)]

    def branch_a(self, x):
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        return y

    def forward(self, x):
        return self.cv3(T.concat_channels(self.branch_a(x), self.cv2(x)))


class SPPF(Module):
    """Three cascaded stride-1 max-pools (kernel k) concatenated with their input."""

    def __init__(self, c1, c2, k=5, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"SPPF kernel must be odd, got {k}")
        c_ = c1 // 2
        self.k = k
        self.cv1 = ConvBlock(c1, c_, 1, 1, rng=rng)
        self.cv2 = ConvBlock(c_ * 4, c2, 1, 1, rng=rng)

    def pooled(self, x):
        """Return ``[x, p1, p2, p3]`` for an already-reduced input ``x``."""
        out = [x]
        for _ in range(3):
            out.append(T.maxpool2d(out[-1], self.k, 1, self.k // 2))
        return out

    def forward(self, x):
        return self.cv2(T.concat_channels(self.pooled(self.cv1(x))))


class Involution(Module):
    """Involution with a per-pixel kernel generated from the pixel's own features.

    Kernel generator: 1x1 reduce (C -> C/r) with BN + SiLU, then a 1x1 span
    conv (C/r -> K*K*G, with bias). The involution output passes through
    BN + SiLU like the surrounding Conv blocks.
    """

    def __init__(self, c, k=3, groups=4, reduction=4, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"involution kernel size must be odd, got {k}")
        if groups < 1 or c % groups:
            raise ShapeError(f"involution groups G={groups} must divide channels C={c}")
        self.k, self.groups = k, groups
        hidden = max(c // reduction, 1)
        self.reduce = ConvBlock(c, hidden, 1, 1, rng=rng)
        self.span = Conv2d(hidden, k * k * groups, 1, bias=True, rng=rng)
        self.bn = BatchNorm2d(c)

    def kernel(self, x):
        return self.span(self.reduce(x))

    def forward(self, x):
        y = T.involution(x, self.kernel(x), self.k, self.groups)
        return T.silu(self.bn(y))


class CBAM(Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, c, reduction=16, k=7, rng=None):
        super().__init__()
        hidden = max(c // reduction, 1)
        self.fc1 = Conv2d(c, hidden, 1, rng=rng)
        self.fc2 = Conv2d(hidden, c, 1, rng=rng)
        self.spatial = Conv2d(2, 1, k, 1, k // 2, rng=rng)

    def _mlp(self, v):
        return self.fc2(T.relu(self.fc1(v)))

    def channel_map(self, x):
        return T.sigmoid(T.add(self._mlp(T.global_avgpool(x)), self._mlp(T.global_maxpool(x))))

    def spatial_map(self, x):
        pooled = T.concat_channels(T.mean(x, axis=1, keepdims=True), T.amax(x, axis=1, keepdims=True))
        return T.sigmoid(self.spatial(pooled))

    def forward(self, x):
        x1 = T.mul(x, self.channel_map(x))
        return T.mul(x1, self.spatial_map(x1))


def count(module):
    return sum(p.data.size for p in module.parameters())
