"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records a backward closure on its output.  Outputs are
stamped with a monotonically increasing sequence number, so replaying the
recorded nodes in descending order is a valid reverse topological order
(the tape).  The graph is rebuilt on every forward pass.

Network operations (``conv2d``, ``batchnorm``, pooling, ``involution`` ...)
expect 4-D ``(N, C, H, W)`` operands; the elementwise and reduction
operations accept any shape and broadcast like numpy.
"""
import contextlib
import itertools
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import MagicError, NumericError, ShapeError, TruncatedError, VersionError

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __array_priority__ = 1000
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if not self.requires_grad:
            return

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)

        pending = {id(self): grad}
        for t in sorted(nodes.values(), key=lambda node: node._seq, reverse=True):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward)


def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    xd = x.data
    return _result(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def atan(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.arctan(xd), (x,), lambda g: (g / (1.0 + xd * xd),))


def _sigmoid(xd):
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x):
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))
    )


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape))
    )


def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy on logits, in the overflow-free form
    ``max(x, 0) - x*t + log(1 + exp(-|x|))``. ``target`` is a constant array."""
    x = as_tensor(logits)
    xd = x.data
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), xd.shape)
    out = np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    return _result(out, (x,), lambda g: (g * (_sigmoid(xd) - t),))


# ------------------------------------------------------------------ reductions


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)
    return _result(out, (x,), lambda g: (_expand(g / count, x.shape, axis, keepdims).copy(),))


def amax(x, axis, keepdims=False):
    """Max along one axis; the gradient goes to the first (lowest index) maximum."""
    x = as_tensor(x)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


# ------------------------------------------------------------------- shaping


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index):
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def concat_channels(*tensors):
    """Stack 4-D tensors along the channel axis, in argument order."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.ndim != 4:
            raise ShapeError(f"concat_channels operand {i} must be 4-D, got shape {t.shape}")
        for dim, name in ((0, "N"), (2, "H"), (3, "W")):
            if t.shape[dim] != ref[dim]:
                raise ShapeError(f"concat_channels operand {i}: {name}={t.shape[dim]} differs from {ref[dim]}")
    if len(tensors) == 1:
        return tensors[0]
    return concat(tensors, axis=1)


# --------------------------------------------------------------- network ops


def _check4(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (N, C, H, W) input, got shape {x.shape}")


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Zero-padded 2-D cross-correlation. ``weight`` is ``(Cout, Cin, K, K)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, K, K), got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    cout, cin, k, _ = weight.shape
    n, c, h, w = x.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, weight Cin={cin}")
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel K={k} exceeds padded input H={hp}, W={wp}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(xd)
    pointwise = k == 1 and stride == 1
    cols = xp.reshape(n, c, hp * wp) if pointwise else kernels.im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gxp = gcols.reshape(n, c, hp, wp)
            else:
                gxp = kernels.col2im(gcols, c, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.03, eps=1e-3):
    """Per-channel batch normalisation.

    ``running_mean``/``running_var`` are plain arrays updated in place when
    ``training`` (``new = (1 - momentum) * old + momentum * batch``, unbiased
    batch variance).
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be > 0, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "batchnorm")
    c = x.shape[1]
    for name, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"batchnorm {name} must have length C={c}, got shape {np.shape(v)}")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * invstd[:, None, None]
    gd = gamma.data[:, None, None]
    out = xhat * gd + beta.data[:, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (invstd[:, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * invstd[:, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def maxpool2d(x, k, stride=None, pad=0):
    """Max pooling with -inf padding; ties route the gradient to the lowest linear index."""
    x = as_tensor(x)
    _check4(x, "maxpool2d")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"maxpool2d kernel k={k} larger than padded input H={hp}, W={wp}")
    if pad > k // 2:
        raise ValueError(f"maxpool2d pad={pad} must be <= k//2={k // 2}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else np.ascontiguousarray(x.data)
    out, idx = kernels.maxpool_forward(xp, k, stride, ho, wo)

    def backward(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), idx, hp, wp)
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return _result(out, (x,), backward)


def global_avgpool(x):
    x = as_tensor(x)
    _check4(x, "global_avgpool")
    return mean(x, axis=(2, 3), keepdims=True)


def global_maxpool(x):
    x = as_tensor(x)
    _check4(x, "global_maxpool")
    n, c = x.shape[:2]
    return reshape(amax(reshape(x, (n, c, -1)), axis=2), (n, c, 1, 1))


def upsample_nearest2x(x):
    x = as_tensor(x)
    _check4(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def involution(x, kernel, k, groups):
    """Apply per-pixel kernels shared across channel groups.

    ``kernel`` is ``(N, groups*k*k, H, W)``; channel slot ``g*k*k + a*k + b``
    holds tap (a, b) of group ``g``, i.e. the weight for ``x[i+a-k//2, j+b-k//2]``.
    Channel ``c`` (0-based) uses group ``c // (C // groups)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check4(x, "involution")
    n, c, h, w = x.shape
    if k < 1 or k % 2 == 0:
        raise ValueError(f"involution kernel size must be odd, got {k}")
    if groups < 1 or c % groups:
        raise ShapeError(f"involution groups G={groups} must divide channels C={c}")
    if kernel.shape != (n, groups * k * k, h, w):
        raise ShapeError(f"involution kernel must have shape {(n, groups * k * k, h, w)}, got {kernel.shape}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data)
    out = kernels.involution_forward(xp, kd, k, groups)

    def backward(g):
        gxp, gker = kernels.involution_backward(np.ascontiguousarray(g), xp, kd, k, groups)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gker

    return _result(out, (x, kernel), backward)


# ------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison.

    ``max_rel_error`` is, per input, ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-abs magnitudes, maximised over inputs.
    """

    max_rel_error: float
    max_abs_error: float
    tol: float
    n_checked: int

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, inputs, tol=1e-5, h=1e-5, max_elems=None, seed=0):
    """Compare analytic gradients of ``sum(f(*inputs))`` with central differences.

    ``max_elems`` caps how many entries of each input are perturbed (sampled
    with ``seed``); the default checks every entry.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = tsum(f(*inputs))
    if not np.isfinite(out.data).all():
        raise NumericError(f"grad_check: f produced non-finite output {out.item()}")
    out.backward()

    def value():
        with no_grad():
            v = float(tsum(f(*inputs)).data)
        if not np.isfinite(v):
            raise NumericError("grad_check: non-finite value during finite differencing")
        return v

    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    total = 0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            raise NumericError("grad_check: analytic gradient contains non-finite values")
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[idx]
        diff = np.abs(a - numeric).max(initial=0.0)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        worst_abs = max(worst_abs, diff)
        worst_rel = max(worst_rel, diff / scale if scale > 0 else diff)
        total += idx.size
    return GradCheckReport(worst_rel, worst_abs, tol, total)


# ------------------------------------------------------ raw tensor container

HICT_MAGIC = b"HICT"
HICT_VERSION = 1
_HICT_HEADER = struct.Struct("<4sB4I")


def encode_tensor(array):
    """Serialise a 4-D array: magic, version byte, 4 x u32 shape, f64 payload (all little-endian)."""
    a = np.asarray(array, dtype="<f8")
    if a.ndim != 4:
        raise ShapeError(f"HICT container stores 4-D arrays, got shape {a.shape}")
    return _HICT_HEADER.pack(HICT_MAGIC, HICT_VERSION, *a.shape) + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf):
    if len(buf) < _HICT_HEADER.size:
        raise TruncatedError(f"HICT header needs {_HICT_HEADER.size} bytes, got {len(buf)}")
    magic, version, *shape = _HICT_HEADER.unpack_from(buf)
    if magic != HICT_MAGIC:
        raise MagicError(f"bad HICT magic {magic!r}")
    if version != HICT_VERSION:
        raise VersionError(f"unsupported HICT version {version}")
    count = int(np.prod(shape))
    payload = buf[_HICT_HEADER.size :]
    if len(payload) != 8 * count:
        raise TruncatedError(f"HICT payload has {len(payload)} bytes, shape {tuple(shape)} needs {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
