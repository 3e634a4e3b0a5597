"""Finite-difference checks of every differentiable op and block.

Each case builds a small random problem at batch 2 with at most 8
channels and 8x8 spatial size. Outputs are contracted with a fixed random
weight before summing so every output element contributes a distinct
gradient.
"""
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .anchors import AnchorSet
from .boxes import ciou_loss_tensor
from .loss import compute_loss

TOL = 1e-4
SEEDS = (0, 1, 2, 3, 4)
MAX_ELEMS = 96


def _weighted(fn, out_shape, rng):
    w = rng.standard_normal(out_shape)
    return lambda *xs: T.mul(fn(*xs), w)


def _image(rng, c, h=6, w=6):
    return T.Tensor(rng.standard_normal((2, c, h, w)))


def _case_conv2d(rng):
    x = _image(rng, 4, 7, 7)
    wt = T.Tensor(rng.standard_normal((6, 4, 3, 3)) * 0.3)
    b = T.Tensor(rng.standard_normal(6))
    return _weighted(lambda x, wt, b: T.conv2d(x, wt, b, stride=2, pad=1), (2, 6, 4, 4), rng), [x, wt, b]


def _case_batchnorm(rng):
    x = _image(rng, 5)
    gamma, beta = T.Tensor(rng.uniform(0.5, 1.5, 5)), T.Tensor(rng.standard_normal(5))
    rm, rv = rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)
    fn = lambda x, g, b: T.batchnorm(x, g, b, rm.copy(), rv.copy(), training=False)
    return _weighted(fn, x.shape, rng), [x, gamma, beta]


def _case_batchnorm_train(rng):
    x = _image(rng, 5)
    gamma, beta = T.Tensor(rng.uniform(0.5, 1.5, 5)), T.Tensor(rng.standard_normal(5))
    fn = lambda x, g, b: T.batchnorm(x, g, b, np.zeros(5), np.ones(5), training=True)
    return _weighted(fn, x.shape, rng), [x, gamma, beta]


def _case_silu(rng):
    x = _image(rng, 3)
    return _weighted(T.silu, x.shape, rng), [x]


def _case_sigmoid(rng):
    x = _image(rng, 3)
    return _weighted(T.sigmoid, x.shape, rng), [x]


def _case_maxpool(rng):
    # well separated values keep every window's argmax away from a tie
    x = T.Tensor(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01)
    return _weighted(lambda x: T.maxpool2d(x, 5, 1, 2), x.shape, rng), [x]


def _case_upsample(rng):
    x = _image(rng, 3, 4, 4)
    return _weighted(T.upsample_nearest2x, (2, 3, 8, 8), rng), [x]


def _block_case(block, c_in, c_out, rng, h=6):
    x = _image(rng, c_in, h, h)
    params = block.parameters()
    return _weighted(lambda x, *ps: block(x), (2, c_out, h, h), rng), [x] + params


def _case_c3(rng):
    return _block_case(nn.C3(4, 8, n=1, rng=rng), 4, 8, rng)


def _case_sppf(rng):
    return _block_case(nn.SPPF(8, 4, 5, rng=rng), 8, 4, rng)


def _case_involution(rng):
    return _block_case(nn.Involution(8, k=3, groups=2, reduction=4, rng=rng), 8, 8, rng)


def _case_involution_op(rng):
    x = _image(rng, 4)
    ker = T.Tensor(rng.standard_normal((2, 2 * 9, 6, 6)))
    return _weighted(lambda x, k: T.involution(x, k, 3, 2), x.shape, rng), [x, ker]


def _case_cbam(rng):
    return _block_case(nn.CBAM(8, reduction=4, rng=rng), 8, 8, rng)


def _case_ciou(rng):
    gt = np.column_stack([rng.uniform(2, 6, 6), rng.uniform(2, 6, 6), rng.uniform(0.5, 3, 6), rng.uniform(0.5, 3, 6)])
    pred = T.Tensor(gt + rng.normal(0, 0.4, gt.shape) * [1, 1, 0.3, 0.3])
    return lambda p: ciou_loss_tensor(p, gt), [pred]


def _case_composite_loss(rng):
    nc = 2
    anchors = AnchorSet([[1, 1.5, 2, 1, 2, 2], [2, 3, 4, 2, 4, 4], [4, 6, 8, 4, 8, 8], [8, 12, 16, 8, 16, 16]])
    grids = [(8, 8), (4, 4), (2, 2), (1, 1)]
    heads = [T.Tensor(rng.standard_normal((2, 3 * (5 + nc), h, w)) * 0.5) for h, w in grids]
    n = 5
    targets = np.column_stack(
        [rng.integers(0, 2, n), rng.integers(0, nc, n), rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.05, 0.4, (n, 2))]
    )
    return lambda *hs: compute_loss(list(hs), targets, anchors, nc).total, heads


CASES = {
    "conv2d": _case_conv2d,
    "batchnorm": _case_batchnorm,
    "batchnorm_train": _case_batchnorm_train,
    "silu": _case_silu,
    "sigmoid": _case_sigmoid,
    "maxpool": _case_maxpool,
    "upsample": _case_upsample,
    "c3": _case_c3,
    "sppf": _case_sppf,
    "involution_op": _case_involution_op,
    "involution": _case_involution,
    "cbam": _case_cbam,
    "ciou": _case_ciou,
    "composite_loss": _case_composite_loss,
}


@dataclass
class CaseResult:
    name: str
    seed: int
    report: T.GradCheckReport

    @property
    def passed(self):
        return self.report.passed

    def to_line(self):
        r = self.report
        status = "ok" if r.passed else "FAIL"
        return f"{self.name:<16} seed {self.seed}  rel {r.max_rel_error:.3e}  abs {r.max_abs_error:.3e}  n {r.n_checked:<5} {status}"


def run_case(name, seed, tol=TOL, max_elems=MAX_ELEMS):
    rng = np.random.default_rng(seed)
    fn, inputs = CASES[name](rng)
    return CaseResult(name, seed, T.grad_check(fn, inputs, tol=tol, max_elems=max_elems, seed=seed))


def run_suite(names=None, seeds=SEEDS, tol=TOL, max_elems=MAX_ELEMS):
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - CASES.keys()
    if unknown:
        raise KeyError(f"unknown gradient-check scope {sorted(unknown)}; choose from {sorted(CASES)}")
    return [run_case(n, s, tol, max_elems) for n in names for s in seeds]
