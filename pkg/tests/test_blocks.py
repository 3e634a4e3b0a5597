import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hicyolo import nn
from hicyolo import tensor as T
from hicyolo.errors import ShapeError


def _x(rng, shape):
    return T.Tensor(rng.standard_normal(shape))


# ----------------------------------------------------------------- ConvBlock


def test_conv_block_shapes(rng):
    blk = nn.ConvBlock(3, 8, 1, 1, rng=rng)
    assert blk(_x(rng, (2, 3, 7, 7))).shape == (2, 8, 7, 7)
    blk = nn.ConvBlock(3, 4, 3, 2, rng=rng)
    assert blk(_x(rng, (1, 3, 640, 640))).shape == (1, 4, 320, 320)


def test_conv_block_eval_gradient(rng):
    blk = nn.ConvBlock(3, 4, 3, 1, rng=rng).eval()
    for bn_stat in blk.bn._buffers.values():
        bn_stat[...] = rng.uniform(0.5, 1.5, bn_stat.shape)
    x = _x(rng, (2, 3, 6, 6))
    proj = rng.standard_normal((2, 4, 6, 6))
    rep = T.grad_check(lambda x, *ps: T.mul(blk(x), proj), [x] + blk.parameters(), tol=1e-5)
    assert rep.passed, rep


# -------------------------------------------------------------------- C3


def test_c3_shape_preserved(rng):
    assert nn.C3(8, 8, n=1, rng=rng)(_x(rng, (2, 8, 5, 5))).shape == (2, 8, 5, 5)


def test_c3_identity_bottleneck_chain(rng):
    blk = nn.C3(8, 8, n=2, shortcut=True, rng=rng)
    for b in blk.m:
        b.cv2.conv.weight.data[...] = 0.0
    x = _x(rng, (2, 8, 5, 5))
    assert np.array_equal(blk.branch_a(x).data, blk.cv1(x).data)


def test_c3_gradient(rng):
    blk = nn.C3(4, 6, n=2, rng=rng)
    x = _x(rng, (2, 4, 5, 5))
    proj = rng.standard_normal((2, 6, 5, 5))
    rep = T.grad_check(lambda x, *ps: T.mul(blk(x), proj), [x] + blk.parameters(), tol=1e-5, max_elems=40)
    assert rep.passed, rep


# ------------------------------------------------------------------ SPPF


def test_sppf_constant_input_pools_to_itself(rng):
    blk = nn.SPPF(4, 4, 5, rng=rng)
    x = T.Tensor(np.full((1, 2, 6, 6), 3.0))
    maps = blk.pooled(x)
    assert len(maps) == 4 and all(np.array_equal(m.data, x.data) for m in maps)
    assert blk(_x(rng, (2, 4, 6, 6))).shape == (2, 4, 6, 6)


@pytest.mark.parametrize("seed", range(20))
def test_sppf_cascade_equals_spp(backend, seed):
    rng = np.random.default_rng(seed)
    x = _x(rng, (1, 3, 9, 9))
    _, p1, p2, p3 = nn.SPPF(6, 6, 5, rng=rng).pooled(x)
    for k, p in ((5, p1), (9, p2), (13, p3)):
        ref, _ = oracles.maxpool2d(x.data, k, 1, k // 2)
        assert np.array_equal(p.data, ref)


def test_sppf_rejects_even_kernel():
    with pytest.raises(ValueError):
        nn.SPPF(4, 4, 4)


# ------------------------------------------------------------- involution


def test_involution_group_mapping_c4_g2():
    # group 0 taps are all 1 at the centre, group 1 taps are 2: channels 1,2 -> group 1, channels 3,4 -> group 2 (1-indexed)
    x = np.random.default_rng(0).standard_normal((1, 4, 3, 3))
    ker = np.zeros((1, 2 * 9, 3, 3))
    ker[0, 4] = 1.0
    ker[0, 9 + 4] = 2.0
    y = T.involution(x, ker, 3, 2).data
    np.testing.assert_array_equal(y[0, :2], x[0, :2])
    np.testing.assert_array_equal(y[0, 2:], 2 * x[0, 2:])
    np.testing.assert_array_equal(y, oracles.involution(x, ker, 3, 2))


def test_involution_unit_kernel_is_identity(backend):
    blk = nn.Involution(4, k=1, groups=1, reduction=4)
    blk.span.weight.data[...] = 0.0
    blk.span.bias.data[...] = 1.0
    x = _x(np.random.default_rng(1), (2, 4, 5, 5))
    assert np.array_equal(T.involution(x, blk.kernel(x), 1, 1).data, x.data)


def test_involution_block_matches_summation_oracle(backend):
    rng = np.random.default_rng(3)
    blk = nn.Involution(2, k=3, groups=1, reduction=1, rng=rng)
    x = _x(rng, (1, 2, 2, 2))
    ker = blk.kernel(x).data
    assert ker.reshape(1, 1, 3, 3, 2, 2).shape == (1, 1, 3, 3, 2, 2)
    np.testing.assert_allclose(T.involution(x, ker, 3, 1).data, oracles.involution(x.data, ker, 3, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("groups", [1, 2, 8])
def test_involution_degenerate_groups(backend, groups):
    rng = np.random.default_rng(groups)
    x = rng.standard_normal((2, 8, 5, 5))
    ker = rng.standard_normal((2, groups * 9, 5, 5))
    np.testing.assert_allclose(T.involution(x, ker, 3, groups).data, oracles.involution(x, ker, 3, groups), atol=1e-12)


def test_involution_rejects_bad_groups_and_kernel():
    with pytest.raises(ShapeError):
        nn.Involution(6, k=3, groups=4)
    with pytest.raises(ValueError):
        nn.Involution(8, k=2, groups=4)
    with pytest.raises(ShapeError):
        T.involution(np.zeros((1, 4, 3, 3)), np.zeros((1, 9, 3, 3)), 3, 2)


def test_involution_block_shape_and_params():
    blk = nn.Involution(16, k=3, groups=4, reduction=4)
    assert blk(_x(np.random.default_rng(0), (2, 16, 4, 4))).shape == (2, 16, 4, 4)
    # reduce conv 16*4 + BN 2*4, span 4*36 + 36, output BN 2*16
    assert nn.count(blk) == 16 * 4 + 8 + 4 * 36 + 36 + 32


# ------------------------------------------------------------------- CBAM


def test_cbam_zero_weights_quarter_output(rng):
    blk = nn.CBAM(8, reduction=4, rng=rng)
    for p in blk.parameters():
        p.data[...] = 0.0
    x = _x(rng, (2, 8, 5, 5))
    np.testing.assert_allclose(blk(x).data, 0.25 * x.data, rtol=1e-15)


def test_cbam_constant_channels(rng):
    blk = nn.CBAM(8, reduction=2, rng=rng)
    x = T.Tensor(np.broadcast_to(rng.standard_normal((1, 8, 1, 1)), (1, 8, 4, 4)).copy())
    pooled = T.Tensor(x.data[:, :, :1, :1])
    expected = T.sigmoid(T.mul(blk._mlp(pooled), 2.0)).data
    np.testing.assert_allclose(blk.channel_map(x).data, expected, rtol=1e-14)


def test_cbam_maps_bounded_and_shaped(rng):
    blk = nn.CBAM(16, rng=rng)
    x = _x(rng, (2, 16, 6, 6))
    mc, ms = blk.channel_map(x), blk.spatial_map(x)
    assert mc.shape == (2, 16, 1, 1) and ms.shape == (2, 1, 6, 6)
    assert (mc.data > 0).all() and (mc.data < 1).all() and (ms.data > 0).all() and (ms.data < 1).all()
    assert np.all(np.abs(blk(x).data) <= np.abs(x.data))


def test_cbam_parameter_count():
    assert nn.count(nn.CBAM(512, reduction=16)) == 2 * 512 * 32 + 2 * 49


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.sampled_from([4, 8]), st.integers(2, 7), st.integers(0, 2**31))
def test_blocks_preserve_batch_and_spatial_dims(n, c, h, seed):
    rng = np.random.default_rng(seed)
    x = _x(rng, (n, c, h, h))
    for blk in (nn.C3(c, c, 1, rng=rng), nn.SPPF(c, c, 5, rng=rng), nn.CBAM(c, 4, rng=rng), nn.Involution(c, 3, 4, 4, rng=rng)):
        out = blk(x)
        assert out.shape == (n, c, h, h) and np.isfinite(out.data).all()


def test_parameter_names_are_unique(rng):
    class Pair(nn.Module):
        def __init__(self):
            super().__init__()
            self.a = nn.C3(4, 4, 2, rng=rng)
            self.b = [nn.CBAM(4, 2, rng=rng), nn.Involution(4, 3, 2, 2, rng=rng)]

    names = [n for n, _ in Pair().named_parameters()]
    assert len(names) == len(set(names))
    assert "a.m.1.cv2.conv.weight" in names and "b.1.span.bias" in names
