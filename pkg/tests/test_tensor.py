import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hicyolo import tensor as T
from hicyolo.errors import MagicError, NumericError, ShapeError, TruncatedError, VersionError

SEEDS = range(5)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel(backend):
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(x, np.ones((1, 1, 1, 1)))
    assert np.array_equal(out.data, x)


def test_conv_all_ones_center_is_nine(backend):
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 2, 6), (1, 0, 1), (3, 1, 5)])
def test_conv_matches_loop_oracle(backend, stride, pad, k):
    rng = np.random.default_rng(stride * 7 + pad * 3 + k)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = T.conv2d(x, w, b, stride, pad).data
    ref = oracles.conv2d(x, w, b, stride, pad)
    assert got.shape == ((2, 4) + ((8 + 2 * pad - k) // stride + 1,) * 2)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_conv_is_linear_in_input(rng):
    x1, x2 = rng.standard_normal((2, 2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    lhs = T.conv2d(x1 + x2, w, pad=1).data
    rhs = T.conv2d(x1, w, pad=1).data + T.conv2d(x2, w, pad=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize(
    "xshape,wshape,match",
    [
        ((1, 3, 5, 5), (2, 4, 3, 3), "Cin"),
        ((3, 5, 5), (2, 3, 3, 3), "4-D"),
        ((1, 3, 2, 2), (2, 3, 5, 5), "exceeds"),
        ((1, 3, 5, 5), (2, 3, 3, 2), "weight"),
    ],
)
def test_conv_shape_errors_name_the_dimension(xshape, wshape, match):
    with pytest.raises(ShapeError, match=match):
        T.conv2d(np.zeros(xshape), np.zeros(wshape))


def test_conv_rejects_bad_stride_and_pad():
    with pytest.raises(ValueError):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=0)
    with pytest.raises(ValueError):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), pad=-1)


# --------------------------------------------------------------- batchnorm


def test_batchnorm_eval_identity_within_eps():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    out = T.batchnorm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False).data
    np.testing.assert_allclose(out, x, rtol=1e-3 / 2)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-3), rtol=1e-15)


def test_batchnorm_constant_channel_normalises_to_zero():
    x = np.full((2, 1, 3, 3), 4.2)
    out = T.batchnorm(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True).data
    assert np.all(out == 0.0)


def test_batchnorm_train_zero_mean_and_running_update(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batchnorm(x, np.ones(3), np.zeros(3), rm, rv, training=True, momentum=0.1).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-10
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_batchnorm_rejects_nonpositive_eps():
    for eps in (0.0, -1e-5):
        with pytest.raises(ValueError):
            T.batchnorm(np.zeros((1, 1, 2, 2)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), False, eps=eps)


# ------------------------------------------------------------ activations


def test_activation_fixed_points():
    assert T.silu(np.zeros((1, 1, 1, 1))).data.item() == 0.0
    assert T.sigmoid(np.zeros((1, 1, 1, 1))).data.item() == 0.5


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(np.array([-800.0, 800.0])).data
    assert np.array_equal(s, [0.0, 1.0])
    b = T.bce_with_logits(np.array([-800.0, 800.0]), np.array([1.0, 0.0])).data
    np.testing.assert_allclose(b, [800.0, 800.0])


# ---------------------------------------------------------------- pooling


def test_maxpool_2x2():
    out = T.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.item() == 4.0


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (13, 1, 6)])
def test_maxpool_matches_loop_oracle_exactly(backend, k, stride, pad):
    rng = np.random.default_rng(k + stride + pad)
    x = rng.standard_normal((2, 3, 13, 13))
    got = T.maxpool2d(x, k, stride, pad).data
    ref, _ = oracles.maxpool2d(x, k, stride, pad)
    assert np.array_equal(got, ref)


def test_maxpool_ties_route_gradient_to_lowest_index(backend):
    x = T.Tensor(np.random.default_rng(0).integers(0, 2, size=(1, 2, 6, 6)).astype(float), requires_grad=True)
    out = T.maxpool2d(x, 3, 1, 1)
    out.sum().backward()
    _, arg = oracles.maxpool2d(x.data, 3, 1, 1)
    expected = np.zeros(x.shape)
    for c in range(2):
        np.add.at(expected[0, c].reshape(-1), arg[0, c].reshape(-1), 1.0)
    assert np.array_equal(x.grad, expected)


def test_maxpool_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        T.maxpool2d(np.zeros((1, 1, 3, 3)), 5, 1, 0)


def test_global_pools():
    x = np.full((2, 3, 4, 5), 7.5)
    assert np.array_equal(T.global_avgpool(x).data, np.full((2, 3, 1, 1), 7.5))
    y = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    assert np.array_equal(T.global_maxpool(y).data[..., 0, 0], y.max(axis=(2, 3)))


# ---------------------------------------------------------- shape helpers


def test_upsample_replicates_and_sums():
    out = T.upsample_nearest2x(np.array([[[[5.0]]]]))
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 5.0)
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
    assert np.isclose(T.upsample_nearest2x(x).data.sum(), 4 * x.sum())


def test_concat_channels_shapes_and_split_gradient():
    a = T.Tensor(np.ones((1, 2, 4, 4)), requires_grad=True)
    b = T.Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    out = T.concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    weights = np.arange(5.0)[None, :, None, None]
    T.mul(out, weights).sum().backward()
    assert np.array_equal(a.grad, np.broadcast_to(weights[:, :2], a.shape))
    assert np.array_equal(b.grad, np.broadcast_to(weights[:, 2:], b.shape))
    assert np.array_equal(T.concat_channels(a).data, a.data)


def test_concat_channels_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5)))


def test_add_identity_and_commutativity(rng):
    a, b = rng.standard_normal((2, 2, 3, 4, 4))
    assert np.array_equal(T.add(a, np.zeros_like(a)).data, a)
    assert np.array_equal(T.add(a, b).data, T.add(b, a).data)


def test_numpy_left_operand_defers_to_tensor(rng):
    t = T.Tensor(rng.standard_normal(3), requires_grad=True)
    out = np.ones(3) - t * 2.0
    assert isinstance(out, T.Tensor)
    out.sum().backward()
    assert np.array_equal(t.grad, np.full(3, -2.0))


def test_gradient_accumulates_over_shared_use():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.item() == 5.0


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = T.is_grad_enabled()

    with T.no_grad():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        inside = T.is_grad_enabled()
        y = T.Tensor(np.ones(2), requires_grad=True) * 3.0
    assert seen["other"] is True and inside is False
    assert not y.requires_grad


# ------------------------------------------------------------- grad_check


def test_grad_check_of_sum_is_exact():
    rep = T.grad_check(lambda x: x, [T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))])
    assert rep.max_abs_error < 1e-9 and rep.passed


def test_grad_check_reports_failures():
    def broken(x):
        out = T.mul(x, 2.0)
        out._backward = lambda g: (g,)  # wrong by a factor of two
        return out

    rep = T.grad_check(broken, [T.Tensor(np.ones((1, 1, 2, 2)))], tol=1e-5)
    assert not rep.passed and rep.max_rel_error > 0.4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_aborts_on_non_finite():
    with pytest.raises(NumericError):
        T.grad_check(lambda x: T.log(x), [T.Tensor(-np.ones((1, 1, 2, 2)))])


OPS_1E5 = {
    "conv2d_input": lambda rng: (lambda x: T.conv2d(x, W3, pad=1), [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "conv2d_weight": lambda rng: (lambda w: T.conv2d(X236, w, pad=1), [T.Tensor(rng.standard_normal((4, 3, 3, 3)))]),
    "silu": lambda rng: (T.silu, [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "sigmoid": lambda rng: (T.sigmoid, [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "maxpool": lambda rng: (lambda x: T.maxpool2d(x, 3, 1, 1), [T.Tensor(rng.permutation(216).reshape(2, 3, 6, 6) * 0.1)]),
    "avgpool": lambda rng: (T.global_avgpool, [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "gmaxpool": lambda rng: (T.global_maxpool, [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "upsample": lambda rng: (T.upsample_nearest2x, [T.Tensor(rng.standard_normal((2, 3, 6, 6)))]),
    "batchnorm_train": lambda rng: (
        lambda x: T.mul(T.batchnorm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True), PROJ),
        [T.Tensor(rng.standard_normal((2, 3, 6, 6)))],
    ),
}
W3 = np.random.default_rng(99).standard_normal((4, 3, 3, 3))
X236 = np.random.default_rng(98).standard_normal((2, 3, 6, 6))
PROJ = np.random.default_rng(97).standard_normal((2, 3, 6, 6))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(OPS_1E5))
def test_op_gradients_at_1e5(backend, op, seed):
    fn, inputs = OPS_1E5[op](np.random.default_rng(seed))
    rep = T.grad_check(fn, inputs, tol=1e-5)
    assert rep.passed, rep


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 4), st.integers(3, 7), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 2**31)
)
def test_conv_output_shape_property(n, c, h, stride, k, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, h))
    out = T.conv2d(x, np.ones((2, c, k, k)), stride=stride, pad=k // 2)
    side = (h + 2 * (k // 2) - k) // stride + 1
    assert out.shape == (n, 2, side, side)
    assert np.isfinite(out.data).all()


# ------------------------------------------------------------------- HICT


def test_hict_round_trip(tmp_path, rng):
    a = rng.standard_normal((1, 3, 5, 7))
    T.save_tensor(tmp_path / "a.hict", a)
    assert np.array_equal(T.load_tensor(tmp_path / "a.hict"), a)
    raw = T.encode_tensor(a)
    assert raw[:4] == b"HICT" and raw[4] == 1 and len(raw) == 4 + 1 + 16 + 8 * a.size


def test_hict_errors(rng):
    raw = T.encode_tensor(rng.standard_normal((1, 1, 2, 2)))
    with pytest.raises(MagicError):
        T.decode_tensor(b"XXXX" + raw[4:])
    with pytest.raises(VersionError):
        T.decode_tensor(raw[:4] + b"\x07" + raw[5:])
    with pytest.raises(TruncatedError):
        T.decode_tensor(raw[:-3])
    with pytest.raises(TruncatedError):
        T.decode_tensor(raw[:10])
    with pytest.raises(ShapeError):
        T.encode_tensor(np.zeros((2, 2)))
