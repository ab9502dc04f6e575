import io
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclewalk.autodiff import (
    FormatError,
    Tensor,
    conv2d,
    grid_sample_bilinear,
    l2_normalize_nodes,
    matmul,
    no_grad,
    softmax_rows,
)
from cyclewalk.autodiff import reduce_sum as tsum
from cyclewalk.autodiff.serialize import decode_tensors, encode_tensor, write_tensors
from cyclewalk.transforms import base_grid

from grad_suite import N_INSTANCES, OP_TOL, op_gradient_errors


@pytest.fixture(scope="module")
def grad_errors():
    return op_gradient_errors(seed=0)


@pytest.mark.parametrize("op", ["conv2d", "conv2d_bias", "softmax_rows", "grid_sample_bilinear", "matmul",
                                "l2_normalize_nodes", "instance_norm", "relu", "log", "pad2d",
                                "elementwise"])
def test_gradients_match_finite_differences(grad_errors, op):
    errs = grad_errors[op]
    assert len(errs) >= N_INSTANCES
    assert max(errs) <= OP_TOL


# -- conv2d ----------------------------------------------------------------------


@pytest.mark.parametrize("pad", ["zero", "replicate", "reflect", "none"])
def test_conv_identity_kernel(pad):
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    y = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, pad)
    np.testing.assert_array_equal(y.data, x)


def test_conv_zero_input_gives_zero():
    k = np.random.default_rng(1).standard_normal((4, 2, 3, 3))
    y = conv2d(Tensor(np.zeros((2, 2, 6, 6))), Tensor(k), 1, "zero")
    assert not y.data.any()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    y = conv2d(Tensor(x), Tensor(k), 1, "zero").data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * k[o]).sum()
    np.testing.assert_allclose(y, ref, atol=1e-12)


@given(h=st.integers(3, 9), w=st.integers(3, 9), kh=st.sampled_from([1, 3]), kw=st.sampled_from([1, 3]))
@settings(max_examples=30, deadline=None)
def test_conv_none_padding_shape(h, w, kh, kw):
    y = conv2d(Tensor(np.ones((1, 1, h, w))), Tensor(np.ones((1, 1, kh, kw))), 1, "none")
    assert y.shape == (1, 1, h - kh + 1, w - kw + 1)


@pytest.mark.parametrize("pad", ["zero", "replicate", "reflect"])
def test_padded_modes_preserve_extent(pad):
    y = conv2d(Tensor(np.ones((1, 1, 7, 5))), Tensor(np.ones((2, 1, 3, 3))), 1, pad)
    assert y.shape == (1, 2, 7, 5)


def test_conv_errors():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), 1, "zero")
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), 1, "none")
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), 0, "zero")


# -- softmax ---------------------------------------------------------------------


def test_softmax_two_logits():
    y = softmax_rows(Tensor([[1.0, 0.0]]), 1.0).data
    np.testing.assert_allclose(y, [[0.731059, 0.268941]], atol=1e-5)
    np.testing.assert_allclose(y[0, 0], np.e / (np.e + 1), atol=1e-15)


def test_softmax_equal_logits_uniform():
    y = softmax_rows(Tensor(np.full((2, 7), 3.3)), 0.05).data
    np.testing.assert_allclose(y, 1 / 7)


@given(arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4)), st.floats(0.01, 10))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_stable_and_normalized(z, tau):
    y = softmax_rows(Tensor(z), tau).data
    assert np.all(np.isfinite(y)) and np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_tau(tau):
    with pytest.raises(ValueError):
        softmax_rows(Tensor(np.ones((2, 2))), tau)


def test_cross_entropy_through_softmax_gradient():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 5))
    target = rng.integers(0, 5, 4)
    t = Tensor(z, requires_grad=True)
    y = softmax_rows(t, 0.5)
    from cyclewalk.autodiff import index, log
    loss = tsum(log(index(y, (np.arange(4), target)))) * -1.0
    loss.backward()
    # closed form: (softmax - onehot) / tau
    p = np.exp(z / 0.5 - (z / 0.5).max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    ref = (p - np.eye(5)[target]) / 0.5
    np.testing.assert_allclose(t.grad, ref, atol=1e-10)


# -- grid sampling ---------------------------------------------------------------


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_identity_grid_is_identity(h, w, c):
    f = np.random.default_rng(h * 10 + w).standard_normal((c, h, w))
    out = grid_sample_bilinear(Tensor(f), Tensor(base_grid(h, w))).data
    np.testing.assert_allclose(out, f, atol=1e-6)


def test_out_of_range_grid_reads_zero():
    f = np.random.default_rng(0).standard_normal((2, 5, 5))
    out = grid_sample_bilinear(Tensor(f), Tensor(np.full((3, 4, 2), -5.0))).data
    assert not out.any()


def test_grid_sample_midpoint_is_average():
    f = np.arange(4.0).reshape(1, 2, 2)
    out = grid_sample_bilinear(Tensor(f), Tensor(np.zeros((1, 1, 2)))).data
    assert out[0, 0, 0] == pytest.approx(1.5)


def test_grid_last_extent_checked():
    with pytest.raises(ValueError):
        grid_sample_bilinear(Tensor(np.ones((1, 3, 3))), Tensor(np.zeros((2, 2, 3))))


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(3))).data, a)


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_stochastic_product_stays_stochastic(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, n)), rng.random((n, n))
    a /= a.sum(1, keepdims=True)
    b /= b.sum(1, keepdims=True)
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data.sum(1), 1.0, atol=1e-6)


# -- normalization ---------------------------------------------------------------


def test_l2_normalize_three_four():
    y = l2_normalize_nodes(Tensor(np.array([[[3.0, 4.0]]]))).data
    np.testing.assert_allclose(y, [[[0.6, 0.8]]])


def test_l2_normalize_zero_vector_stays_zero():
    x = Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    y = l2_normalize_nodes(x)
    assert not y.data.any()
    tsum(y).backward()
    assert np.all(np.isfinite(x.grad))


@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-5, 5)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=-1) > 1e-3)))
@settings(max_examples=40, deadline=None)
def test_l2_normalize_unit_and_idempotent(x):
    y = l2_normalize_nodes(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(l2_normalize_nodes(Tensor(y)).data, y, atol=1e-6)


# -- backward semantics ----------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_product_rule():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = Tensor(rng.standard_normal(5), requires_grad=True)
    tsum(x * y).backward()
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_second_backward_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(x * x)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_leaves_accumulate_across_graphs():
    x = Tensor(np.ones(2), requires_grad=True)
    tsum(x * 3.0).backward()
    tsum(x * 2.0).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    tsum(y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(16.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        x = Tensor(np.ones(2), requires_grad=True)
        seen.append((x * 2.0).requires_grad)

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [True]


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    tsum(y).backward()
    assert x.grad[0] == 1.0


# -- serialization ---------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_record_round_trip(dtype):
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    write_tensors(buf, [("block0.weight", a), ("scalar", np.array(1.5, dtype=dtype))])
    out, end = decode_tensors(buf.getvalue(), 2)
    assert end == len(buf.getvalue())
    np.testing.assert_array_equal(out["block0.weight"], a)
    assert out["block0.weight"].dtype == dtype
    assert out["scalar"].shape == ()


def test_tensor_record_layout():
    rec = encode_tensor("ab", np.array([1.0, 2.0], dtype=np.float32))
    assert rec[:4] == (2).to_bytes(4, "little")
    assert rec[4:6] == b"ab"
    assert rec[6] == 0  # f32 tag
    assert rec[7:11] == (1).to_bytes(4, "little")
    assert rec[11:15] == (2).to_bytes(4, "little")
    assert np.frombuffer(rec[15:], "<f4").tolist() == [1.0, 2.0]


def test_truncated_record_reports_offset():
    rec = encode_tensor("w", np.ones(4))
    with pytest.raises(FormatError) as err:
        decode_tensors(rec[:-3], 1)
    assert err.value.offset >= 0
