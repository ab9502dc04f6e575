import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclewalk.autodiff import Tensor
from cyclewalk.encoder import FeatureMap
from cyclewalk.transforms import AffineTransform, TransformParams, compose_forward_backward, compute_mask, \
    sample_transform
from cyclewalk.walk import (
    PalindromeBatch,
    affinity,
    masked_cycle_loss,
    multi_cycle_loss,
    naive_multi_cycle_loss,
    palindrome_transition,
    warp_start,
)

I = AffineTransform.identity()


def unit_nodes(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def affinity_oracle(a, b, tau):
    """Per-entry evaluation: exp(<a_i, b_j>/tau) / sum_j'."""
    a, b = a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        row = [math.exp(float(a[i] @ b[j]) / tau) for j in range(len(b))]
        s = sum(row)
        out[i] = [r / s for r in row]
    return out


# -- affinity ---------------------------------------------------------------------


def test_self_affinity_argmax_on_diagonal():
    f = unit_nodes(np.random.default_rng(0), (4, 4, 8))
    A = affinity(Tensor(f), Tensor(f), 0.05).data
    assert np.all(A.argmax(axis=1) == np.arange(16))


def test_identical_nodes_give_uniform_rows():
    f = np.tile(unit_nodes(np.random.default_rng(1), (1, 1, 5)), (3, 3, 1))
    np.testing.assert_allclose(affinity(Tensor(f), Tensor(f), 0.05).data, 1 / 9, atol=1e-12)


def test_three_node_affinity_matches_direct_evaluation():
    a = np.array([[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]])
    b = np.array([[[0.8, 0.6], [-1.0, 0.0], [0.0, -1.0]]])
    np.testing.assert_allclose(affinity(Tensor(a), Tensor(b), 0.5).data, affinity_oracle(a, b, 0.5),
                               atol=1e-12)


@given(st.integers(0, 10**6), st.floats(0.01, 2.0))
@settings(max_examples=40, deadline=None)
def test_affinity_row_stochastic(seed, tau):
    rng = np.random.default_rng(seed)
    A = affinity(Tensor(unit_nodes(rng, (3, 4, 6))), Tensor(unit_nodes(rng, (3, 4, 6))), tau).data
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(1), 1.0, atol=1e-5)


def test_affinity_shape_mismatch():
    with pytest.raises(ValueError):
        affinity(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 3, 3))), 0.1)


# -- palindrome -------------------------------------------------------------------


def make_batch(rng, T=3, grid=(3, 3), C=6, tau=0.5, B_fb=I, mask=None):
    fwd = [FeatureMap(Tensor(unit_nodes(rng, grid + (C,))), t) for t in range(T)]
    bwd = [FeatureMap(Tensor(unit_nodes(rng, grid + (C,))), t, "backward") for t in range(T)]
    mask = np.ones(grid, bool) if mask is None else mask
    return PalindromeBatch(fwd, bwd, B_fb, mask, tau)


def test_palindrome_equals_product_of_oracle_affinities():
    rng = np.random.default_rng(2)
    b = make_batch(rng, T=3)
    seq = [f.values.data for f in b.forward] + [f.values.data for f in b.backward[::-1]]
    ref = np.eye(9)
    for x, y in zip(seq[:-1], seq[1:]):
        ref = ref @ affinity_oracle(x, y, b.tau)
    np.testing.assert_allclose(palindrome_transition(b).data, ref, atol=1e-12)


def test_identical_features_palindrome_is_diagonal_dominant():
    f = unit_nodes(np.random.default_rng(3), (3, 3, 16))
    maps = [FeatureMap(Tensor(f)) for _ in range(2)]
    A = palindrome_transition(PalindromeBatch(maps, maps, I, np.ones((3, 3), bool), 0.01)).data
    assert np.all(A.argmax(1) == np.arange(9))
    np.testing.assert_allclose(A.sum(1), 1.0, atol=1e-5)


def test_one_hot_features_give_exact_identity():
    # orthonormal nodes at tiny tau make every transition the identity
    f = np.eye(4).reshape(2, 2, 4)
    maps = [FeatureMap(Tensor(f)) for _ in range(3)]
    A = palindrome_transition(PalindromeBatch(maps, maps, I, np.ones((2, 2), bool), 1e-3)).data
    np.testing.assert_array_equal(A, np.eye(4))


def test_batch_validation():
    rng = np.random.default_rng(4)
    f = [FeatureMap(Tensor(unit_nodes(rng, (2, 2, 3))))]
    with pytest.raises(ValueError):
        PalindromeBatch(f, f, I, np.ones((2, 2)))
    g = [FeatureMap(Tensor(unit_nodes(rng, (2, 3, 3)))) for _ in range(2)]
    with pytest.raises(ValueError):
        PalindromeBatch(f * 2, g, I, np.ones((2, 2)))


def test_warp_start_renormalizes_valid_and_zeroes_rest():
    rng = np.random.default_rng(5)
    f = unit_nodes(rng, (6, 6, 4))
    B = sample_transform(rng, TransformParams((0.3, 0.6)))
    mask = compute_mask(B, (6, 6))
    w = warp_start(Tensor(f), B, mask).data
    norms = np.linalg.norm(w, axis=-1)
    np.testing.assert_allclose(norms[mask], 1.0, atol=1e-9)
    assert not norms[~mask].any()


# -- loss -------------------------------------------------------------------------


def test_identity_cycle_has_zero_loss():
    # the log guard contributes -log(1 + 1e-12), i.e. about -1e-12
    assert abs(float(masked_cycle_loss(Tensor(np.eye(16)), np.ones(16)).data)) <= 1e-9


def test_uniform_cycle_loss_is_log_n():
    loss = float(masked_cycle_loss(Tensor(np.full((16, 16), 1 / 16)), np.ones(16)).data)
    assert abs(loss - math.log(16)) <= 1e-9


def test_zero_mask_gives_zero_loss():
    A = np.random.default_rng(6).dirichlet(np.ones(16), 16)
    assert float(masked_cycle_loss(Tensor(A), np.zeros(16)).data) == 0.0


def test_grid_vs_mask_normalization():
    A = np.full((4, 4), 0.25)
    m = np.array([1, 1, 0, 0])
    grid = float(masked_cycle_loss(Tensor(A), m).data)
    frac = float(masked_cycle_loss(Tensor(A), m, normalize="mask").data)
    assert grid == pytest.approx(math.log(4) / 2)
    assert frac == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        masked_cycle_loss(Tensor(A), m, normalize="sum")


def test_loss_strictly_monotone_in_diagonal():
    rng = np.random.default_rng(7)
    A = rng.dirichlet(np.ones(9), 9)
    mask = np.ones(9)
    base = float(masked_cycle_loss(Tensor(A), mask).data)
    for i in range(9):
        B = A.copy()
        B[i, i] += 0.05
        assert float(masked_cycle_loss(Tensor(B), mask).data) < base


def test_multi_cycle_single_term_for_t2():
    rng = np.random.default_rng(8)
    b = make_batch(rng, T=2)
    single = masked_cycle_loss(palindrome_transition(b), b.mask.reshape(-1))
    total = multi_cycle_loss(b.forward, b.backward, I, b.mask, b.tau)
    assert float(total.data) == pytest.approx(float(single.data), abs=1e-12)


@pytest.mark.parametrize("T", [2, 3, 4, 5])
def test_multi_cycle_matches_naive_recomputation(T):
    rng = np.random.default_rng(T)
    bf, bb = sample_transform(rng, TransformParams()), sample_transform(rng, TransformParams())
    b_fb = compose_forward_backward(bf, bb)
    mask = compute_mask(b_fb, (4, 4))
    b = make_batch(rng, T=T, grid=(4, 4), B_fb=b_fb, mask=mask)
    fast = float(multi_cycle_loss(b.forward, b.backward, b_fb, mask, b.tau).data)
    naive = float(naive_multi_cycle_loss(b.forward, b.backward, b_fb, mask, b.tau).data)
    assert fast == pytest.approx(naive, rel=1e-10, abs=1e-12)


def test_batched_loss_is_mean_of_items():
    rng = np.random.default_rng(9)
    f = unit_nodes(rng, (3, 4, 3, 3, 5))
    b = unit_nodes(rng, (3, 4, 3, 3, 5))
    ts = [compose_forward_backward(sample_transform(rng, TransformParams()), sample_transform(rng, TransformParams()))
          for _ in range(3)]
    masks = np.stack([compute_mask(t, (3, 3)) for t in ts])
    batched = float(multi_cycle_loss(Tensor(f), Tensor(b), ts, masks, 0.1).data)
    items = [float(multi_cycle_loss(Tensor(f[i]), Tensor(b[i]), ts[i], masks[i], 0.1).data) for i in range(3)]
    assert batched == pytest.approx(np.mean(items), rel=1e-12)


def test_loss_finite_and_positive_at_random_features():
    rng = np.random.default_rng(10)
    b = make_batch(rng, T=4, grid=(4, 4), tau=0.05)
    loss = float(multi_cycle_loss(b.forward, b.backward, I, b.mask, b.tau).data)
    assert np.isfinite(loss) and loss > 0


def test_loss_invariant_to_node_relabeling():
    rng = np.random.default_rng(11)
    T, H, W, C = 3, 3, 3, 4
    f = unit_nodes(rng, (T, H, W, C))
    b = unit_nodes(rng, (T, H, W, C))
    mask = rng.random((H, W)) < 0.7
    perm = rng.permutation(H * W)

    def permute(x):
        return x.reshape(T, H * W, C)[:, perm].reshape(T, H, W, C)

    # with B_fb = identity the start warp is the identity, so relabeling commutes with it
    a = float(multi_cycle_loss(Tensor(f), Tensor(b), I, mask, 0.2).data)
    p = float(multi_cycle_loss(Tensor(permute(f)), Tensor(permute(b)), I,
                               mask.reshape(-1)[perm].reshape(H, W), 0.2).data)
    assert p == pytest.approx(a, rel=1e-12)


def test_cycle_length_one_rejected():
    f = Tensor(unit_nodes(np.random.default_rng(12), (1, 2, 2, 3)))
    with pytest.raises(ValueError):
        multi_cycle_loss(f, f, I, np.ones((2, 2)), 0.1)


def test_affinity_count_is_linear_in_t(monkeypatch):
    import cyclewalk.walk as walk
    calls = []
    real = walk.softmax_rows

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(walk, "softmax_rows", counting)
    rng = np.random.default_rng(13)
    counts = []
    for T in (4, 8):
        calls.clear()
        b = make_batch(rng, T=T, grid=(2, 2))
        multi_cycle_loss(b.forward, b.backward, I, b.mask, b.tau)
        counts.append(len(calls))
    # batched softmax calls do not grow with T at all
    assert counts[0] == counts[1]
