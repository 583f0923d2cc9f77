import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repq import batchnorm as bn
from repq import reparam as R
from repq import tensor as T
from repq.tensor import Tensor
from repq.verify import diagonal_covariance_input


def randomize(block, rng):
    for _, s in block.bn_states():
        s.gamma.data[:] = rng.uniform(0.5, 1.5, s.channels)
        s.beta.data[:] = rng.normal(size=s.channels)
        s.running_mean[:] = rng.normal(size=s.channels)
        s.running_var[:] = rng.uniform(0.5, 2.0, s.channels)


def merged_out(block, x, mode, stats="exact"):
    M, b = R.merged_weight(block, x, mode, stats, update=False)
    return T.conv2d(x, M, "same") + b


def test_identity_kernel_is_dirac():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 3)))
    for target in [(1, 1), (3, 3), (5, 3)]:
        np.testing.assert_array_equal(T.conv2d(x, R.identity_kernel(3, target), "same").data, x.data)
    with pytest.raises(ValueError):
        R.identity_kernel(3, (2, 2))


def test_parallel_merge_of_conv_and_identity_adds_dirac():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 3, 2, 2)))
    merged = R.merge_parallel([w, R.identity_kernel(2)], (3, 3)).data
    expected = w.data.copy()
    expected[1, 1] += np.eye(2)
    np.testing.assert_array_equal(merged, expected)


@pytest.mark.parametrize("shapes", [((3, 3), (1, 1)), ((1, 1), (3, 3)), ((1, 3), (1, 1)), ((1, 1), (1, 1))])
def test_sequential_merge_matches_two_convs(shapes):
    rng = np.random.default_rng(2)
    (a, b), (c, d) = shapes
    w1, w2 = Tensor(rng.normal(size=(a, b, 3, 4))), Tensor(rng.normal(size=(c, d, 4, 2)))
    x = Tensor(rng.normal(size=(2, 6, 6, 3)))
    two = T.conv2d(T.conv2d(x, w1), w2)
    one = T.conv2d(x, R.merge_sequential(w1, w2))
    np.testing.assert_allclose(one.data, two.data, atol=1e-12)


def test_sequential_merge_32bit_relative_tolerance():
    rng = np.random.default_rng(3)
    w1 = Tensor(rng.normal(size=(3, 3, 4, 6)).astype(np.float32))
    w2 = Tensor(rng.normal(size=(1, 1, 6, 5)).astype(np.float32))
    x = Tensor(rng.normal(size=(2, 7, 7, 4)).astype(np.float32))
    two, one = T.conv2d(T.conv2d(x, w1), w2).data, T.conv2d(x, R.merge_sequential(w1, w2)).data
    assert np.max(np.abs(one - two)) / np.max(np.abs(two)) < 1e-5


def test_two_large_kernels_do_not_compose():
    with pytest.raises(R.CompositionError):
        R.merge_sequential(Tensor(np.ones((3, 3, 1, 1))), Tensor(np.ones((3, 3, 1, 1))))
    with pytest.raises(R.CompositionError):
        R.ReparamBlock([R.Branch([R.Conv(Tensor(np.ones((3, 3, 1, 1)))),
                                  R.Conv(Tensor(np.ones((3, 3, 1, 1))))])], 1, 1, (5, 5))


def test_block_validation():
    with pytest.raises(ValueError):
        R.ReparamBlock([], 1, 1)
    with pytest.raises(ValueError):
        R.ReparamBlock([R.Branch([R.Conv(Tensor(np.ones((5, 5, 1, 1))))])], 1, 1, (3, 3))
    with pytest.raises(T.ShapeError):
        R.ReparamBlock([R.Branch([R.Conv(Tensor(np.ones((3, 3, 2, 1))))])], 1, 1)
    with pytest.raises(ValueError):
        R.make_block("conv_identity", 2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        R.make_block("octopus", 2, 2, np.random.default_rng(0))


@pytest.mark.parametrize("topology", R.TOPOLOGIES)
@pytest.mark.parametrize("mode", ["train", "eval"])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-9), (np.float32, 1e-4)])
def test_merged_path_matches_expanded_block(topology, mode, dtype, tol):
    rng = np.random.default_rng(4)
    block = R.make_block(topology, 4, 4, rng, dtype=dtype)
    randomize(block, rng)
    x = Tensor(rng.normal(size=(3, 7, 7, 4)).astype(dtype))
    ref = R.block_forward_expanded(block, x, mode, update=False)
    assert np.max(np.abs(merged_out(block, x, mode).data - ref.data)) <= tol


def test_repvgg_with_channel_change_has_no_identity_branch():
    block = R.make_block("repvgg", 3, 5, np.random.default_rng(5), dtype=np.float64)
    assert len(block.branches) == 2
    x = Tensor(np.random.default_rng(6).normal(size=(2, 5, 5, 3)))
    ref = R.block_forward_expanded(block, x, "train", update=False)
    np.testing.assert_allclose(merged_out(block, x, "train").data, ref.data, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(R.TOPOLOGIES), st.integers(1, 3), st.integers(3, 6))
def test_merged_equivalence_property(seed, topology, batch, size):
    rng = np.random.default_rng(seed)
    block = R.make_block(topology, 3, 3, rng, dtype=np.float64)
    randomize(block, rng)
    x = Tensor(rng.normal(size=(batch, size, size, 3)))
    for mode in ("train", "eval"):
        ref = R.block_forward_expanded(block, x, mode, update=False)
        np.testing.assert_allclose(merged_out(block, x, mode).data, ref.data, atol=1e-9)


@pytest.mark.parametrize("topology", ["conv_bn", "acnet", "repvgg", "chain"])
def test_merged_gradients_match_expanded(topology):
    rng = np.random.default_rng(7)
    block = R.make_block(topology, 3, 3, rng, dtype=np.float64)
    randomize(block, rng)
    x = Tensor(rng.normal(size=(2, 5, 5, 3)), requires_grad=True)
    proj = rng.normal(size=(2, 5, 5, 3))
    grads = []
    for fn in (lambda: R.block_forward_expanded(block, x, "train", update=False),
               lambda: merged_out(block, x, "train")):
        for _, p in block.parameters():
            p.grad = None
        x.grad = None
        T.sum_all(fn() * proj).backward()
        grads.append([x.grad.copy()] + [p.grad.copy() for _, p in block.parameters()])
    scale = max(np.max(np.abs(g)) for g in grads[0])
    for ge, gm in zip(*grads):
        assert np.max(np.abs(ge - gm)) / scale < 1e-10


def test_running_stats_update_identically_on_both_paths():
    rng = np.random.default_rng(8)
    a = R.make_block("repvgg", 3, 3, np.random.default_rng(9), dtype=np.float64)
    b = R.make_block("repvgg", 3, 3, np.random.default_rng(9), dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 6, 6, 3)))
    R.block_forward_expanded(a, x, "train")
    R.merged_weight(b, x, "train")
    for (_, sa), (_, sb) in zip(a.bn_states(), b.bn_states()):
        np.testing.assert_allclose(sa.running_mean, sb.running_mean, atol=1e-12)
        np.testing.assert_allclose(sa.running_var, sb.running_var, atol=1e-12)


def test_eval_fold_of_bn_branch_matches_closed_form():
    rng = np.random.default_rng(10)
    block = R.make_block("conv_bn", 2, 3, rng, dtype=np.float64)
    randomize(block, rng)
    w = block.branches[0].layers[0].weight.data
    s = block.branches[0].layers[1].state
    M, b = R.merged_weight(block, None, "eval")
    scale = s.gamma.data / np.sqrt(s.running_var + s.eps)
    np.testing.assert_allclose(M.data, w * scale, atol=1e-14)
    np.testing.assert_allclose(b.data, s.beta.data - s.running_mean * scale, atol=1e-14)


def test_zero_weights_leave_only_bn_shifts():
    rng = np.random.default_rng(11)
    block = R.make_block("acnet", 2, 2, rng, dtype=np.float64)
    randomize(block, rng)
    for br in block.branches:
        br.layers[0].weight.data[:] = 0.0
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    M, b = R.merged_weight(block, x, "eval")
    assert not M.data.any()
    expected = sum(br.layers[1].state.beta.data - br.layers[1].state.running_mean
                   * br.layers[1].state.gamma.data / np.sqrt(br.layers[1].state.running_var + 1e-5)
                   for br in block.branches)
    np.testing.assert_allclose(b.data, expected, atol=1e-12)


def test_identity_bn_branch_with_constant_channel_stays_finite():
    rng = np.random.default_rng(12)
    block = R.make_block("repvgg", 2, 2, rng, dtype=np.float64)
    x = rng.normal(size=(2, 5, 5, 2))
    x[..., 1] = 0.7  # zero-variance channel; eps keeps the fold finite
    x = Tensor(x)
    ref = R.block_forward_expanded(block, x, "train", update=False)
    np.testing.assert_allclose(merged_out(block, x, "train").data, ref.data, atol=1e-9)


def test_estimate_mode_exact_for_pointwise_branch_on_uncorrelated_channels():
    rng = np.random.default_rng(13)
    branches = [R.Branch([R.Conv(Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)),
                          R.BN(bn.BNState.create(3, dtype=np.float64))])]
    block = R.ReparamBlock(branches, 3, 3, (1, 1))
    x = diagonal_covariance_input(4, 4, 4, 3, rng)
    np.testing.assert_allclose(merged_out(block, x, "train", "estimate").data,
                               merged_out(block, x, "train", "exact").data, atol=1e-12)


def test_scale_layer_folds():
    rng = np.random.default_rng(14)
    block = R.ReparamBlock([R.Branch([R.Conv(Tensor(rng.normal(size=(3, 3, 2, 2)))),
                                      R.Scale(Tensor(np.array([2.0, -0.5])))]),
                            R.Branch([R.Scale(Tensor(np.array([0.3, 0.1])))])], 2, 2)
    x = Tensor(rng.normal(size=(1, 5, 5, 2)))
    ref = R.block_forward_expanded(block, x, "eval")
    np.testing.assert_allclose(merged_out(block, x, "eval").data, ref.data, atol=1e-12)


def test_train_mode_bn_needs_input():
    block = R.make_block("conv_bn", 2, 2, np.random.default_rng(15))
    with pytest.raises(ValueError):
        R.merged_weight(block, None, "train")
