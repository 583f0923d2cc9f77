import numpy as np
import pytest

from repq import batchnorm as bn
from repq import tensor as T
from repq.tensor import ShapeError, Tensor
from repq.verify import diagonal_covariance_input


def random_state(rng, c, dtype=np.float64):
    st = bn.BNState.create(c, dtype=dtype)
    st.gamma.data[:] = rng.uniform(0.5, 2.0, c)
    st.beta.data[:] = rng.normal(size=c)
    st.running_mean[:] = rng.normal(size=c)
    st.running_var[:] = rng.uniform(0.5, 2.0, c)
    return st


def test_fixed_point_when_input_already_normalized():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(4, 6, 6, 3))
    y = (y - y.mean(axis=(0, 1, 2))) / y.std(axis=(0, 1, 2))
    st = bn.BNState.create(3, dtype=np.float64, eps=1e-5)
    y = y * np.sqrt(1 - st.eps)  # so that var + eps == 1
    out = bn.bn_forward(Tensor(y), st, "train", update=False)
    np.testing.assert_allclose(out.data, y, atol=1e-12)


def test_zero_gamma_gives_constant_beta():
    st = bn.BNState.create(2, dtype=np.float64)
    st.gamma.data[:] = 0.0
    st.beta.data[:] = [0.3, -1.0]
    out = bn.bn_forward(Tensor(np.random.default_rng(1).normal(size=(2, 3, 3, 2))), st, "train")
    np.testing.assert_array_equal(out.data[..., 0], 0.3)
    np.testing.assert_array_equal(out.data[..., 1], -1.0)


def test_running_update_follows_momentum():
    rng = np.random.default_rng(2)
    st = random_state(rng, 3)
    mu0, var0 = st.running_mean.copy(), st.running_var.copy()
    y = rng.normal(2.0, 3.0, size=(5, 4, 4, 3))
    bn.bn_forward(Tensor(y), st, "train")
    m = st.momentum
    np.testing.assert_allclose(st.running_mean, (1 - m) * mu0 + m * y.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(st.running_var, (1 - m) * var0 + m * y.var(axis=(0, 1, 2)))


def test_eval_mode_leaves_running_stats_alone():
    rng = np.random.default_rng(3)
    st = random_state(rng, 2)
    before = st.running_mean.copy()
    bn.bn_forward(Tensor(rng.normal(size=(2, 3, 3, 2))), st, "eval")
    np.testing.assert_array_equal(st.running_mean, before)


@pytest.mark.parametrize("mode", ["train", "eval"])
@pytest.mark.parametrize("k", [1, 3])
def test_fold_reproduces_bn_of_conv(mode, k):
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 6, 6, 4)))
    w = Tensor(rng.normal(size=(k, k, 4, 5)))
    st = random_state(rng, 5)
    y = T.conv2d(x, w)
    ref = bn.bn_forward(y, st, mode, update=False)
    mu, var = bn.batch_stats(y) if mode == "train" else (st.running_mean, st.running_var)
    M, b = bn.bn_fold(w, mu, var, st)
    np.testing.assert_allclose((T.conv2d(x, M) + b).data, ref.data, atol=1e-12)


def test_fold_with_tiny_variance_channel():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 5, 5, 1)))
    w = Tensor(np.stack([np.full((3, 3, 1), 1e-3 / 3), rng.normal(size=(3, 3, 1))], axis=-1))
    y = T.conv2d(x, w)
    st = random_state(rng, 2)
    _, var = bn.batch_stats(y)
    assert var.data[0] < 1e-5
    ref = bn.bn_forward(y, st, "train", update=False)
    M, b = bn.bn_fold(w, *bn.batch_stats(y), st)
    np.testing.assert_allclose((T.conv2d(x, M) + b).data, ref.data, atol=1e-10)


def test_fold_rejects_negative_variance_and_bad_shapes():
    st = bn.BNState.create(2, dtype=np.float64)
    w = Tensor(np.ones((1, 1, 1, 2)))
    with pytest.raises(ValueError):
        bn.bn_fold(w, np.zeros(2), np.array([1.0, -1.0]), st)
    with pytest.raises(ShapeError):
        bn.bn_fold(Tensor(np.ones((1, 1, 1, 3))), np.zeros(2), np.ones(2), st)
    with pytest.raises(ShapeError):
        bn.bn_forward(Tensor(np.ones((1, 2, 2, 3))), st)


def test_state_validation():
    with pytest.raises(ValueError):
        bn.BNState.create(2, momentum=0.0)
    with pytest.raises(ValueError):
        bn.BNState.create(2, eps=0.0)


def test_estimated_mean_exact_for_pointwise_kernels():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(3, 5, 5, 4)))
    w = Tensor(rng.normal(size=(1, 1, 4, 6)))
    np.testing.assert_allclose(bn.bn_est_mean(x, w).data, T.mean_bhd(T.conv2d(x, w)).data, atol=1e-12)


def test_estimated_mean_exact_for_constant_input():
    x = Tensor(np.full((2, 7, 7, 3), -0.4))
    w = Tensor(np.random.default_rng(7).normal(size=(3, 3, 3, 4)))
    np.testing.assert_allclose(bn.bn_est_mean(x, w).data, T.mean_bhd(T.conv2d(x, w)).data, atol=1e-12)


def test_estimated_variance_nonnegative_and_exact_for_uncorrelated_channels():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = Tensor(rng.normal(size=(2, 4, 4, 3)))
        assert np.all(bn.bn_est_var(x, Tensor(rng.normal(size=(3, 3, 3, 5)))).data >= 0)
    x = diagonal_covariance_input(4, 4, 4, 5, rng)
    cov = np.cov(x.data.reshape(-1, 5).T, bias=True)
    np.testing.assert_allclose(cov, np.diag(np.diag(cov)), atol=1e-12)
    w = Tensor(rng.normal(size=(1, 1, 5, 3)))
    np.testing.assert_allclose(bn.bn_est_var(x, w).data, T.var_bhd(T.conv2d(x, w)).data, atol=1e-12)


def test_estimated_variance_misses_cross_covariance():
    rng = np.random.default_rng(12)
    base = rng.normal(size=(2, 4, 4, 1))
    x = Tensor(np.concatenate([base, base], axis=-1))  # perfectly correlated channels
    w = Tensor(np.ones((1, 1, 2, 1)))
    exact, est = T.var_bhd(T.conv2d(x, w)).data, bn.bn_est_var(x, w).data
    np.testing.assert_allclose(exact, 2 * est, rtol=1e-12)


def test_estimate_fold_updates_running_stats_with_estimates():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(1.0, 2.0, size=(3, 6, 6, 2)))
    w = Tensor(rng.normal(size=(3, 3, 2, 3)))
    st = bn.BNState.create(3, dtype=np.float64, momentum=1.0)
    bn.bn_est_forward(x, w, st, "train")
    np.testing.assert_allclose(st.running_mean, bn.bn_est_mean(x, w).data)
    np.testing.assert_allclose(st.running_var, bn.bn_est_var(x, w).data)


def test_estimate_never_builds_the_conv_output():
    rng = np.random.default_rng(10)
    x, w = Tensor(rng.normal(size=(4, 8, 8, 16))), Tensor(rng.normal(size=(3, 3, 16, 32)))
    with T.count_ops() as c:
        bn.bn_est_forward(x, w, bn.BNState.create(32, dtype=np.float64), "train", update=False)
    assert "conv2d" not in c.counts
    # B*H*D*IN for the input variance, Kh*Kw*IN*OUT for squaring W, two IN x OUT products,
    # and the OUT-sized fold itself
    assert c.total <= 4 * 8 * 8 * 16 + 3 * 3 * 16 * 32 + 2 * 16 * 32 + 2 * 3 * 3 * 16 * 32 + 10 * 32


def test_edge_effect_shrinks_with_map_size():
    rng = np.random.default_rng(11)
    errs = []
    for H in (8, 16, 32, 64):
        e = []
        for _ in range(10):
            x = Tensor(rng.normal(0.5, 1.0, size=(2, H, H, 2)))
            w = Tensor(rng.normal(size=(3, 3, 2, 2)))
            exact = T.mean_bhd(T.conv2d(x, w, "same")).data
            e.append(np.median(np.abs(bn.bn_est_mean(x, w).data - exact) / np.abs(exact)))
        errs.append(np.median(e))
    assert errs[-1] < errs[0]
