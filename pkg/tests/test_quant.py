import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repq import quant as Q
from repq import tensor as T
from repq.tensor import Tensor
from repq.verify import enumerated_product_bits


def scalar_quantizer(bits, signed, step):
    q = Q.QuantizerState(bits, signed, channel_axis=None)
    q.step = Tensor(np.array(step), requires_grad=True)
    q.initialized = True
    return q


def test_qrange():
    assert Q.qrange(4, True) == (-8, 7)
    assert Q.qrange(4, False) == (0, 15)
    with pytest.raises(ValueError):
        Q.QuantizerState(0, True)


def test_rounding_is_half_to_even():
    q = scalar_quantizer(8, True, 1.0)
    out = Q.quantize(Tensor(np.array([0.5, 1.5, 2.5, -0.5, -1.5])), q).data
    np.testing.assert_array_equal(out, [0.0, 2.0, 2.0, -0.0, -2.0])


def test_clamps_to_range():
    q = scalar_quantizer(3, False, 0.5)
    out = Q.quantize(Tensor(np.array([-3.0, 0.2, 1.0, 100.0])), q).data
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 3.5])


def test_uninitialized_quantizer_raises():
    with pytest.raises(Q.UninitializedQuantizerError):
        Q.quantize(Tensor(np.ones(3)), Q.QuantizerState(4, True))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.booleans(), st.integers(0, 2**31 - 1))
def test_lattice_idempotence_monotonicity(bits, signed, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(scale=rng.uniform(0.1, 5.0), size=(3, 3, 2, 4))
    q = Q.QuantizerState(bits, signed, channel_axis=-1)
    Q.min_error_init(v, q)
    out = Q.quantize(Tensor(v), q).data
    s = q.step.data.reshape(1, 1, 1, -1)
    k = out / s
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)
    assert k.min() >= q.qmin - 1e-9 and k.max() <= q.qmax + 1e-9
    np.testing.assert_array_equal(Q.quantize(Tensor(out), q).data, out)
    flat_v, flat_o = v.reshape(-1, 4), out.reshape(-1, 4)
    for c in range(4):
        order = np.argsort(flat_v[:, c])
        assert np.all(np.diff(flat_o[order, c]) >= 0)


def test_value_gradient_is_straight_through_inside_zero_outside():
    q = scalar_quantizer(4, True, 0.1)
    v = Tensor(np.array([-5.0, -0.33, 0.0, 0.21, 0.69, 5.0]), requires_grad=True)
    T.sum_all(Q.quantize(v, q)).backward()
    np.testing.assert_array_equal(v.grad, [0, 1, 1, 1, 1, 0])


def test_step_gradient_matches_lsq_formula():
    q = scalar_quantizer(4, True, 0.1)
    q.grad_scale = 0.5
    vals = np.array([-5.0, -0.33, 0.21, 5.0])
    T.sum_all(Q.quantize(Tensor(vals), q)).backward()
    ratio = vals / 0.1
    expected = 0.5 * ((-8) + (np.round(ratio[1]) - ratio[1]) + (np.round(ratio[2]) - ratio[2]) + 7)
    np.testing.assert_allclose(q.step.grad, expected)


def test_ste_gradients_against_smooth_surrogate():
    """Away from rounding ties (|frac| in [0.45, 0.55]) and the clamp edges, finite
    differences of ``s * (v/s + stop(round(v/s) - v/s))`` match the declared gradients."""
    rng = np.random.default_rng(0)
    s0 = 0.2
    v = rng.uniform(-1.4, 1.4, 400)
    frac = v / s0 - np.floor(v / s0)
    v = v[((frac < 0.45) | (frac > 0.55)) & (np.abs(v / s0) < 7.4)]
    c = rng.normal(size=v.shape)
    frozen = np.round(v / s0) - v / s0

    def surrogate(vv, ss):
        return np.sum(c * ss * (vv / ss + frozen))

    q = scalar_quantizer(4, True, s0)
    vt = Tensor(v, requires_grad=True)
    T.sum_all(Q.quantize(vt, q) * Tensor(c)).backward()
    h = 1e-6
    fd_s = (surrogate(v, s0 + h) - surrogate(v, s0 - h)) / (2 * h)
    np.testing.assert_allclose(q.step.grad / q.grad_scale, fd_s, rtol=1e-6)
    fd_v = np.array([(surrogate(v + h * e, s0) - surrogate(v - h * e, s0)) / (2 * h)
                     for e in np.eye(len(v))[:20]])
    np.testing.assert_allclose(vt.grad[:20], fd_v, rtol=1e-6)


def test_min_error_never_beaten_by_grid():
    rng = np.random.default_rng(1)
    for bits, signed in [(2, True), (3, False), (4, True), (8, True)]:
        v = np.abs(rng.standard_t(3, size=5000)) if not signed else rng.standard_t(3, size=5000)
        q = Q.QuantizerState(bits, signed, channel_axis=None)
        Q.min_error_init(v, q)
        limit = q.qmax if q.qmax > 0 else -q.qmin
        grid = Q.grid_candidates(np.max(np.abs(v)), limit)
        errs = Q.reconstruction_error(v, grid, q.qmin, q.qmax)
        chosen = Q.reconstruction_error(v, np.array([q.step.item()]), q.qmin, q.qmax)[0]
        assert chosen <= errs.min()


def test_min_error_includes_full_range_step():
    grid = Q.grid_candidates(3.0, 7)
    assert np.isclose(grid, 3.0 / 7).any()
    assert len(grid) == Q.GRID_SIZE + 1


def test_all_zero_channel_gets_floor_step():
    v = np.zeros((3, 3, 2, 3))
    v[..., 1] = np.random.default_rng(2).normal(size=(3, 3, 2))
    q = Q.QuantizerState(4, True, channel_axis=-1)
    Q.min_error_init(v, q)
    assert q.step.data[0] == Q.STEP_FLOOR and q.step.data[2] == Q.STEP_FLOOR
    np.testing.assert_array_equal(q.degenerate, [True, False, True])
    assert not Q.quantize(Tensor(v), q).data[..., 0].any()


def test_grad_scale_follows_elements_per_step():
    q = Q.QuantizerState(4, True, channel_axis=-1)
    Q.min_error_init(np.random.default_rng(3).normal(size=(3, 3, 8, 5)), q)
    assert np.isclose(q.grad_scale, 1 / np.sqrt(72 * 7))


@pytest.mark.parametrize("a,b,signed,expected", [(2, 2, False, 4), (1, 1, False, 1), (8, 8, False, 16),
                                                 (4, 4, True, 8), (8, 8, True, 16)])
def test_product_bits_examples(a, b, signed, expected):
    assert Q.product_bits(a, b, signed) == expected


@pytest.mark.parametrize("signed", [False, True])
def test_product_bits_matches_enumeration(signed):
    for a in range(1, 7):
        for b in range(1, 7):
            assert Q.product_bits(a, b, signed) == enumerated_product_bits(a, b, signed)


def test_product_bits_doubles_from_two_bits():
    assert [Q.product_bits(b, b) for b in range(2, 9)] == [2 * b for b in range(2, 9)]
    with pytest.raises(ValueError):
        Q.product_bits(0, 3)
