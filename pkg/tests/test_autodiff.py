"""Finite-difference checks for every autodiff primitive.

The numeric oracle perturbs one input entry at a time and never goes through
the tape, so it stays independent of the code it checks.
"""

import numpy as np
import pytest

from querytune import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at x, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def check_op(build, x, rtol=1e-6, atol=1e-8):
    """Compare tape gradient of sum(build(x)) against the numeric oracle."""

    def scalar(arr):
        return float(np.sum(ad.value(build(arr))))

    v = ad.Var(x.copy())
    out = build(v)
    total = ad.sum_(out)
    ad.backward(total)
    num = numeric_grad(scalar, x.copy())
    np.testing.assert_allclose(v.grad, num, rtol=rtol, atol=atol)


RNG = np.random.default_rng(7)


def test_dispatch_plain_arrays():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((3, 4))
    out = ad.add(a, b)
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, a + b)


def test_dispatch_var_infects_result():
    a = ad.Var(RNG.standard_normal((3, 4)))
    b = RNG.standard_normal((3, 4))
    assert isinstance(a + b, ad.Var)
    assert isinstance(b + a, ad.Var)
    assert isinstance(ad.silu(a), ad.Var)


def test_add_broadcast():
    x = RNG.standard_normal((2, 3, 4))
    check_op(lambda v: ad.add(v, RNG2), x)


RNG2 = np.random.default_rng(8).standard_normal((4,))


@pytest.mark.parametrize(
    "build",
    [
        lambda v: v + 2.0,
        lambda v: 3.0 - v,
        lambda v: v * np.linspace(0.5, 2.0, 12).reshape(3, 4),
        lambda v: v / 1.7,
        lambda v: 2.0 / (v + 5.0),
        lambda v: ad.power(v + 5.0, -0.5),
        lambda v: ad.power(v + 5.0, 2.0),
        lambda v: ad.exp(v * 0.3),
        lambda v: ad.sigmoid(v),
        lambda v: ad.silu(v),
        lambda v: ad.softmax(v, axis=-1),
        lambda v: ad.softmax(v, axis=0),
        lambda v: ad.reshape(v, (4, 3)),
        lambda v: ad.transpose(v, (1, 0)),
        lambda v: ad.sum_(v, axis=1),
        lambda v: ad.sum_(v, axis=0, keepdims=True),
        lambda v: ad.mean(v, axis=-1),
        lambda v: ad.mean(v),
        lambda v: ad.concat([v, v * 2.0], axis=1),
    ],
)
def test_elementwise_and_shape_ops(build):
    x = RNG.standard_normal((3, 4))
    check_op(build, x)


def test_matmul_both_sides():
    a = RNG.standard_normal((3, 5))
    b = RNG.standard_normal((5, 4))
    check_op(lambda v: ad.matmul(v, b), a)
    check_op(lambda v: ad.matmul(a, v), b)


def test_matmul_batched():
    a = RNG.standard_normal((2, 3, 5))
    b = RNG.standard_normal((5, 4))
    # broadcast on the right operand: gradient sums over the batch
    check_op(lambda v: ad.matmul(a, v), b)
    check_op(lambda v: ad.matmul(v, b), a)


def test_take_repeated_indices():
    table = RNG.standard_normal((6, 3))
    idx = np.array([0, 2, 2, 5])
    check_op(lambda v: ad.take(v, idx), table)


def test_take_2d_index():
    table = RNG.standard_normal((6, 3))
    idx = np.array([[0, 1], [1, 4]])
    check_op(lambda v: ad.take(v, idx), table)


def test_put_row_gradients():
    table = RNG.standard_normal((5, 3))
    row = RNG.standard_normal((3,))
    check_op(lambda v: ad.put_row(v, 2, row), table)
    check_op(lambda v: ad.put_row(table, 2, v) * np.arange(15.0).reshape(5, 3), row)


def test_put_row_value():
    table = RNG.standard_normal((5, 3))
    row = np.zeros(3)
    out = ad.put_row(table, 1, row)
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out[1], row)
    np.testing.assert_array_equal(out[0], table[0])
    # the input table is untouched
    assert not np.array_equal(table[1], row)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, pad):
    x = RNG.standard_normal((2, 6, 6, 3))
    w = RNG.standard_normal((3, 3, 3, 4)) * 0.3
    b = RNG.standard_normal((4,))
    check_op(lambda v: ad.conv2d(v, w, b, stride=stride, pad=pad), x, rtol=1e-5, atol=1e-7)
    check_op(lambda v: ad.conv2d(x, v, b, stride=stride, pad=pad), w, rtol=1e-5, atol=1e-7)
    check_op(lambda v: ad.conv2d(x, w, v, stride=stride, pad=pad), b)


def test_upsample2x():
    x = RNG.standard_normal((2, 3, 3, 2))
    check_op(lambda v: ad.upsample2x(v) * RNG3, x)


RNG3 = np.random.default_rng(9).standard_normal((2, 6, 6, 2))


def test_layer_norm():
    x = RNG.standard_normal((4, 6))
    gamma = RNG.standard_normal((6,)) * 0.5 + 1.0
    beta = RNG.standard_normal((6,))
    check_op(lambda v: ad.layer_norm(v, gamma, beta), x, rtol=1e-5, atol=1e-7)
    check_op(lambda v: ad.layer_norm(x, v, beta), gamma, rtol=1e-5, atol=1e-7)
    check_op(lambda v: ad.layer_norm(x, gamma, v), beta)


def test_group_norm():
    x = RNG.standard_normal((2, 4, 4, 6))
    gamma = RNG.standard_normal((6,)) * 0.5 + 1.0
    beta = RNG.standard_normal((6,))
    check_op(lambda v: ad.group_norm(v, 2, gamma, beta), x, rtol=1e-5, atol=1e-7)
    check_op(lambda v: ad.group_norm(x, 3, v, beta), gamma, rtol=1e-5, atol=1e-7)


def test_shared_node_accumulates():
    # y = x*x via two separate references to the same Var
    v = ad.Var(np.array([3.0]))
    out = ad.sum_(v * v)
    ad.backward(out)
    np.testing.assert_allclose(v.grad, [6.0])


def test_softmax_rows_sum_to_one():
    x = RNG.standard_normal((5, 7)) * 3.0
    s = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)


def test_values_identical_with_and_without_tape():
    x = RNG.standard_normal((2, 4, 4, 3))
    w = RNG.standard_normal((3, 3, 3, 5)) * 0.2

    def net(a):
        h = ad.conv2d(a, w, None, stride=1, pad=1)
        h = ad.silu(h)
        return ad.mean(h)

    plain = net(x)
    taped = net(ad.Var(x))
    assert float(plain) == float(taped.value)
