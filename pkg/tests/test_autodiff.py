"""Finite-difference checks for every tape operation.

Each op is exercised through a scalar objective; the analytic gradient
from the tape must match central differences to a few parts in 1e-6.
"""

import numpy as np
import pytest

from diffshape import autodiff as ad


def fd_grad(fn, x, h=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check(build, x0, rtol=2e-5, h=1e-6):
    """build(leaf) -> scalar Var; compares tape gradient with differences."""
    x0 = np.asarray(x0, dtype=float)

    def objective(x):
        return float(build(ad.wrap(x.copy())).value)

    v = ad.leaf(x0.copy())
    out = build(v)
    grads = ad.gradients(out, {"x": v})
    num = fd_grad(objective, x0, h=h)
    scale = max(np.abs(num).max(), 1e-8)
    assert np.abs(grads["x"] - num).max() <= rtol * scale


def test_arithmetic_chain():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0
    check(lambda x: ad.sum_((x * 2.0 + 1.5 - x / b) * x - b / (x + 10.0)), a)


def test_reflected_operators_with_ndarray_on_left():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3))
    c = rng.standard_normal((2, 3))
    check(lambda x: ad.sum_(c * x + c - x), a)
    # numpy must not broadcast a Var elementwise into an object array
    v = ad.leaf(a)
    out = c * v
    assert isinstance(out, ad.Var)
    assert out.value.shape == (2, 3)


def test_broadcasting_gradients_accumulate():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((1, 4))
    w = rng.standard_normal((3, 4))
    check(lambda x: ad.sum_(x + np.ones((3, 4))), a)
    check(lambda x: ad.sum_(x * w), a)
    check(lambda x: ad.sum_(ad.reshape(x, (4,)) * np.ones((2, 5, 4))), a)


def test_elementwise_functions():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 2.0, size=(4, 3))
    check(lambda x: ad.sum_(ad.exp(-x)), a)
    check(lambda x: ad.sum_(ad.log(x)), a)
    check(lambda x: ad.sum_(ad.sqrt(x)), a)
    check(lambda x: ad.sum_(ad.square(x)), a)
    check(lambda x: ad.sum_(x ** 3), a)


def test_sum_axis_and_keepdims():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 4, 2))
    w = rng.standard_normal((3, 1, 2))
    check(lambda x: ad.sum_(ad.sum_(x, axis=1, keepdims=True) * w), a)
    check(lambda x: ad.sum_(ad.sum_(x, axis=(0, 2)) ** 2), a)


def test_reshape_transpose_swap():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 3))
    check(lambda x: ad.sum_(ad.transpose(x) * w), a)
    check(lambda x: ad.sum_(ad.reshape(x, (2, 6)) ** 2), a)
    b = rng.standard_normal((2, 3, 4))
    wb = rng.standard_normal((2, 4, 3))
    check(lambda x: ad.sum_(ad.swap_last2(x) * wb), b)


def test_getitem_basic_indexing():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((4, 5, 3))
    check(lambda x: ad.sum_(x[1:3, ::2] ** 2), a)
    check(lambda x: ad.sum_(x[..., 1] * 2.0), a)
    check(lambda x: ad.sum_(x[2]), a)


def test_getitem_fancy_indexing_accumulates_duplicates():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4])
    w = rng.standard_normal((4, 3))
    check(lambda x: ad.sum_(x[idx] * w), a)
    # duplicated rows must add their cotangents
    v = ad.leaf(a)
    out = ad.sum_(v[idx])
    g = ad.gradients(out, {"x": v})["x"]
    expected = np.zeros_like(a)
    np.add.at(expected, idx, 1.0)
    assert np.array_equal(g, expected)


def test_concat_gradient_splits():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((4, 3))

    def build(x):
        top = x * 2.0
        cat = ad.concat([top, ad.wrap(b)], axis=0)
        return ad.sum_(cat ** 2)

    check(build, a)

    def build_axis1(x):
        cat = ad.concat([x, x * 3.0], axis=1)
        return ad.sum_(ad.exp(-ad.square(cat)))

    check(build_axis1, a)


def test_matmul_including_batch_dims():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    check(lambda x: ad.sum_(ad.matmul(x, ad.wrap(b)) ** 2), a)
    check(lambda x: ad.sum_(ad.matmul(ad.wrap(a), x) ** 2), b)
    batched = rng.standard_normal((5, 3, 4))
    check(lambda x: ad.sum_(ad.matmul(x, ad.wrap(b))), batched)
    # broadcast on the left operand of the other argument
    check(lambda x: ad.sum_(ad.matmul(ad.wrap(batched), x) ** 2), b)


def test_cross3_matches_numpy_and_differences():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((6, 3))
    b = rng.standard_normal((6, 3))
    v = ad.cross3(ad.wrap(a), ad.wrap(b))
    assert np.allclose(v.value, np.cross(a, b))
    check(lambda x: ad.sum_(ad.cross3(x, ad.wrap(b)) ** 2), a)
    check(lambda x: ad.sum_(ad.cross3(ad.wrap(a), x) ** 2), b)


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    return m @ m.T + n * np.eye(n)


def _sym(x):
    # factorizations read a symmetric matrix; symmetrize on tape so the
    # finite-difference probe of a single entry stays consistent
    return (x + ad.transpose(x)) * 0.5


def test_cholesky_gradient():
    a = _spd(4, 11)
    w = np.tril(np.random.default_rng(12).standard_normal((4, 4)))
    check(lambda x: ad.sum_(ad.cholesky(_sym(x)) * w), a, rtol=5e-5, h=1e-5)


def test_solve_lower_gradient():
    a = _spd(4, 13)
    L0 = np.linalg.cholesky(a)
    b = np.random.default_rng(14).standard_normal((4, 3))

    check(lambda x: ad.sum_(ad.solve_lower(ad.cholesky(_sym(x)),
                                           ad.wrap(b)) ** 2),
          a, rtol=5e-5, h=1e-5)
    check(lambda x: ad.sum_(ad.solve_lower(ad.wrap(L0), x) ** 2), b)
    # forward value agrees with a dense solve
    out = ad.solve_lower(ad.wrap(L0), ad.wrap(b))
    assert np.allclose(out.value, np.linalg.solve(L0, b))


def test_gradients_requires_scalar_output():
    v = ad.leaf(np.ones(3))
    with pytest.raises(Exception):
        ad.gradients(v * 2.0, {"x": v})


def test_gradient_of_shared_subexpression():
    rng = np.random.default_rng(15)
    a = rng.standard_normal((3,))

    def build(x):
        y = ad.exp(x)
        return ad.sum_(y * y + y)

    check(build, a)
