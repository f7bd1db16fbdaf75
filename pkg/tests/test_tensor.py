import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onerestore.tensor import (DimensionError, NumericsError, Tensor,
                               as_tensor, no_grad, precision)


def fd_check(fn, tensors, eps=1e-6, tol=1e-5):
    """Central finite differences against analytic grads, float64."""
    loss = fn()
    loss.backward()
    for t in tensors:
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + eps
            lp = float(fn().data)
            t.data[idx] = orig - eps
            lm = float(fn().data)
            t.data[idx] = orig
            num = (lp - lm) / (2 * eps)
            ana = t.grad[idx]
            assert abs(num - ana) <= tol * max(1.0, abs(num)), \
                f"grad mismatch at {idx}: analytic {ana} numeric {num}"
            it.iternext()


def test_add_mul_forward_matches_numpy():
    a = np.random.default_rng(0).normal(size=(3, 4))
    b = np.random.default_rng(1).normal(size=(3, 4))
    out = (Tensor(a) * Tensor(b) + Tensor(a)).data
    np.testing.assert_allclose(out, a * b + a, rtol=1e-6)


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0, 6.0], rtol=1e-6)
    y2 = (x * x).sum()
    y2.backward()
    np.testing.assert_allclose(x.grad, [8.0, 12.0], rtol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2).backward()


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_precision_context_switches_dtype():
    assert Tensor(np.ones(2)).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor(np.ones(2)).data.dtype == np.float64
    assert Tensor(np.ones(2)).data.dtype == np.float32


def test_nan_raises_numerics_error():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericsError):
        x.log()


def test_matmul_broadcasts_batch_dims():
    a = np.random.default_rng(2).normal(size=(2, 5, 3, 4))
    b = np.random.default_rng(3).normal(size=(4, 6))
    out = Tensor(a).matmul(Tensor(b)).data
    np.testing.assert_allclose(out, a @ b, rtol=1e-5)


def test_getitem_backward_scatters():
    with precision(np.float64):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = x[0].sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, [[1, 1, 1], [0, 0, 0]])


@pytest.mark.parametrize("op", ["exp", "sqrt", "relu", "gelu", "abs"])
def test_unary_gradients(op):
    with precision(np.float64):
        rng = np.random.default_rng(hash(op) % 2**32)
        x = Tensor(rng.uniform(0.1, 2.0, size=(3, 4)), requires_grad=True)
        fd_check(lambda: getattr(x, op)().sum(), [x])


def test_matmul_gradient():
    with precision(np.float64):
        rng = np.random.default_rng(9)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        fd_check(lambda: (a.matmul(b) * a.matmul(b)).sum(), [a, b])


def test_mean_and_reshape_gradient():
    with precision(np.float64):
        x = Tensor(np.random.default_rng(4).normal(size=(2, 6)),
                   requires_grad=True)
        fd_check(lambda: (x.reshape(3, 4).mean() * 5.0), [x])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16))
def test_sum_matches_numpy_property(values):
    arr = np.array(values)
    assert np.allclose(float(Tensor(arr).sum().data),
                       arr.astype(np.float32).sum(), rtol=1e-4, atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_transpose_roundtrip_property(r, c):
    arr = np.random.default_rng(r * 7 + c).normal(size=(r, c))
    t = Tensor(arr).transpose(1, 0).transpose(1, 0)
    np.testing.assert_allclose(t.data, arr.astype(np.float32))


def test_as_tensor_passthrough():
    t = Tensor(np.ones(2))
    assert as_tensor(t) is t
    assert isinstance(as_tensor(1.5), Tensor)
