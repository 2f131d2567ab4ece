"""Tape engine: every op checked against central finite differences."""

import numpy as np
import pytest

from diffret import autodiff as ad
from diffret.autodiff import Tensor


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_unary(op, x, tol=1e-6):
    t = Tensor(x, requires_grad=True)
    out = op(t)
    out.sum().backward()
    num = fd_grad(lambda a: float(op(Tensor(a)).data.sum()), x)
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


RNG = np.random.default_rng(0)
W34 = Tensor(RNG.standard_normal((3, 4)))


@pytest.mark.parametrize("op", [
    lambda t: t * t + 2.0 * t,
    lambda t: (t + 1.5) ** 3.0,
    lambda t: -t + t / 2.0,
    lambda t: t.exp(),
    lambda t: (t * t + 0.5).log(),
    lambda t: t.tanh(),
    lambda t: t.sigmoid(),
    lambda t: t.erf(),
    lambda t: (t * t + 1e-3).sqrt(),
    lambda t: ad.silu(t),
    lambda t: ad.gelu(t),
    lambda t: ad.softmax(t) * W34,
    lambda t: ad.layer_norm(t) * W34,
])
def test_elementwise_grads(op):
    check_unary(op, RNG.standard_normal((3, 4)))


def test_matmul_grads():
    a = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(RNG.standard_normal((4, 5)), requires_grad=True)
    w = RNG.standard_normal((3, 5))
    ((a @ b) * Tensor(w)).sum().backward()
    np.testing.assert_allclose(a.grad, w @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ w, atol=1e-12)


def test_batched_matmul_grads():
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal((2, 4, 5))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    num = fd_grad(lambda x: float((Tensor(x) @ Tensor(b)).data.sum()), a)
    np.testing.assert_allclose(ta.grad, num, atol=1e-5)
    num_b = fd_grad(lambda x: float((Tensor(a) @ Tensor(x)).data.sum()), b)
    np.testing.assert_allclose(tb.grad, num_b, atol=1e-5)


def test_broadcast_add_mul_unbroadcasts():
    a = Tensor(RNG.standard_normal((3, 1, 4)), requires_grad=True)
    b = Tensor(RNG.standard_normal((4,)), requires_grad=True)
    out = a * b + b
    out.sum().backward()
    assert a.grad.shape == (3, 1, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad,
                               a.data.sum(axis=(0, 1)) + 3.0, atol=1e-12)


def test_reshape_transpose_getitem():
    x = RNG.standard_normal((2, 3, 4))
    t = Tensor(x, requires_grad=True)
    y = t.transpose(2, 0, 1).reshape(4, 6)[1:3]
    (y * y).sum().backward()
    num = fd_grad(lambda a: float(
        (np.transpose(a, (2, 0, 1)).reshape(4, 6)[1:3] ** 2).sum()), x)
    np.testing.assert_allclose(t.grad, num, atol=1e-5)


def test_getitem_repeated_index_accumulates():
    t = Tensor(np.arange(4.0), requires_grad=True)
    (t[[0, 0, 2]]).sum().backward()
    np.testing.assert_array_equal(t.grad, [2.0, 0.0, 1.0, 0.0])


def test_sum_mean_axes():
    x = RNG.standard_normal((3, 5))
    t = Tensor(x, requires_grad=True)
    (t.mean(axis=-1, keepdims=True) * t.sum(axis=0)).sum().backward()
    num = fd_grad(lambda a: float(
        (a.mean(axis=-1, keepdims=True) * a.sum(axis=0)).sum()), x)
    np.testing.assert_allclose(t.grad, num, atol=1e-5)


def test_diamond_graph_accumulates_once_per_path():
    t = Tensor(2.0, requires_grad=True)
    y = t * t + t * 3.0  # dy/dt = 2t + 3 = 7
    y.backward()
    assert t.grad == pytest.approx(7.0)


def test_shared_subexpression():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    s = t * t
    (s + s).sum().backward()  # d/dt 2t^2 = 4t
    np.testing.assert_allclose(t.grad, [4.0, 8.0])


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_no_grad_disables_tape():
    t = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = t * 2.0 + 1.0
    assert not out.requires_grad and out._parents == ()


def test_detach_blocks_gradient():
    t = Tensor(np.ones(3), requires_grad=True)
    (t.detach() * t).sum().backward()
    np.testing.assert_allclose(t.grad, np.ones(3))


def test_softmax_rows_sum_to_one():
    x = RNG.standard_normal((4, 7)) * 50.0  # large logits stay stable
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-12)
    assert np.all(np.isfinite(out))


def test_layer_norm_moments():
    out = ad.layer_norm(Tensor(RNG.standard_normal((5, 16)) * 3.0)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_float64_everywhere():
    t = Tensor(np.float32([1, 2]), requires_grad=True)
    assert t.data.dtype == np.float64
    out = ad.gelu(t * 2)
    assert out.data.dtype == np.float64
