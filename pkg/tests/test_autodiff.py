"""Gradient correctness of every autodiff op against central differences."""

import numpy as np
import pytest

from langrasp import autodiff as ad
from langrasp.autodiff import Tensor


def fd_grad(loss_fn, tensor, h=1e-6):
    """Central-difference gradient of loss_fn() w.r.t. one tensor."""
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def check_op(loss_fn, tensors, tol=1e-7):
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = fd_grad(loss_fn, t)
        assert np.allclose(analytic, numeric, atol=tol), (
            f"analytic {analytic} vs numeric {numeric}")


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    check_op(lambda: ad.tsum(ad.mul(ad.add(a, b), a)), [a, b])


def test_matmul_transpose_grads():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    check_op(lambda: ad.tsum(ad.matmul(a, ad.transpose(b))), [a, b])


def test_relu_exp_log_grads():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 3)) + 0.5, requires_grad=True)
    check_op(lambda: ad.tsum(ad.relu(a)), [a])
    b = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
    check_op(lambda: ad.tsum(ad.mul(ad.log(b), ad.exp(b))), [b])


def test_minimum_routes_gradient_to_smaller():
    a = Tensor(np.array([1.0, 5.0]), requires_grad=True)
    b = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    out = ad.tsum(ad.minimum(a, b))
    out.backward()
    assert np.allclose(a.grad, [1.0, 0.0])
    assert np.allclose(b.grad, [0.0, 1.0])


def test_softmax_rows_grads():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 5)))
    check_op(lambda: ad.tsum(ad.mul(ad.softmax_rows(a), w)), [a])


def test_log_softmax_rows_grads():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    check_op(lambda: ad.tsum(ad.mul(ad.log_softmax_rows(a), w)), [a])


def test_layer_norm_rows_grads():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    gain = Tensor(rng.normal(size=(6,)) + 1.0, requires_grad=True)
    bias = Tensor(rng.normal(size=(6,)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 6)))
    check_op(lambda: ad.tsum(ad.mul(ad.layer_norm_rows(a, gain, bias), w)),
             [a, gain, bias], tol=1e-6)


def test_concat_cols_and_pick_grads():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    check_op(lambda: ad.pick(ad.concat_cols([a, b]), 1, 3), [a, b])


def test_add_n_and_mean():
    xs = [Tensor(np.full((2,), float(i)), requires_grad=True) for i in range(4)]
    out = ad.tmean(ad.add_n(xs))
    assert out.item() == pytest.approx(0 + 1 + 2 + 3)
    out.backward()
    for t in xs:
        assert np.allclose(t.grad, [0.5, 0.5])


def test_reused_node_accumulates_once_per_path():
    # y = x*x + x: dy/dx = 2x + 1
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.tsum(ad.add(ad.mul(x, x), x))
    y.backward()
    assert np.allclose(x.grad, [7.0])


def test_no_grad_suppresses_taping():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y._backward is None
    assert not y._parents


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, x).backward()


def test_shared_subgraph_deep_chain():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    def loss():
        h = ad.relu(ad.matmul(a, a))
        return ad.tsum(ad.mul(h, h))
    check_op(loss, [a], tol=1e-5)
