"""Finite-difference checks for the reverse-mode tape."""
import numpy as np
import pytest

from segloc import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at x, coordinate by coordinate."""
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
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(build, shapes, seed=0, tol=1e-6):
    """build(tensors) -> scalar Tensor; compares tape grads against FD."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for k, (a, t) in enumerate(zip(arrays, tensors)):
        def f(x, k=k):
            args = [ad.Tensor(v.copy()) for v in arrays]
            args[k] = ad.Tensor(x)
            return float(build(*args).data)

        fd = numeric_grad(f, a.copy())
        assert t.grad is not None, f"missing grad for arg {k}"
        np.testing.assert_allclose(t.grad, fd, rtol=tol, atol=tol)


def test_add_mul_broadcast():
    check_grad(lambda a, b: (a * b + b).sum(), [(4, 3), (3,)])


def test_sub_div():
    check_grad(lambda a, b: (a / (b * b + 2.0) - b).sum(), [(5,), (5,)])


def test_matmul_2d():
    check_grad(lambda a, b: (a @ b).sum(), [(4, 3), (3, 2)])


def test_matmul_batched():
    check_grad(lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 5, 3, 3), (2, 5, 3, 2)])


def test_matmul_broadcast_rhs():
    check_grad(lambda a, b: (a @ b).sum(), [(2, 4, 3), (3, 2)])


def test_elu_relu_smooth_region():
    # keep inputs away from the origin so FD is clean
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40,))
    x[np.abs(x) < 0.1] += 0.2
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = (ad.elu(t) * 2.0 + ad.relu(t)).sum()
    out.backward()

    def f(v):
        tt = ad.Tensor(v)
        return float((ad.elu(tt) * 2.0 + ad.relu(tt)).sum().data)

    fd = numeric_grad(f, x.copy())
    np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-8)


def test_exp_log():
    check_grad(lambda a: ad.log(ad.exp(a).sum() + 1.0), [(6,)])


def test_sum_axis_keepdims():
    check_grad(lambda a: (a.sum(axis=1, keepdims=True) * a).sum(), [(3, 4)])


def test_mean_axis():
    check_grad(lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum(), [(5, 2)])


def test_reshape_concat():
    check_grad(
        lambda a, b: ad.concat([a.reshape(2, 6), b], axis=1).sum(),
        [(3, 4), (2, 2)],
    )


def test_take_with_repeats():
    idx = np.array([0, 2, 2, 1])
    check_grad(lambda a: (ad.take(a, idx) * ad.take(a, idx)).sum(), [(4, 3)])


def test_take_1d_flat():
    idx = np.array([[0, 1], [3, 3]])
    check_grad(lambda a: ad.take(a, idx).sum(), [(5,)])


def test_gather_rows_batched():
    idx = np.array([[[0, 1], [2, 0]], [[1, 1], [0, 2]]])  # (2,2,2)
    check_grad(
        lambda a: (ad.gather_rows(a, idx) * ad.gather_rows(a, idx)).sum(),
        [(2, 3, 4)],
    )


def test_log_softmax_matches_manual():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(4, 3))
    t = ad.Tensor(z.copy(), requires_grad=True)
    ls = ad.log_softmax(t)
    manual = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    np.testing.assert_allclose(ls.data, manual, rtol=1e-12)
    # gradient of -sum(logp[range, y]) is softmax - onehot
    y = np.array([0, 2, 1, 1])
    loss = -ad.take(ls.reshape(-1), np.arange(4) * 3 + y).sum()
    loss.backward()
    p = np.exp(manual)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(t.grad, p - onehot, rtol=1e-10, atol=1e-12)


def test_constant_inputs_build_no_graph():
    a = ad.Tensor(np.ones((2, 2)))
    b = ad.Tensor(np.ones((2, 2)))
    out = (a @ b + a).sum()
    assert not out.requires_grad
    assert out._parents == ()


def test_float32_preserved():
    a = ad.Tensor(np.ones((3,), dtype=np.float32), requires_grad=True)
    out = (ad.elu(a * 2.0) - 1.0).mean()
    assert out.dtype == np.float32
    out.backward()
    assert a.grad.dtype == np.float32


def test_backward_requires_scalar():
    a = ad.Tensor(np.ones((2,)), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_grad_accumulates_across_reuse():
    a = ad.Tensor(np.array([3.0]), requires_grad=True)
    out = (a * a + a).sum()
    out.backward()
    np.testing.assert_allclose(a.grad, [7.0])
