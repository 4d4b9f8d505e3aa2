import numpy as np
import pytest

from minimt import autograd as ag
from minimt.autograd import Tensor, no_grad


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, *shapes, seed=0, tol=1e-7):
    rng = np.random.default_rng(seed)
    tensors = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = build(*tensors)
    out.backward()
    for t in tensors:
        fd = finite_diff(lambda: build(*tensors).item(), t.data)
        assert np.abs(t.grad - fd).max() < tol, f"grad mismatch for shape {t.data.shape}"


def test_add_broadcast_grad():
    check_op(lambda a, b: ag.tsum(ag.mul(ag.add(a, b), ag.add(a, b))), (3, 4), (4,))


def test_mul_grad():
    check_op(lambda a, b: ag.tsum(ag.mul(a, b)), (2, 3), (2, 3))


def test_matmul_grad():
    check_op(lambda a, b: ag.tsum(ag.matmul(a, b)), (3, 4), (4, 5))


def test_matmul_batched_broadcast_grad():
    check_op(lambda a, b: ag.tsum(ag.matmul(a, b)), (2, 3, 4), (4, 5))


def test_reshape_transpose_grad():
    check_op(lambda a: ag.tsum(ag.mul(ag.transpose(ag.reshape(a, (2, 3, 2)), (1, 0, 2)), 2.0)),
             (3, 4))


def test_gelu_grad():
    check_op(lambda a: ag.tsum(ag.gelu(a)), (4, 5))


def test_softmax_grad():
    check_op(lambda a: ag.tsum(ag.mul(ag.softmax(a), np.arange(5.0))), (3, 5))


def test_log_softmax_grad():
    check_op(lambda a: ag.tsum(ag.mul(ag.log_softmax(a), np.arange(5.0))), (3, 5))


def test_layer_norm_grad():
    check_op(lambda a, g, b: ag.tsum(ag.mul(ag.layer_norm(a, g, b), np.arange(6.0))),
             (2, 4, 6), (6,), (6,))


def test_embedding_grad_scatter():
    w = Tensor(np.random.default_rng(1).normal(size=(7, 3)), requires_grad=True)
    ids = np.array([[1, 1, 4], [0, 1, 6]])
    out = ag.tsum(ag.mul(ag.embedding(w, ids), 3.0))
    out.backward()
    # Row 1 is gathered three times, so its gradient stacks up.
    assert np.allclose(w.grad[1], 9.0)
    assert np.allclose(w.grad[4], 3.0)
    assert np.allclose(w.grad[2], 0.0)


def test_masked_fill_blocks_grad():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    mask = np.array([[True, False, False], [False, True, False]])
    out = ag.tsum(ag.masked_fill(a, mask, -100.0))
    assert out.item() == pytest.approx(-100.0 * 2 + 4.0)
    out.backward()
    assert np.array_equal(a.grad, np.where(mask, 0.0, 1.0))


def test_shared_leaf_accumulates_from_all_uses():
    # The same tensor used twice must receive the sum of both paths.
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    out = ag.tsum(ag.add(ag.mul(a, a), a))  # a^2 + a -> grad 2a + 1
    out.backward()
    assert np.allclose(a.grad, 2 * a.data + 1)


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = ag.tsum(ag.mul(a, 2.0))
    assert out._backward is None and not out.requires_grad


def test_backward_on_nonscalar_requires_grad_argument():
    a = Tensor(np.ones(3), requires_grad=True)
    out = ag.mul(a, 2.0)
    with pytest.raises(ValueError):
        out.backward()


def test_dropout_train_scales_and_masks():
    rng = np.random.default_rng(0)
    a = Tensor(np.ones((100, 100)), requires_grad=True)
    out = ag.dropout(a, 0.25, rng)
    kept = out.data != 0
    assert 0.70 < kept.mean() < 0.80
    assert np.allclose(out.data[kept], 1.0 / 0.75)
    ag.tsum(out).backward()
    assert np.array_equal(a.grad != 0, kept)


def test_dropout_p_zero_is_identity():
    a = Tensor(np.ones(5), requires_grad=True)
    assert ag.dropout(a, 0.0, np.random.default_rng(0)) is a


def test_sum_axis_keepdims_grad():
    check_op(lambda a: ag.tsum(ag.mul(ag.tsum(a, axis=1, keepdims=True), 2.0)), (3, 4))
    check_op(lambda a: ag.tsum(ag.mul(ag.tmean(a, axis=0), np.arange(4.0))), (3, 4))
