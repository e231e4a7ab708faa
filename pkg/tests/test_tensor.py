"""Autodiff core: op semantics, gradient correctness, error surfacing."""

import numpy as np
import pytest

from elip import tensor as T
from elip.gradcheck import check_primitives, fd_check
from elip.tensor import GraphError, NonFiniteError, Tensor


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_softmax_row_sum_has_zero_gradient():
    rng = np.random.default_rng(0)
    m = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    T.softmax_rows(m).sum().backward()
    assert np.abs(m.grad).max() < 1e-12


def test_softmax_rows_examples():
    out = T.softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])
    single = T.softmax_rows(Tensor([[2.0], [-3.0], [40.0]]))
    np.testing.assert_allclose(single.data, np.ones((3, 1)))
    logs = T.softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]]))
    np.testing.assert_allclose(logs.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_shift_invariance():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(6, 9))
        c = rng.normal(size=(6, 1))
        base = T.softmax_rows(Tensor(m)).data
        shifted = T.softmax_rows(Tensor(m + c)).data
        np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_softmax_rows_requires_2d():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(np.zeros((2, 3, 4))))


def test_tensor_used_twice_accumulates():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))

    x = Tensor(data, requires_grad=True)
    ((x @ Tensor(w)) + x * 2.0).sum().backward()
    both = x.grad.copy()

    x1 = Tensor(data, requires_grad=True)
    (x1 @ Tensor(w)).sum().backward()
    x2 = Tensor(data, requires_grad=True)
    (x2 * 2.0).sum().backward()
    np.testing.assert_allclose(both, x1.grad + x2.grad, atol=1e-14)


def test_layer_norm_examples():
    const = T.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)))
    np.testing.assert_allclose(const.data, np.zeros((1, 3)), atol=1e-12)

    two = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(two.data, [[-1.0, 1.0]], atol=1e-4)

    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(50, 128))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(128)), Tensor(np.zeros(128))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4


def test_layer_norm_rejects_empty_axis():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


def test_gelu_values():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert T.gelu(Tensor(10.0)).item() == pytest.approx(10.0, abs=1e-6)
    assert T.gelu(Tensor(1.0)).item() == pytest.approx(0.841345, abs=1e-6)


def test_cross_entropy_uniform_and_perfect():
    uniform = T.cross_entropy_logits(Tensor(np.zeros((8, 2))),
                                     np.array([0, 1] * 4))
    assert uniform.item() == pytest.approx(np.log(2.0), abs=1e-12)
    logits = np.array([[20.0, -20.0], [-20.0, 20.0]])
    perfect = T.cross_entropy_logits(Tensor(logits), np.array([0, 1]))
    assert perfect.item() < 1e-8


def test_cross_entropy_empty_batch():
    with pytest.raises(ValueError):
        T.cross_entropy_logits(Tensor(np.zeros((0, 2))), np.zeros(0, dtype=int))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_backward_rejects_detached():
    with pytest.raises(GraphError):
        Tensor(1.0).backward()


def test_non_finite_surfaces_as_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(1e6))
    with pytest.raises(NonFiniteError):
        T.log(Tensor(-1.0))
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_getitem_and_concat_roundtrip_gradients():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    (x[1] * Tensor(np.arange(4.0))).sum().backward()
    expected = np.zeros((3, 4))
    expected[1] = np.arange(4.0)
    np.testing.assert_allclose(x.grad, expected)

    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    T.concat([a, b], axis=1).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 2)))
    np.testing.assert_allclose(b.grad, np.ones((2, 3)))


def test_primitive_gradients_match_finite_differences():
    report = check_primitives(n_seeds=20)
    assert report.ok, report.failures[:5]
    assert report.worst_rel < 1e-4


def test_fd_check_flags_wrong_gradients():
    # a deliberately broken gradient must be caught, not silently passed
    x = Tensor(np.array([1.5]), requires_grad=True)

    def bad_loss():
        out = T._make("bad", x.data * 3.0, (x,),
                      lambda g: x._accumulate(g * 2.0))
        return out.sum()

    report = fd_check(bad_loss, {"x": x})
    assert not report.ok
