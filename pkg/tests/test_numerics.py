import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distill_uq import numerics as nx

from conftest import check_gradients


def test_matmul_examples():
    a = nx.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(nx.const(np.eye(2)), a).value, a.value)
    np.testing.assert_array_equal(nx.matmul(nx.const([[1.0, 2.0]]), nx.const([[0.0], [0.0]])).value, [[0.0]])
    np.testing.assert_array_equal(nx.matmul(a, nx.const([[5.0], [6.0]])).value, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.const(np.ones((2, 3))), nx.const(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(nx.const([[0.0, 0.0]])).value, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(nx.softmax(nx.const([[1000.0, 1000.0]])).value, [[0.5, 0.5]], atol=1e-15)
    e = math.e
    np.testing.assert_allclose(nx.softmax(nx.const([[1.0, 0.0]])).value, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    np.testing.assert_allclose(nx.softmax(nx.const([[1.0, 0.0]])).value, [[0.731059, 0.268941]], atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(logits, shift):
    p = nx.softmax_array(logits)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.max(np.abs(nx.softmax_array(logits + shift) - p)) < 1e-12


def test_relu_and_segment_mean_examples():
    np.testing.assert_array_equal(nx.relu(nx.const([-1.0, 2.0])).value, [0.0, 2.0])
    np.testing.assert_array_equal(nx.segment_mean(nx.const([[1.0, 3.0], [3.0, 1.0]]), [0, 0]).value, [[2.0, 2.0]])
    np.testing.assert_array_equal(nx.segment_mean(nx.const([[2.0], [4.0], [6.0]]), [0, 1, 1]).value, [[2.0], [5.0]])


def test_segment_mean_rejects_empty_segment():
    with pytest.raises(nx.ContractError, match="empty segment"):
        nx.segment_mean(nx.const(np.ones((2, 1))), [0, 2])
    with pytest.raises(nx.ContractError):
        nx.segment_mean(nx.const(np.ones((2, 1))), [1, 0])


def test_add_sub_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.add(nx.const(np.ones((2, 3))), nx.const(np.ones((3, 2))))
    with pytest.raises(nx.ShapeError):
        nx.sub(nx.const(np.ones(2)), nx.const(np.ones(3)))


def test_backward_simple_examples():
    w = nx.param([1.0, 2.0, 3.0])
    nx.backward(nx.sum(w))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])
    w = nx.param([1.0, 2.0])
    nx.backward(nx.sum(nx.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(nx.ContractError):
        nx.backward(nx.mul(nx.param([1.0, 2.0]), 2.0))


def test_backward_accumulates_and_is_deterministic(rng):
    a = nx.param(rng.uniform(-1, 1, (4, 4)))
    b = nx.param(rng.uniform(-1, 1, (4, 4)))

    def loss():
        return nx.mean(nx.log_softmax(nx.relu(nx.matmul(a, b))))

    nx.backward(loss())
    first = a.grad.copy()
    nx.backward(loss())
    np.testing.assert_array_equal(a.grad, 2 * first)
    a.zero_grad()
    nx.backward(loss())
    assert a.grad.tobytes() == first.tobytes()


def test_shared_subexpression_gradient():
    x = nx.param([3.0])
    y = nx.mul(x, x)
    nx.backward(nx.sum(nx.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def _composite(rng):
    x = nx.param(rng.uniform(-1, 1, (4, 4)))
    w = nx.param(rng.uniform(-1, 1, (4, 4)))
    bias = nx.param(rng.uniform(-1, 1, (4,)))
    gamma = nx.param(rng.uniform(0.5, 1.5, (4,)))
    beta = nx.param(rng.uniform(-1, 1, (4,)))
    adj = sp.csr_matrix(rng.random((4, 4)) < 0.5, dtype=np.float64)
    mask = nx.dropout_mask(rng, (4, 4), 0.3)
    target = rng.uniform(-1, 1, (2, 4))

    def loss():
        h = nx.add(nx.matmul(x, w), nx.spmm(adj, x))
        h, _, _ = nx.batch_norm_train(h, gamma, beta)
        # a bias before batch norm has an identically zero gradient, so add it after
        h = nx.dropout(nx.relu(nx.add(h, bias)), mask)
        pooled = nx.segment_mean(h, [0, 0, 1, 1])
        ls = nx.log_softmax(pooled)
        sq = nx.square(nx.sub(nx.softmax(pooled), target))
        return nx.add(nx.mean(nx.mul(ls, nx.exp(nx.scale(ls, 0.5)))), nx.sum(sq))

    return loss, [x, w, bias, gamma, beta]


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradient_matches_finite_differences(seed):
    loss, params = _composite(np.random.default_rng(seed))
    assert check_gradients(loss, params) < 1e-4


def test_batch_norm_eval_gradient(rng):
    x = nx.param(rng.uniform(-1, 1, (5, 3)))
    gamma = nx.param(rng.uniform(0.5, 1.5, 3))
    beta = nx.param(rng.uniform(-1, 1, 3))
    mean, var = rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3)

    def loss():
        return nx.sum(nx.square(nx.batch_norm_eval(x, gamma, beta, mean, var)))

    assert check_gradients(loss, [x, gamma, beta]) < 1e-4


def test_batch_norm_train_normalises():
    x = nx.const(np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]]))
    out, mu, var = nx.batch_norm_train(x, nx.const(np.ones(2)), nx.const(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.value.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.value.var(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(mu, [3.0, 20.0])


def test_dropout_mask_inverted_scaling(rng):
    mask = nx.dropout_mask(rng, (20000,), 0.5)
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert abs(mask.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(nx.dropout_mask(rng, (3,), 0.0), np.ones(3))


def test_adam_examples():
    state = nx.AdamState()
    (w,), state = nx.adam_step([np.array([1.0])], [np.array([1.0])], state)
    assert state.step == 1
    # m_hat = v_hat = 1 after bias correction -> w - lr * 1 / (1 + eps)
    assert w[0] == pytest.approx(1.0 - 1e-3 / (1.0 + 1e-8), abs=1e-15)
    assert w[0] == pytest.approx(0.999, abs=1e-9)

    state = nx.AdamState()
    p = np.array([0.3, -0.2])
    (q,), state = nx.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(q, p)


def test_adam_matches_reference_loop():
    # independent scalar transcription of the textbook update
    g_seq = [0.5, -1.0, 0.25]
    w, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 1e-3 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    node = nx.param([2.0])
    opt = nx.Adam([node])
    for g in g_seq:
        node.grad = np.array([g])
        opt.step()
    assert node.value[0] == pytest.approx(w, abs=1e-15)
    assert opt.state.step == 3
