import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tfs_lab import autograd as ag
from tfs_lab.autograd import Tensor
from tfs_lab.errors import DimensionError, DistributionError, NumericError, OptimizerError


def p64(arr):
    return ag.parameter(np.asarray(arr, dtype=np.float64), dtype=np.float64)


def c64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# matmul


def test_matmul_identity():
    out = ag.matmul(c64(np.eye(2)), c64([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_hand_computed():
    assert ag.matmul(c64([[1, 2]]), c64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    rng = np.random.default_rng(0)
    out = ag.matmul(c64(np.zeros((3, 4))), c64(rng.normal(size=(4, 5))))
    assert not out.data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(c64(np.ones((2, 3))), c64(np.ones((2, 3))))


def test_matmul_backward_formula():
    rng = np.random.default_rng(1)
    a, b = p64(rng.normal(size=(3, 4))), p64(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    ag.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# softmax family


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(c64([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ag.softmax(c64([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        ag.softmax(c64(np.zeros((2, 0))), axis=-1)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(ag.softmax(c64(x)).data, ag.softmax(c64(x + c)).data, atol=1e-12)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e4, 1e4)), st.sampled_from([0, 1, -1]))
def test_softmax_normalised(x, axis):
    out = ag.softmax(c64(x), axis=axis).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


def test_log_softmax_examples():
    np.testing.assert_allclose(ag.log_softmax(c64([0.0, 0.0])).data, [-math.log(2)] * 2)
    out = ag.log_softmax(c64([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.0, -1000.0])


@given(hnp.arrays(np.float64, (3, 7), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    ls = ag.log_softmax(c64(x)).data
    np.testing.assert_allclose(ls, np.log(ag.softmax(c64(x)).data), atol=1e-6)
    np.testing.assert_allclose(np.exp(ls).sum(-1), 1.0, atol=1e-12)


def test_binary_log_probs_are_log_sigmoid_pairs():
    z = np.array([-3.0, 0.0, 2.5])
    out = ag.binary_log_probs(c64(z)).data
    sig = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(out[:, 1], np.log(sig))
    np.testing.assert_allclose(out[:, 0], np.log(1 - sig))


# KL


def kl_oracle(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


@pytest.mark.parametrize(
    "p, q, expected",
    [([0.5, 0.5], [0.5, 0.5], 0.0), ([1.0, 0.0], [0.5, 0.5], math.log(2)), ([0.75, 0.25], [0.5, 0.5], 0.130812)],
)
def test_kl_examples(p, q, expected):
    out = ag.kl_divergence(np.array([p]), c64(np.log([q]))).item()
    assert out == pytest.approx(kl_oracle(p, q), abs=1e-12)
    assert out == pytest.approx(expected, abs=1e-6)


def test_kl_rejects_unnormalised():
    with pytest.raises(DistributionError):
        ag.kl_divergence(np.array([[0.7, 0.7]]), c64(np.log([[0.5, 0.5]])))
    with pytest.raises(DistributionError):
        ag.kl_divergence(np.array([[1.2, -0.2]]), c64(np.log([[0.5, 0.5]])))


simplex_rows = hnp.arrays(np.float64, (3, 4), elements=st.floats(0, 10)).filter(lambda a: (a.sum(-1) > 1e-3).all())


@given(simplex_rows)
def test_kl_to_self_is_zero(raw):
    p = raw / raw.sum(-1, keepdims=True)
    logp = np.log(np.where(p > 0, p, 1e-300))
    assert abs(ag.kl_divergence(p, c64(logp)).item()) < 1e-9


@given(simplex_rows, hnp.arrays(np.float64, (3, 4), elements=finite))
def test_kl_gibbs_inequality(raw, logits):
    p = raw / raw.sum(-1, keepdims=True)
    assert ag.kl_divergence(p, ag.log_softmax(c64(logits))).item() >= -1e-9


# adam


def test_adam_first_step_magnitude_is_lr():
    state = ag.OptimizerState.for_params([np.zeros(1)], lr=1e-3)
    (theta,) = ag.adam_step([np.zeros(1)], [np.ones(1)], state)
    assert theta[0] == pytest.approx(-1e-3, rel=1e-7)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.5, -2.0]), np.ones((2, 2))]
    state = ag.OptimizerState.for_params(params)
    new = ag.adam_step(params, [np.zeros(2), np.zeros((2, 2))], state)
    for a, b in zip(params, new):
        np.testing.assert_array_equal(a, b)


def test_adam_deterministic():
    rng = np.random.default_rng(3)
    grads = [rng.normal(size=(4, 3)) for _ in range(5)]

    def run():
        p = [np.ones((4, 3), dtype=np.float32)]
        s = ag.OptimizerState.for_params(p)
        for g in grads:
            p = ag.adam_step(p, [g], s)
        return p[0]

    assert run().tobytes() == run().tobytes()


def test_adam_moments_start_at_zero_and_step_counts():
    s = ag.OptimizerState.for_params([np.ones(3)])
    assert s.step == 0 and not s.m[0].any() and not s.v[0].any()
    for i in range(3):
        ag.adam_step([np.ones(3)], [np.ones(3)], s)
        assert s.step == i + 1


def test_adam_missing_gradient():
    with pytest.raises(OptimizerError):
        ag.adam_step([np.ones(2)], [None], ag.OptimizerState.for_params([np.ones(2)]))


def test_adam_class_clips_global_norm():
    p = ag.parameter(np.zeros(2))
    opt = ag.Adam([p], lr=0.1, grad_clip=1.0)
    p.grad = np.array([30.0, 40.0], dtype=np.float32)
    opt.step()
    # the first Adam step is sign-like, so clipping must not change direction
    assert np.sign(p.data).tolist() == [-1.0, -1.0]


# finite differences


def test_fd_square():
    x = p64([3.0])
    report = ag.finite_difference_check(lambda: (x * x).sum(), [x], step=1e-3)
    assert report.max_rel_error < 1e-6


def test_fd_constant():
    x = p64([1.0, 2.0])
    report = ag.finite_difference_check(lambda: (x * 0.0).sum() + 5.0, [x])
    assert report.max_rel_error == 0.0


def test_fd_two_layer_net_with_cross_entropy():
    rng = np.random.default_rng(0)
    w1, b1 = p64(rng.normal(size=(5, 8)) * 0.5), p64(np.zeros(8))
    w2, b2 = p64(rng.normal(size=(8, 3)) * 0.5), p64(np.zeros(3))
    x = c64(rng.normal(size=(6, 5)))
    y = rng.integers(3, size=6)

    def loss():
        h = ag.gelu(x @ w1 + b1)
        return ag.cross_entropy(h @ w2 + b2, y)

    report = ag.finite_difference_check(loss, [w1, b1, w2, b2], step=1e-3)
    assert report.passed, report


def _check(f, params, tol=1e-4):
    report = ag.finite_difference_check(f, params, step=1e-3, tolerance=tol)
    assert report.passed, report


@pytest.mark.parametrize("seed", range(3))
def test_elementwise_and_shape_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a = p64(rng.normal(size=(2, 3, 4)))
    b = p64(rng.normal(size=(4,)))
    c = p64(rng.normal(size=(3, 1)))
    w = c64(rng.normal(size=(2, 4, 3)))

    def f():
        z = (a + b) * c - a * 0.5
        z = ag.gelu(z).transpose(0, 2, 1).reshape(2, 12)
        z = ag.concat([z[:, :5], ag.sigmoid(z[:, 5:])], axis=-1)
        return (z * w.reshape(2, 12)).sum() + z.mean()

    _check(f, [a, b, c])


@pytest.mark.parametrize("seed", range(3))
def test_batched_matmul_and_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = p64(rng.normal(size=(2, 3, 4)))
    w = p64(rng.normal(size=(4, 4)))
    gain, bias = p64(1 + 0.1 * rng.normal(size=4)), p64(0.1 * rng.normal(size=4))
    r = c64(rng.normal(size=(2, 3, 4)))

    def f():
        h = ag.layer_norm(x @ w, gain, bias)
        att = ag.softmax(h @ h.transpose(0, 2, 1), axis=-1)
        return ((att @ h) * r).sum()

    _check(f, [x, w, gain, bias])


@pytest.mark.parametrize("seed", range(3))
def test_loss_op_gradients(seed):
    rng = np.random.default_rng(seed)
    emb = p64(rng.normal(size=(7, 4)))
    ids = rng.integers(7, size=(2, 3))
    logits = p64(rng.normal(size=(2, 3, 5)))
    targets = rng.integers(-1, 5, size=(2, 3))
    targets[0, 0] = 2
    p = rng.dirichlet(np.ones(5), size=(2, 3))
    z = p64(rng.normal(size=(3, 4)))
    bits = rng.integers(2, size=(3, 4))

    def f():
        e = ag.embedding(emb, ids)
        total = (e * e).sum() * 0.1
        total = total + ag.pick(ag.log_softmax(logits), targets)
        total = total + ag.kl_divergence(p, ag.log_softmax(logits))
        return total + ag.pick(ag.binary_log_probs(z), bits)

    _check(f, [emb, logits, z])


def test_shared_input_accumulates_both_paths():
    rng = np.random.default_rng(5)
    x = p64(rng.normal(size=(3, 3)))
    w1, w2 = c64(rng.normal(size=(3, 3))), c64(rng.normal(size=(3, 3)))

    def f():
        return ((x @ w1).sum() + ag.softmax(x @ w2).sum() * 2.0 + (x * x).sum())

    _check(f, [x])
    x.grad = None
    f().backward()
    expected = np.ones((3, 3)) @ w1.data.T + 2 * x.data
    # softmax rows sum to one, so that path contributes nothing
    np.testing.assert_allclose(x.grad, expected, atol=1e-10)


def test_backward_visits_each_node_once():
    calls = []
    x = p64([1.0, 2.0])
    y = x * 2.0
    original = y._backward

    def spy(g):
        calls.append(1)
        return original(g)

    y._backward = spy
    (y + y).sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [4.0, 4.0])


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        c64([1.0]) * float("inf")


def test_float32_default():
    t = ag.parameter([1, 2, 3])
    assert t.dtype == np.float32
    assert (t * 2.0).dtype == np.float32
