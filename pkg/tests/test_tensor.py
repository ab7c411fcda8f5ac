import math

import numpy as np
import pytest

from melfm import tensor as T


def rnd(shape, seed, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_layer_norm_definition():
    x = T.Tensor(rnd((5, 16), 0))
    out = T.layer_norm(x).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-4)


def test_cross_entropy_uniform_logits():
    n = 11
    logits = T.Tensor(np.zeros((4, n)))
    loss = T.cross_entropy(logits, np.array([0, 3, 5, 10]))
    assert abs(loss.item() - math.log(n)) < 1e-12


def test_cross_entropy_masked_rows_ignored():
    logits = T.Tensor(rnd((6, 5), 1), requires_grad=True)
    ids = np.array([0, 1, 2, 3, 4, 0])
    mask = np.array([True, True, False, False, True, False])
    loss = T.cross_entropy(logits, ids, mask)
    # perturbing a masked row's target must not change the loss
    ids2 = ids.copy()
    ids2[2] = 4
    loss2 = T.cross_entropy(T.Tensor(logits.data), ids2, mask)
    assert loss.item() == loss2.item()
    loss.backward()
    assert np.all(logits.grad[~mask] == 0.0)
    assert np.any(logits.grad[mask] != 0.0)


def test_cross_entropy_empty_mask_raises():
    logits = T.Tensor(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.zeros(3, dtype=int), np.zeros(3, dtype=bool))


def test_grad_check_quadratic():
    x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)

    def f():
        return T.sum_(T.mul(x, x))

    err = T.grad_check(f, x, eps=1e-5)
    x.grad = None
    out = f()
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-12)
    assert err < 1e-8


def test_grad_check_small_mlp():
    rng = np.random.default_rng(7)
    w1 = T.Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    b1 = T.Tensor(np.zeros(6), requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    b2 = T.Tensor(np.zeros(2), requires_grad=True)
    x = np.array(rng.normal(size=(3, 5)))

    def f():
        h = T.tanh(T.add(T.matmul(T.Tensor(x), w1), b1))
        out = T.add(T.matmul(h, w2), b2)
        return T.mean(T.mul(out, out))

    err = T.grad_check(f, [w1, b1, w2, b2])
    assert err < 1e-4


def _check_unary(op, shape=(4, 6), seed=3, scale=1.0):
    x = T.Tensor(rnd(shape, seed, scale), requires_grad=True)

    def f():
        return T.mean(T.mul(op(x), T.Tensor(rnd(shape, seed + 1))))

    assert T.grad_check(f, x) < 1e-4


@pytest.mark.parametrize(
    "op",
    [T.softmax, T.layer_norm, T.gelu, T.swish, T.sigmoid, T.tanh, T.relu],
    ids=["softmax", "layer_norm", "gelu", "swish", "sigmoid", "tanh", "relu"],
)
def test_unary_primitive_gradients(op):
    _check_unary(op)


def test_glu_gradient():
    x = T.Tensor(rnd((5, 8), 11), requires_grad=True)

    def f():
        return T.mean(T.mul(T.glu(x), T.Tensor(rnd((5, 4), 12))))

    assert T.grad_check(f, x) < 1e-4


def test_matmul_add_mul_gradients():
    a = T.Tensor(rnd((3, 4), 20), requires_grad=True)
    b = T.Tensor(rnd((4, 5), 21), requires_grad=True)
    c = T.Tensor(rnd((5,), 22), requires_grad=True)

    def f():
        return T.mean(T.mul(T.add(T.matmul(a, b), c), T.Tensor(rnd((3, 5), 23))))

    assert T.grad_check(f, [a, b, c]) < 1e-4


def test_batched_matmul_gradient():
    a = T.Tensor(rnd((2, 3, 4), 30), requires_grad=True)
    b = T.Tensor(rnd((2, 4, 5), 31), requires_grad=True)

    def f():
        return T.mean(T.matmul(a, b))

    assert T.grad_check(f, [a, b]) < 1e-4


def test_transpose_reshape_slice_concat_gradients():
    a = T.Tensor(rnd((4, 6), 40), requires_grad=True)
    b = T.Tensor(rnd((4, 6), 41), requires_grad=True)

    def f():
        t = T.transpose(a, (1, 0))
        r = T.reshape(t, (4, 6))
        s = T.slice_(r, (slice(1, 3), slice(None)))
        cat = T.concat([s, T.slice_(b, (slice(0, 2), slice(None)))], axis=0)
        return T.mean(T.mul(cat, cat))

    assert T.grad_check(f, [a, b]) < 1e-4


def test_conv1d_gradient_and_shape():
    x = T.Tensor(rnd((7, 3), 50), requires_grad=True)
    k = T.Tensor(rnd((3, 5), 51), requires_grad=True)
    out = T.conv1d(x, k)
    assert out.shape == (7, 3)

    def f():
        return T.mean(T.mul(T.conv1d(x, k), T.Tensor(rnd((7, 3), 52))))

    assert T.grad_check(f, [x, k]) < 1e-4


def test_conv1d_batched_gradient():
    x = T.Tensor(rnd((2, 6, 3), 54), requires_grad=True)
    k = T.Tensor(rnd((3, 3), 55), requires_grad=True)

    def f():
        return T.mean(T.mul(T.conv1d(x, k), T.Tensor(rnd((2, 6, 3), 56))))

    assert T.grad_check(f, [x, k]) < 1e-4


def test_conv1d_matches_direct_convolution():
    # independent oracle: explicit per-channel loop over taps
    rng = np.random.default_rng(53)
    x = rng.normal(size=(9, 2))
    w = rng.normal(size=(2, 3))
    expected = np.zeros_like(x)
    for c in range(2):
        padded = np.pad(x[:, c], (1, 1))
        for t in range(9):
            expected[t, c] = np.dot(padded[t : t + 3], w[c])
    out = T.conv1d(T.Tensor(x), T.Tensor(w))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_embedding_lookup_gradient_scatter():
    table = T.Tensor(rnd((6, 3), 60), requires_grad=True)
    ids = np.array([0, 2, 2, 5])
    out = T.embedding_lookup(table, ids)
    assert out.shape == (4, 3)
    T.sum_(out).backward()
    # row 2 consumed twice, rows 1/3/4 never
    np.testing.assert_allclose(table.grad[2], 2.0)
    np.testing.assert_allclose(table.grad[1], 0.0)

    def f():
        return T.mean(T.mul(T.embedding_lookup(table, ids), T.Tensor(rnd((4, 3), 61))))

    assert T.grad_check(f, table) < 1e-4


def test_cross_entropy_gradient():
    logits = T.Tensor(rnd((6, 7), 70), requires_grad=True)
    ids = np.array([0, 1, 2, 3, 4, 5])
    mask = np.array([True, False, True, True, False, True])

    def f():
        return T.cross_entropy(logits, ids, mask)

    assert T.grad_check(f, logits) < 1e-4


def test_sigmoid_bce_gradient_and_value():
    logits = T.Tensor(np.zeros((3, 4)))
    targets = np.zeros((3, 4))
    loss = T.sigmoid_bce(logits, targets)
    assert abs(loss.item() - math.log(2.0)) < 1e-12

    p = T.Tensor(rnd((3, 4), 71), requires_grad=True)
    t = (rnd((3, 4), 72) > 0).astype(float)

    def f():
        return T.sigmoid_bce(p, t)

    assert T.grad_check(f, p) < 1e-4


def test_fanout_accumulates_gradients():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, T.Tensor(np.array([3.0]))))
    T.sum_(y).backward()
    np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


def test_backward_visits_each_node_once():
    calls = []
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = T.mul(x, x)
    orig = h._backward

    def counting(grad):
        calls.append(1)
        orig(grad)

    h._backward = counting
    # diamond: h feeds two consumers
    out = T.sum_(T.add(h, h))
    out.backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_deterministic_forward_backward():
    def run():
        x = T.Tensor(rnd((8, 8), 80), requires_grad=True)
        out = T.mean(T.gelu(T.matmul(x, x)))
        out.backward()
        return out.data.copy(), x.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2)


def test_nan_check_mode():
    T.set_nan_checks(True)
    try:
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T.mul(T.Tensor([1e308]), T.Tensor([1e308]))
    finally:
        T.set_nan_checks(False)


def test_adam_zero_gradient_fixed_point():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = {}
    T.adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1, step=1)
    np.testing.assert_allclose(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    # closed form: with constant grad g, step 1 update = lr * g/(|g| + eps') ~ lr
    p = T.Tensor(np.array([0.5, 0.5]), requires_grad=True)
    state = {}
    g = np.array([0.3, -7.0])
    T.adam_step({"p": p}, {"p": g}, state, lr=0.01, step=1)
    update = np.array([0.5, 0.5]) - p.data
    np.testing.assert_allclose(np.abs(update), [0.01, 0.01], rtol=1e-6)
    assert np.sign(update[1]) == -1.0


def test_adam_minimizes_quadratic():
    x = T.Tensor(np.array([1.0]), requires_grad=True)
    state = {}
    for step in range(1, 201):
        x.grad = None
        loss = T.mul(x, x)
        loss.backward(np.ones(1))
        T.adam_step({"x": x}, {"x": x.grad}, state, lr=0.1, step=step)
    assert abs(float(x.data[0])) < 1e-2
