import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ran_har import tensor as T
from ran_har.tensor import GradTape, Tensor, grad_check


def conv1d_loops(x, kernels, bias):
    """Same-padded cross-correlation written out coordinate by coordinate."""
    time, cin = x.shape
    k, _, cout = kernels.shape
    half = (k - 1) // 2
    out = np.zeros((time, cout))
    for t in range(time):
        for o in range(cout):
            acc = bias[o]
            for j in range(k):
                src = t + j - half
                if 0 <= src < time:
                    for c in range(cin):
                        acc += x[src, c] * kernels[j, c, o]
            out[t, o] = acc
    return out


def dense_loops(x, w, b):
    out = np.zeros(w.shape[1])
    for j in range(w.shape[1]):
        acc = b[j]
        for i in range(w.shape[0]):
            acc += x[i] * w[i, j]
        out[j] = acc
    return out


# oracles ---------------------------------------------------------------------


def test_conv1d_matches_loop_oracle_on_100_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        time, cin, cout = rng.integers(1, 12), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3, 5]))
        x, kern, b = rng.normal(size=(time, cin)), rng.normal(size=(k, cin, cout)), rng.normal(size=cout)
        got = T.conv1d(Tensor(x), Tensor(kern), Tensor(b)).data
        np.testing.assert_allclose(got, conv1d_loops(x, kern, b), rtol=0, atol=1e-12)


def test_conv1d_8x2_by_5x2x3():
    rng = np.random.default_rng(0)
    x, kern, b = rng.normal(size=(8, 2)), rng.normal(size=(5, 2, 3)), rng.normal(size=3)
    assert np.max(np.abs(T.conv1d(Tensor(x), Tensor(kern), Tensor(b)).data - conv1d_loops(x, kern, b))) < 1e-12


def test_dense_matches_loop_oracle_on_100_instances():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, m = rng.integers(1, 9, size=2)
        x, w, b = rng.normal(size=n), rng.normal(size=(n, m)), rng.normal(size=m)
        np.testing.assert_allclose(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, dense_loops(x, w, b), rtol=0, atol=1e-12)


def test_conv1d_batched_equals_per_window():
    rng = np.random.default_rng(3)
    x, kern, b = rng.normal(size=(4, 10, 2)), rng.normal(size=(3, 2, 5)), rng.normal(size=5)
    batched = T.conv1d(Tensor(x), Tensor(kern), Tensor(b)).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], conv1d_loops(x[i], kern, b), atol=1e-12)


# direct examples -------------------------------------------------------------


def test_conv1d_zero_input_gives_bias():
    rng = np.random.default_rng(4)
    b = rng.normal(size=3)
    out = T.conv1d(Tensor(np.zeros((7, 2))), Tensor(rng.normal(size=(5, 2, 3))), Tensor(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (7, 1)))


def test_conv1d_identity_kernel():
    x = np.random.default_rng(5).normal(size=(6, 1))
    out = T.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out, x)


def test_conv1d_rejects_bad_shapes():
    with pytest.raises(ValueError):
        T.conv1d(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 3, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        T.conv1d(Tensor(np.zeros((5, 2))), Tensor(np.zeros((4, 2, 1))), Tensor(np.zeros(1)))


def test_dense_identity_and_bias_only():
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([3.0, 4.0])
    np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.zeros((3, 2))), Tensor(b)).data, b)
    with pytest.raises(ValueError):
        T.dense(Tensor(x), Tensor(np.zeros((2, 2))), Tensor(b))


def test_maxpool_examples():
    x = np.array([[1.0], [3.0], [2.0], [5.0]])
    np.testing.assert_array_equal(T.maxpool1d(Tensor(x), 2).data[:, 0], [3.0, 5.0])
    np.testing.assert_array_equal(T.maxpool1d(Tensor(x), 1).data, x)
    with pytest.raises(ValueError):
        T.maxpool1d(Tensor(x), 5)
    with pytest.raises(ValueError):
        T.maxpool1d(Tensor(x), 0)


def test_maxpool_650_three_times_gives_81():
    x = Tensor(np.random.default_rng(6).normal(size=(650, 16)))
    lengths = []
    for _ in range(3):
        x = T.maxpool1d(x, 2)
        lengths.append(x.shape[0])
    assert lengths == [325, 162, 81]


def test_maxpool_tie_routes_gradient_to_first():
    x = Tensor(np.array([[2.0], [2.0], [1.0], [0.0]]), requires_grad=True)
    with GradTape() as tape:
        y = T.sum(T.maxpool1d(x, 2))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g[:, 0], [1.0, 0.0, 1.0, 0.0])


def test_activation_values():
    assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    assert T.tanh(Tensor(np.zeros(1))).data[0] == 0.0
    np.testing.assert_allclose(T.softmax(Tensor(np.full(7, 2.3))).data, np.full(7, 1 / 7), atol=1e-15)
    out = T.softmax(Tensor(np.array([1000.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.5, 0.5])
    assert np.all(np.isfinite(T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data))


# tape ------------------------------------------------------------------------


def test_unreachable_source_has_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = T.sum(T.square(a))
        T.sum(b)
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_array_equal(ga, 2 * np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(3))


def test_fan_out_accumulates():
    a = Tensor(np.array([3.0]), requires_grad=True)
    with GradTape() as tape:
        y = T.sum(T.add(T.mul(a, a), a))
    (g,) = tape.gradient(y, [a])
    assert g[0] == 7.0


def test_nothing_recorded_without_tape():
    a = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        pass
    T.add(a, a)
    assert tape.gradient(T.sum(a), [a])[0].sum() == 0.0


def test_grad_check_rejects_epsilon_out_of_range():
    x = Tensor(np.ones(2))
    for eps in (1e-8, 1e-2):
        with pytest.raises(ValueError):
            grad_check(lambda a: T.sum(a), [x], epsilon=eps)


# gradient checks ---------------------------------------------------------------


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def _fused_ce(rng):
    targets = rng.integers(0, 5, size=3)
    return (lambda z: T.softmax_cross_entropy(z, targets)), [_rand(rng, 3, 5)]


PRIMITIVES = {
    "add": lambda rng: (lambda a, b: T.add(a, b), [_rand(rng, 3, 4), _rand(rng, 4)]),
    "sub": lambda rng: (lambda a, b: T.sub(a, b), [_rand(rng, 3, 4), _rand(rng, 3, 1)]),
    "mul": lambda rng: (lambda a, b: T.mul(a, b), [_rand(rng, 3, 4), _rand(rng, 4)]),
    "scale": lambda rng: (lambda a: T.scale(a, -1.7), [_rand(rng, 5)]),
    "square": lambda rng: (T.square, [_rand(rng, 5)]),
    "log": lambda rng: (T.log, [Tensor(rng.uniform(0.5, 2.0, size=6))]),
    "sum": lambda rng: (lambda a: T.sum(a, axis=0), [_rand(rng, 3, 4)]),
    "mean": lambda rng: (lambda a: T.mean(a, axis=-1), [_rand(rng, 3, 4)]),
    "reshape": lambda rng: (lambda a: T.reshape(a, (4, 3)), [_rand(rng, 3, 4)]),
    "concat": lambda rng: (lambda a, b: T.concat([a, b], axis=-1), [_rand(rng, 2, 3), _rand(rng, 2, 2)]),
    "stack": lambda rng: (lambda a, b: T.stack([a, b], axis=1), [_rand(rng, 2, 3), _rand(rng, 2, 3)]),
    "split": lambda rng: (lambda a: T.mul(T.split(a, 2)[1], T.split(a, 2)[0]), [_rand(rng, 3, 6)]),
    "matmul": lambda rng: (T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]),
    "dense": lambda rng: (T.dense, [_rand(rng, 4), _rand(rng, 4, 3), _rand(rng, 3)]),
    "conv1d": lambda rng: (T.conv1d, [_rand(rng, 8, 2), _rand(rng, 5, 2, 3), _rand(rng, 3)]),
    "maxpool1d": lambda rng: (lambda a: T.maxpool1d(a, 2), [_rand(rng, 9, 3)]),
    "sigmoid": lambda rng: (T.sigmoid, [_rand(rng, 6)]),
    "tanh": lambda rng: (T.tanh, [_rand(rng, 6)]),
    "softmax": lambda rng: (T.softmax, [_rand(rng, 3, 5)]),
    "softmax_cross_entropy": lambda rng: _fused_ce(rng),
    "embedding": lambda rng: (lambda t: T.embedding(t, [0, 2, 2, 1]), [_rand(rng, 4, 3)]),
    "pick": lambda rng: (lambda a: T.pick(a, [1, 0, 4]), [_rand(rng, 3, 5)]),
    "weighted_sum": lambda rng: (T.weighted_sum, [_rand(rng, 2, 4), _rand(rng, 2, 4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_at_100_points(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fn, inputs = PRIMITIVES[name](rng)
        result = grad_check(fn, inputs, epsilon=1e-5, seed=seed)
        assert result.checked > 0
        worst = max(worst, result.max_rel_error)
    assert worst < 1e-4, f"{name}: {worst:.2e}"


@pytest.mark.parametrize("name", ["dense", "conv1d", "softmax_cross_entropy"])
def test_named_primitives_are_tight(name):
    fn, inputs = PRIMITIVES[name](np.random.default_rng(42))
    assert grad_check(fn, inputs, epsilon=1e-5).max_rel_error < 1e-6


def test_maxpool_tie_is_skipped_not_failed():
    x = Tensor(np.array([[1.0], [1.0], [0.0], [2.0]]))
    res = grad_check(lambda a: T.maxpool1d(a, 2), [x])
    assert res.skipped >= 2
    assert res.max_rel_error < 1e-6


# properties --------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), finite, finite)
def test_conv1d_and_dense_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    kern, zero3 = Tensor(rng.normal(size=(3, 2, 3))), Tensor(np.zeros(3))
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    lhs = T.conv1d(Tensor(a * x + b * y), kern, zero3).data
    rhs = a * T.conv1d(Tensor(x), kern, zero3).data + b * T.conv1d(Tensor(y), kern, zero3).data
    assert np.max(np.abs(lhs - rhs)) < 1e-9
    w = Tensor(rng.normal(size=(2, 3)))
    lhs = T.dense(Tensor(a * x[0] + b * y[0]), w, zero3).data
    rhs = a * T.dense(Tensor(x[0]), w, zero3).data + b * T.dense(Tensor(y[0]), w, zero3).data
    assert np.max(np.abs(lhs - rhs)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)), st.floats(-100, 100))
def test_softmax_properties(z, shift):
    p = T.softmax(Tensor(z)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1.0) < 1e-9
    if np.ptp(z) < 30:
        assert np.all(p > 0)
    assert np.argmax(T.softmax(Tensor(z + shift)).data) == np.argmax(p)


def test_forward_and_backward_are_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x, k, b = (Tensor(rng.normal(size=s), requires_grad=True) for s in [(12, 3), (5, 3, 4), (4,)])
        with GradTape() as tape:
            y = T.sum(T.tanh(T.conv1d(x, k, b)))
        return y.data, tape.gradient(y, [x, k, b])

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))
